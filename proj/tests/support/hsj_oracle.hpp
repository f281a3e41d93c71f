#pragma once

// Boundary-normal check for HopSkipJump against a two-class linear model whose
// normal is known exactly. The estimator's expected cosine shrinks like
// sqrt(n_est / d), so the model works on 1x6x6 inputs.

#include <cmath>
#include <vector>

#include "rlp/attacks.hpp"

namespace rlp::hsj_oracle {

struct CosineResult {
  double mean_cosine = 0.0;
  std::size_t directions = 0;
  std::size_t failed_init = 0;
  bool estimate_counts_exact = true;  // n_est estimation queries per outer iteration
};

inline CosineResult boundary_normal_cosine(std::size_t runs, std::size_t budget = 1500) {
  const ImageShape shape{1, 6, 6};
  const std::size_t d = shape.numel();
  const HsjParams prm;
  CosineResult r;
  double sum = 0;
  for (std::uint64_t seed = 0; seed < runs; ++seed) {
    // Logit 1 minus logit 0 is w.(x - 0.5): the boundary runs through grey.
    Classifier c(Architecture::linear(), shape, 2, 40 + seed);
    Tensor& w = c.params().at("l1.w");
    Tensor& b = c.params().at("l1.b");
    std::vector<double> wv(d);
    double wsum = 0;
    Stream wr(seed, {6});
    for (std::size_t i = 0; i < d; ++i) {
      w[2 * i] = 0.0f;
      w[2 * i + 1] = static_cast<float>(wr.normal());
      wv[i] = w[2 * i + 1];
      wsum += wv[i];
    }
    b[0] = 0.0f;
    b[1] = static_cast<float>(-0.5 * wsum);

    Stream rng(seed, {7});
    AttackProblem p;
    p.x = Tensor(shape.batch(1));
    double side = 0;
    for (std::size_t i = 0; i < d; ++i) {
      p.x[i] = static_cast<float>(rng.uniform(0.3, 0.7));
      side += wv[i] * (p.x[i] - 0.5);
    }
    p.label = side > 0 ? 1 : 0;
    p.norm = NormKind::kL2;
    p.radius = 1e-3;  // never reached, so the attack keeps iterating
    // Toward the adversarial side.
    const double sign = p.label == 1 ? -1.0 : 1.0;

    DefendedOracle o(c, Defense::none(), OutputMode::kLabel, budget, seed);
    Stream arng(seed, {8});
    AttackOutcome out = hopskipjump_attack(o, p, prm, arng);
    if (out.failed_init) {
      ++r.failed_init;
      continue;
    }
    for (const auto& g : out.hsj_directions) {
      double dot = 0, gn = 0, nn = 0;
      for (std::size_t i = 0; i < d; ++i) {
        dot += g[i] * sign * wv[i];
        gn += double(g[i]) * g[i];
        nn += wv[i] * wv[i];
      }
      sum += dot / std::sqrt(gn * nn);
      ++r.directions;
    }
    const std::size_t est = out.phase_queries["estimate"], iters = out.hsj_directions.size();
    r.estimate_counts_exact &= est >= prm.n_est * iters && est < prm.n_est * (iters + 1);
  }
  r.mean_cosine = r.directions ? sum / static_cast<double>(r.directions) : 0.0;
  return r;
}

}  // namespace rlp::hsj_oracle
