#include "rlp/whitebox.hpp"

#include <algorithm>
#include <cmath>

#include "rlp/rng.hpp"

namespace rlp {

std::string_view whitebox_name(WhiteBoxMethod m) {
  switch (m) {
    case WhiteBoxMethod::kFgsm: return "FGSM";
    case WhiteBoxMethod::kPgd: return "PGD";
    case WhiteBoxMethod::kBim: return "BIM";
  }
  return "?";
}

WhiteBoxMethod parse_whitebox(std::string_view s) {
  if (s == "FGSM" || s == "fgsm") return WhiteBoxMethod::kFgsm;
  if (s == "PGD" || s == "pgd") return WhiteBoxMethod::kPgd;
  if (s == "BIM" || s == "bim") return WhiteBoxMethod::kBim;
  throw std::invalid_argument("unknown white-box attack '" + std::string(s) + "'");
}

void WhiteBoxConfig::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("white-box epsilon must be positive");
  if (steps < 1) throw std::invalid_argument("white-box steps must be >= 1");
  if (method != WhiteBoxMethod::kFgsm && !(step_size > 0.0 && step_size <= epsilon)) {
    throw std::invalid_argument("PGD/BIM step size must be in (0, epsilon]");
  }
}

namespace {

void check_inputs(const Classifier& c, const Tensor& x, std::span<const int> labels) {
  if (x.rank() != 4 || x.dim(0) != labels.size()) {
    throw ShapeError("white-box attack: batch " + shape_str(x.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  for (float v : x.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("white-box attack: x outside [0,1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c.num_classes()) {
      throw std::out_of_range("white-box attack: label");
    }
  }
}

float sign_of(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

Tensor iterate(const Classifier& c, const Tensor& x, std::span<const int> labels,
               const WhiteBoxConfig& cfg, bool random_start) {
  cfg.validate();
  check_inputs(c, x, labels);
  Tensor cur = x;
  cur.set_requires_grad(false);
  if (random_start) {
    const std::size_t per = x.numel() / x.dim(0);
    for (std::size_t n = 0; n < x.dim(0); ++n) {
      Stream rng(cfg.seed, {0x96D, n});
      for (std::size_t k = 0; k < per; ++k)
        cur[n * per + k] += static_cast<float>(rng.uniform(-cfg.epsilon, cfg.epsilon));
    }
    project_linf(cur.data(), x.data(), cfg.epsilon);
  }
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const Tensor grad = input_gradient(c, cur, labels);
    for (std::size_t k = 0; k < cur.numel(); ++k)
      cur[k] += static_cast<float>(cfg.step_size) * sign_of(grad[k]);
    project_linf(cur.data(), x.data(), cfg.epsilon);
  }
  return cur;
}

}  // namespace

Tensor input_gradient(const Classifier& c, const Tensor& x, std::span<const int> labels) {
  Tensor in = x;
  in.set_requires_grad(true);
  const std::size_t k = c.num_classes();
  Tensor onehot({labels.size(), k});
  for (std::size_t r = 0; r < labels.size(); ++r) onehot[r * k + static_cast<std::size_t>(labels[r])] = 1.0f;
  Graph g;
  Var logp = g.log_softmax(c.logits(g, g.bind(in)));
  // Summed (not averaged) cross-entropy so each row's gradient is independent
  // of the batch size.
  Var loss = g.mul(g.sum(g.mul(logp, g.constant(std::move(onehot)))),
                   g.constant(Tensor::scalar(-1.0f)));
  g.backward(loss);
  Tensor grad(x.shape(), std::vector<float>(in.grad().begin(), in.grad().end()));
  grad.check_finite("input gradient");
  return grad;
}

void project_linf(std::span<float> v, std::span<const float> x, double eps) {
  const float e = static_cast<float>(eps);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = std::clamp(v[i], x[i] - e, x[i] + e);
    v[i] = std::clamp(v[i], 0.0f, 1.0f);
  }
}

Tensor fgsm(const Classifier& c, const Tensor& x, std::span<const int> labels, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: negative epsilon");
  check_inputs(c, x, labels);
  Tensor out = x;
  out.set_requires_grad(false);
  if (epsilon == 0.0) return out;
  const Tensor grad = input_gradient(c, x, labels);
  for (std::size_t k = 0; k < out.numel(); ++k)
    out[k] += static_cast<float>(epsilon) * sign_of(grad[k]);
  project_linf(out.data(), x.data(), epsilon);
  return out;
}

Tensor pgd(const Classifier& c, const Tensor& x, std::span<const int> labels,
           const WhiteBoxConfig& cfg) {
  return iterate(c, x, labels, cfg, cfg.random_start);
}

Tensor bim(const Classifier& c, const Tensor& x, std::span<const int> labels,
           const WhiteBoxConfig& cfg) {
  return iterate(c, x, labels, cfg, false);
}

AdversarialPairs generate_pairs(const Classifier& c, const LabeledImages& data,
                                const WhiteBoxConfig& cfg) {
  AdversarialPairs out;
  out.attack = std::string(whitebox_name(cfg.method));
  out.shape = data.shape();
  out.labels = data.labels();
  out.clean = data.raw();
  out.adversarial.reserve(out.clean.size());
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor x = data.batch(idx);
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(data.label(i));
    WhiteBoxConfig local = cfg;
    local.seed = cfg.seed ^ (0x1000003ULL * (start / chunk + 1));
    Tensor adv;
    switch (cfg.method) {
      case WhiteBoxMethod::kFgsm: adv = fgsm(c, x, labels, cfg.epsilon); break;
      case WhiteBoxMethod::kPgd: adv = pgd(c, x, labels, local); break;
      case WhiteBoxMethod::kBim: adv = bim(c, x, labels, local); break;
    }
    out.adversarial.insert(out.adversarial.end(), adv.data().begin(), adv.data().end());
  }
  return out;
}

}  // namespace rlp
