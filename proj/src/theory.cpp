#include "rlp/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rlp/tensor.hpp"

namespace rlp::theory {

namespace {

Vec normal_vec(std::size_t d, Stream& rng) {
  Vec u(d);
  for (double& v : u) v = rng.normal();
  return u;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dist2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + " returned a non-finite value");
  return v;
}

Estimate mean_stderr(double sum, double sumsq, std::size_t n) {
  Estimate e;
  e.mean = sum / static_cast<double>(n);
  if (n > 1) {
    const double var = std::max(0.0, (sumsq - sum * e.mean) / static_cast<double>(n - 1));
    e.stderr_ = std::sqrt(var / static_cast<double>(n));
  }
  return e;
}

}  // namespace

void SmoothingSpec::validate(std::size_t d) const {
  if (!(mu > 0.0)) throw std::invalid_argument("smoothing radius must be positive");
  if (n == 0) throw std::invalid_argument("smoothing needs at least one sample");
  if (theorem_mode && mu > mu_cap(epsilon, static_cast<double>(d), lipschitz_F) * (1.0 + 1e-12)) {
    throw std::invalid_argument("smoothing radius exceeds the cap epsilon / (sqrt(d) L0(F))");
  }
}

Estimate gaussian_smooth(const ScalarFn& f, std::span<const double> x, const SmoothingSpec& spec) {
  spec.validate(x.size());
  Stream rng(spec.seed, {0x5300});
  double sum = 0.0, sumsq = 0.0;
  Vec z(x.size());
  for (std::size_t s = 0; s < spec.n; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + spec.mu * rng.normal();
    const double v = finite(f(z), "smoothed function");
    sum += v;
    sumsq += v * v;
  }
  return mean_stderr(sum, sumsq, spec.n);
}

Vec grad_estimator_G(const ScalarFn& f, std::span<const VectorFn> pool, std::span<const double> x,
                     double mu, Stream& rng) {
  if (pool.empty()) throw std::invalid_argument("estimator needs a non-empty pool");
  if (!(mu > 0.0)) throw std::invalid_argument("estimator needs mu > 0");
  Vec u = normal_vec(x.size(), rng);
  const std::size_t k1 = rng.below(pool.size());
  const std::size_t k2 = rng.below(pool.size());
  Vec z(x.begin(), x.end());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += mu * u[i];
  const double diff = finite(f(pool[k1](z)), "objective") - finite(f(pool[k2](x)), "objective");
  for (double& v : u) v *= diff / mu;
  return u;
}

std::pair<Vec, Vec> mean_gradient(const ScalarFn& f, std::span<const VectorFn> pool,
                                  std::span<const double> x, double mu, std::size_t n, Stream& rng) {
  const std::size_t d = x.size();
  Vec sum(d, 0.0), sumsq(d, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const Vec g = grad_estimator_G(f, pool, x, mu, rng);
    for (std::size_t i = 0; i < d; ++i) {
      sum[i] += g[i];
      sumsq[i] += g[i] * g[i];
    }
  }
  Vec mean(d), se(d);
  for (std::size_t i = 0; i < d; ++i) {
    const Estimate e = mean_stderr(sum[i], sumsq[i], n);
    mean[i] = e.mean;
    se[i] = e.stderr_;
  }
  return {mean, se};
}

double debiased_sq_norm(const ScalarFn& f, std::span<const VectorFn> pool, std::span<const double> x,
                        double mu, std::size_t n, Stream& rng) {
  if (n < 2) throw std::invalid_argument("debiased norm needs at least two samples");
  const auto [mean, se] = mean_gradient(f, pool, x, mu, n, rng);
  // se^2 = var / n, so sum(se^2) is trace(cov) / n.
  double out = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) out += mean[i] * mean[i] - se[i] * se[i];
  return out;
}

double estimate_nu(std::span<const VectorFn> pool, std::span<const Vec> probes) {
  if (pool.empty()) throw std::invalid_argument("estimate_nu: empty pool");
  if (probes.empty()) throw std::invalid_argument("estimate_nu: no probes");
  double nu = 0.0;
  for (const Vec& x : probes) {
    std::vector<Vec> outs;
    for (const VectorFn& m : pool) outs.push_back(m(x));
    for (std::size_t i = 0; i < outs.size(); ++i)
      for (std::size_t j = i + 1; j < outs.size(); ++j) nu = std::max(nu, dist2(outs[i], outs[j]));
  }
  return nu;
}

namespace {

// Central-difference Jacobian, row-major [outputs][d].
std::vector<Vec> jacobian(const VectorFn& g, std::span<const double> x, std::size_t outputs, double h) {
  std::vector<Vec> J(outputs, Vec(x.size()));
  Vec z(x.begin(), x.end());
  for (std::size_t j = 0; j < x.size(); ++j) {
    z[j] = x[j] + h;
    const Vec up = g(z);
    z[j] = x[j] - h;
    const Vec dn = g(z);
    z[j] = x[j];
    for (std::size_t i = 0; i < outputs; ++i) J[i][j] = (up[i] - dn[i]) / (2.0 * h);
  }
  return J;
}

void accumulate(const VectorFn& g, const Vec& x, const Vec& y, double fd_h, LipschitzEstimate& est) {
  const double r = dist2(x, y);
  if (r == 0.0) return;
  const Vec gx = g(x), gy = g(y);
  ++est.pairs;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    const double ratio = std::abs(finite(gy[i], "function") - finite(gx[i], "function")) / r;
    if (ratio > est.L0_hat) {
      est.L0_hat = ratio;
      est.witness_x = x;
      est.witness_y = y;
    }
  }
  if (fd_h > 0.0) {
    const auto Jx = jacobian(g, x, gx.size(), fd_h), Jy = jacobian(g, y, gx.size(), fd_h);
    for (std::size_t i = 0; i < gx.size(); ++i) est.L1_hat = std::max(est.L1_hat, dist2(Jx[i], Jy[i]) / r);
  }
}

}  // namespace

LipschitzEstimate estimate_lipschitz(const VectorFn& g, const Sampler& domain, std::size_t n,
                                     std::uint64_t seed, double fd_h) {
  if (n == 0) throw std::invalid_argument("estimate_lipschitz needs at least one pair");
  LipschitzEstimate est;
  for (std::size_t s = 0; s < n; ++s) {
    Stream rng(seed, {0x11B, s});
    const Vec x = domain(rng);
    const Vec y = domain(rng);
    accumulate(g, x, y, fd_h, est);
  }
  return est;
}

LipschitzEstimate estimate_lipschitz(const VectorFn& g, std::span<const std::pair<Vec, Vec>> pairs,
                                     double fd_h) {
  LipschitzEstimate est;
  for (const auto& [x, y] : pairs) accumulate(g, x, y, fd_h, est);
  return est;
}

Estimate gaussian_moment(std::size_t d, double p, std::size_t n, std::uint64_t seed) {
  Stream rng(seed, {0x303, d});
  double sum = 0.0, sumsq = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double r2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double v = rng.normal();
      r2 += v * v;
    }
    const double m = std::pow(r2, p / 2.0);
    sum += m;
    sumsq += m * m;
  }
  return mean_stderr(sum, sumsq, n);
}

double gamma(double nu, double mu, double L0_m, double d) {
  return 4.0 * nu * nu / (mu * mu) + 4.0 * nu / mu * L0_m * std::sqrt(d) + L0_m * L0_m * d;
}

double mu_cap(double epsilon, double d, double L0_F) { return epsilon / (std::sqrt(d) * L0_F); }

double theorem1_eta(double R, double epsilon, double Q, double L0_f, double L0_m, double gamma_value,
                    double d) {
  return std::sqrt(2.0 * R * epsilon / ((Q + 1.0) * std::pow(L0_f, 3) * d * d)) *
         std::sqrt(1.0 / (L0_m * gamma_value));
}

double theorem1_bound(double L0_f, double R, double d, double Q, double epsilon, double gamma_value,
                      double L0_m) {
  return std::sqrt(2.0 * std::pow(L0_f, 5) * R * d * d / ((Q + 1.0) * epsilon)) *
         std::sqrt(gamma_value * std::pow(L0_m, 3));
}

double theorem1_query_order(double L0_f, double R, double d, double epsilon, double delta,
                            double gamma_value, double L0_m) {
  return std::pow(L0_f, 5) * R * d * d / (epsilon * delta * delta) * gamma_value * std::pow(L0_m, 3);
}

double theorem2_bound(double nu, double L0_f, double H) {
  if (H == 0.0) return 1.0;
  return std::min(1.0, 2.0 * nu * L0_f / std::abs(H));
}

ToyFunction make_toy_function(const std::string& name, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw std::invalid_argument("toy function needs dim >= 1");
  ToyFunction t;
  t.name = name;
  t.dim = dim;
  Stream rng(seed, {0x70F, dim});
  if (name == "linear") {
    const Vec a = normal_vec(dim, rng);
    t.f = [a](std::span<const double> x) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * x[i];
      return s;
    };
    t.grad = [a](std::span<const double>) { return a; };
  } else if (name == "quadratic") {
    t.f = [](std::span<const double> x) {
      double s = 0.0;
      for (double v : x) s += v * v;
      return s;
    };
    t.grad = [](std::span<const double> x) {
      Vec g(x.begin(), x.end());
      for (double& v : g) v *= 2.0;
      return g;
    };
  } else if (name == "margin-toy") {
    // Three-class linear scorer; f = z_0 - log sum_{j>0} exp z_j.
    constexpr std::size_t kClasses = 3;
    std::vector<Vec> w(kClasses);
    for (Vec& row : w) {
      row = normal_vec(dim, rng);
      for (double& v : row) v /= std::sqrt(static_cast<double>(dim));
    }
    auto logits = [w](std::span<const double> x) {
      Vec z(kClasses, 0.0);
      for (std::size_t c = 0; c < kClasses; ++c)
        for (std::size_t i = 0; i < x.size(); ++i) z[c] += w[c][i] * x[i];
      return z;
    };
    t.f = [logits](std::span<const double> x) {
      const Vec z = logits(x);
      const double m = std::max(z[1], z[2]);
      return z[0] - (m + std::log(std::exp(z[1] - m) + std::exp(z[2] - m)));
    };
    t.grad = [logits, w](std::span<const double> x) {
      const Vec z = logits(x);
      const double m = std::max(z[1], z[2]);
      const double e1 = std::exp(z[1] - m), e2 = std::exp(z[2] - m);
      Vec g(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) g[i] = w[0][i] - (e1 * w[1][i] + e2 * w[2][i]) / (e1 + e2);
      return g;
    };
  } else {
    throw std::invalid_argument("unknown toy function '" + name + "'");
  }
  return t;
}

std::vector<VectorFn> offset_pool(std::size_t size, std::size_t dim, double spread, std::uint64_t seed) {
  std::vector<VectorFn> pool;
  for (std::size_t k = 0; k < size; ++k) {
    Vec b(dim, 0.0);
    if (k > 0) {
      Stream rng(seed, {0x0FF, k});
      b = normal_vec(dim, rng);
      const double n = norm2(b);
      for (double& v : b) v *= spread / n;
    }
    pool.push_back([b](std::span<const double> x) {
      Vec out(x.begin(), x.end());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
      return out;
    });
  }
  return pool;
}

Theorem1Result theorem1_experiment(const Theorem1Config& cfg) {
  if (cfg.pool_sizes.empty()) throw std::invalid_argument("theorem1: no pool sizes");
  if (cfg.seeds == 0 || cfg.grad_samples < 2) throw std::invalid_argument("theorem1: need seeds and >= 2 samples");
  const ToyFunction toy = make_toy_function(cfg.function, cfg.dim, cfg.seed);
  const std::size_t d = cfg.dim;
  const double dd = static_cast<double>(d);
  const std::size_t kmax = *std::max_element(cfg.pool_sizes.begin(), cfg.pool_sizes.end());
  const std::vector<VectorFn> full = offset_pool(kmax, d, cfg.spread, cfg.seed);

  Stream start(cfg.seed, {0x10});
  Vec x0 = normal_vec(d, start);
  for (double& v : x0) v *= 0.5;

  // Domain: points within R + spread of x0, paired with nearby points so the
  // local slope is seen as well as the chordal one.
  const double reach = cfg.R + cfg.spread;
  const Sampler near_pair = [&](Stream& rng) {
    Vec p = normal_vec(d, rng);
    const double r = reach * std::pow(rng.uniform(), 1.0 / dd) / norm2(p);
    for (std::size_t i = 0; i < d; ++i) p[i] = x0[i] + r * p[i];
    return p;
  };
  const VectorFn fvec = [&](std::span<const double> x) { return Vec{toy.f(x)}; };
  double L0_f = estimate_lipschitz(fvec, near_pair, cfg.lipschitz_pairs, cfg.seed).L0_hat;
  {
    std::vector<std::pair<Vec, Vec>> local;
    Stream rng(cfg.seed, {0x1C});
    for (std::size_t s = 0; s < cfg.lipschitz_pairs; ++s) {
      Vec a = near_pair(rng), b = a;
      for (double& v : b) v += 1e-3 * rng.normal();
      local.emplace_back(std::move(a), std::move(b));
    }
    L0_f = std::max(L0_f, estimate_lipschitz(fvec, local).L0_hat);
  }
  const double L0_m = estimate_lipschitz(full[0], near_pair, cfg.lipschitz_pairs, cfg.seed + 1).L0_hat;
  const double Lf = L0_f * cfg.inflation, Lm = L0_m * cfg.inflation;
  const double mu = mu_cap(cfg.epsilon, dd, Lf * Lm);

  Theorem1Result result;
  result.mu = mu;
  for (std::size_t K : cfg.pool_sizes) {
    const std::span<const VectorFn> pool(full.data(), K);
    std::vector<Vec> probes{x0};
    const double nu = estimate_nu(pool, probes);
    const double g = gamma(nu * cfg.inflation, mu, Lm, dd);
    const double Qd = static_cast<double>(cfg.Q);
    const double eta = theorem1_eta(cfg.R, cfg.epsilon, Qd, Lf, Lm, g, dd);
    const double bound = theorem1_bound(Lf, cfg.R, dd, Qd, cfg.epsilon, g, Lm);
    double measured = 0.0;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      Stream step_rng(cfg.seed, {0x71, K, s});
      Stream probe_rng(cfg.seed, {0x72, K, s});
      Vec x = x0;
      double acc = 0.0;
      for (std::size_t t = 0; t <= cfg.Q; ++t) {
        acc += debiased_sq_norm(toy.f, pool, x, mu, cfg.grad_samples, probe_rng);
        const Vec G = grad_estimator_G(toy.f, pool, x, mu, step_rng);
        for (std::size_t i = 0; i < d; ++i) x[i] -= eta * G[i];
        // Keep the iterate inside the R-ball around x0.
        Vec delta(d);
        for (std::size_t i = 0; i < d; ++i) delta[i] = x[i] - x0[i];
        const double r = norm2(delta);
        if (r > cfg.R)
          for (std::size_t i = 0; i < d; ++i) x[i] = x0[i] + delta[i] * cfg.R / r;
        for (double v : x) finite(v, "trajectory");
      }
      measured += acc / (Qd + 1.0);
    }
    measured /= static_cast<double>(cfg.seeds);
    TheoremRow row;
    row.experiment = "theorem1";
    row.config_id = cfg.function + "-d" + std::to_string(d) + "-K" + std::to_string(K);
    row.K = K;
    row.nu_hat = nu;
    row.measured = measured;
    row.bound = bound;
    row.pass = measured <= bound;
    result.rows.push_back(row);
    result.eta = eta;
  }
  return result;
}

std::vector<TheoremRow> theorem2_experiment(const ScalarFn& f, std::span<const VectorFn> pool,
                                            std::span<const Theorem2Probe> probes, double mu,
                                            std::size_t trials, double nu_hat, double L0_f,
                                            std::uint64_t seed, const std::string& config_id) {
  if (pool.empty()) throw std::invalid_argument("theorem2: empty pool");
  if (trials == 0) throw std::invalid_argument("theorem2: need trials");
  std::vector<TheoremRow> rows;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const Vec& x = probes[p].x;
    Vec z = x;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += mu * probes[p].u[i];
    // Member outputs are fixed per probe; only the indices are random.
    std::vector<double> at_z, at_x;
    for (const VectorFn& m : pool) {
      at_z.push_back(finite(f(m(z)), "objective"));
      at_x.push_back(finite(f(m(x)), "objective"));
    }
    const double H = at_z[0] - at_x[0];
    TheoremRow row;
    row.experiment = "theorem2";
    row.config_id = config_id + "-probe" + std::to_string(p);
    row.K = pool.size();
    row.nu_hat = nu_hat;
    if (std::abs(H) < 1e-9) {
      row.pass = true;
      row.bound = 1.0;
      row.note = "skipped";
      rows.push_back(row);
      continue;
    }
    Stream rng(seed, {0x72B, p});
    std::size_t flips = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t k1 = rng.below(pool.size());
      const std::size_t k2 = rng.below(pool.size());
      const double HK = at_z[k1] - at_x[k2];
      if ((HK > 0.0) != (H > 0.0) || HK == 0.0) ++flips;
    }
    const double freq = static_cast<double>(flips) / static_cast<double>(trials);
    const double se = std::sqrt(freq * (1.0 - freq) / static_cast<double>(trials));
    row.measured = freq;
    row.bound = theorem2_bound(nu_hat, L0_f, H);
    row.pass = freq <= row.bound + 3.0 * se;
    if (row.bound >= 1.0) row.note = "vacuous";
    rows.push_back(row);
  }
  return rows;
}

}  // namespace rlp::theory
