#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlp/rng.hpp"

namespace rlp::theory {

using Vec = std::vector<double>;
using ScalarFn = std::function<double(std::span<const double>)>;
using VectorFn = std::function<Vec(std::span<const double>)>;
using Sampler = std::function<Vec(Stream&)>;

struct Estimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// mu is the smoothing radius. With `theorem_mode` the radius must also
/// respect mu <= epsilon / (sqrt(d) * lipschitz_F).
struct SmoothingSpec {
  double mu = 0.01;
  std::size_t n = 1000;
  std::uint64_t seed = 1;
  bool theorem_mode = false;
  double epsilon = 0.0;
  double lipschitz_F = 0.0;

  void validate(std::size_t d) const;
};

/// Monte Carlo f_mu(x) = E f(x + mu u), u ~ N(0, I).
Estimate gaussian_smooth(const ScalarFn& f, std::span<const double> x, const SmoothingSpec& spec);

/// One draw of [f(m_k1(x + mu u)) - f(m_k2(x))] / mu * u with k1, k2 drawn
/// independently and uniformly from the pool.
Vec grad_estimator_G(const ScalarFn& f, std::span<const VectorFn> pool, std::span<const double> x,
                     double mu, Stream& rng);

/// Coordinatewise mean and standard error of n estimator draws.
std::pair<Vec, Vec> mean_gradient(const ScalarFn& f, std::span<const VectorFn> pool,
                                  std::span<const double> x, double mu, std::size_t n, Stream& rng);

/// ||E G||^2 from n draws: ||mean||^2 minus trace(cov)/n.
double debiased_sq_norm(const ScalarFn& f, std::span<const VectorFn> pool, std::span<const double> x,
                        double mu, std::size_t n, Stream& rng);

/// max over probes and member pairs of ||m_i(x) - m_j(x)||_2.
double estimate_nu(std::span<const VectorFn> pool, std::span<const Vec> probes);

struct LipschitzEstimate {
  double L0_hat = 0.0;
  double L1_hat = 0.0;
  std::size_t pairs = 0;  // pairs actually used (coincident ones are skipped)
  Vec witness_x, witness_y;  // pair attaining L0_hat
};

/// Sampled lower bounds on the Lipschitz constants of g and of its gradient.
/// For vector g both are per-output maxima. L1 uses central differences with
/// step fd_h and is skipped when fd_h <= 0.
LipschitzEstimate estimate_lipschitz(const VectorFn& g, const Sampler& domain, std::size_t n,
                                     std::uint64_t seed, double fd_h = 0.0);
/// Same, over caller-supplied pairs.
LipschitzEstimate estimate_lipschitz(const VectorFn& g, std::span<const std::pair<Vec, Vec>> pairs,
                                     double fd_h = 0.0);

/// Monte Carlo E||u||^p for u ~ N(0, I_d).
Estimate gaussian_moment(std::size_t d, double p, std::size_t n, std::uint64_t seed);

// Closed forms.
double gamma(double nu, double mu, double L0_m, double d);
double mu_cap(double epsilon, double d, double L0_F);
double theorem1_eta(double R, double epsilon, double Q, double L0_f, double L0_m, double gamma_value,
                    double d);
double theorem1_bound(double L0_f, double R, double d, double Q, double epsilon, double gamma_value,
                      double L0_m);
/// L0_f^5 R d^2 / (epsilon delta^2) * gamma * L0_m^3, the query-order expression.
double theorem1_query_order(double L0_f, double R, double d, double epsilon, double delta,
                            double gamma_value, double L0_m);
double theorem2_bound(double nu, double L0_f, double H);

/// Synthetic objectives: "linear", "quadratic", "margin-toy".
struct ToyFunction {
  std::string name;
  std::size_t dim = 0;
  ScalarFn f;
  std::optional<std::function<Vec(std::span<const double>)>> grad;  // analytic, when known
};
ToyFunction make_toy_function(const std::string& name, std::size_t dim, std::uint64_t seed);

/// Offset pool: m_0 is the identity, m_k(x) = x + b_k with |b_k| = spread.
std::vector<VectorFn> offset_pool(std::size_t size, std::size_t dim, double spread, std::uint64_t seed);

struct TheoremRow {
  std::string experiment;
  std::string config_id;
  std::size_t K = 0;
  double nu_hat = 0.0;
  double measured = 0.0;
  double bound = 0.0;
  bool pass = false;
  std::string note;
};

struct Theorem1Config {
  std::string function = "margin-toy";
  std::size_t dim = 8;
  std::vector<std::size_t> pool_sizes{1, 2, 4, 8};
  double spread = 0.05;      // |b_k| of the offset pool
  std::size_t Q = 200;       // trajectory length
  double R = 1.0;            // iterates stay within R of x_0
  double epsilon = 0.1;      // accuracy parameter; fixes mu at the cap
  std::size_t seeds = 16;
  std::size_t grad_samples = 256;
  std::size_t lipschitz_pairs = 4000;
  double inflation = 1.05;
  std::uint64_t seed = 1;
};

struct Theorem1Result {
  std::vector<TheoremRow> rows;
  double mu = 0.0, eta = 0.0;  // of the last row
};

/// Descends F_{mu,K} with the pool estimator at the step size of the bound,
/// and compares the seed-averaged mean of ||grad F_{mu,K}(x_t)||^2 with the
/// bound (constants inflated).
Theorem1Result theorem1_experiment(const Theorem1Config& cfg);

struct Theorem2Probe {
  Vec x;
  Vec u;
};

/// For each probe: H = f(m_0(x + mu u)) - f(m_0(x)), H_K = f(m_k1(x + mu u)) -
/// f(m_k2(x)) over `trials` draws of (k1, k2). Probes with |H| < 1e-9 are
/// reported as skipped (pass, note "skipped").
std::vector<TheoremRow> theorem2_experiment(const ScalarFn& f, std::span<const VectorFn> pool,
                                            std::span<const Theorem2Probe> probes, double mu,
                                            std::size_t trials, double nu_hat, double L0_f,
                                            std::uint64_t seed, const std::string& config_id);

}  // namespace rlp::theory
