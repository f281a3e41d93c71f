#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rlp/models.hpp"
#include "rlp/theory.hpp"
#include "support/toy.hpp"

using namespace rlp;
using namespace rlp::theory;

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec draw(std::size_t d, Stream& rng, double lo = -1, double hi = 1) {
  Vec v(d);
  for (double& e : v) e = rng.uniform(lo, hi);
  return v;
}

VectorFn identity() {
  return [](std::span<const double> x) { return Vec(x.begin(), x.end()); };
}

VectorFn scaled(double s) {
  return [s](std::span<const double> x) {
    Vec v(x.begin(), x.end());
    for (double& e : v) e *= s;
    return v;
  };
}

}  // namespace

TEST(Smoothing, LinearFunctionIsUnchanged) {
  Stream rng(1, {1});
  const Vec a = draw(6, rng), x = draw(6, rng);
  ScalarFn f = [&](std::span<const double> z) { return dot(a, z); };
  auto e = gaussian_smooth(f, x, {.mu = 0.3, .n = 20000, .seed = 3});
  EXPECT_LE(std::fabs(e.mean - dot(a, x)), 3 * e.stderr_);
  EXPECT_GT(e.stderr_, 0.0);
}

TEST(Smoothing, SquaredNormGainsMuSquaredD) {
  Stream rng(2, {1});
  const std::size_t d = 10;
  const Vec x = draw(d, rng);
  const double mu = 0.2;
  ScalarFn f = [](std::span<const double> z) { return dot(z, z); };
  auto e = gaussian_smooth(f, x, {.mu = mu, .n = 50000, .seed = 4});
  EXPECT_LE(std::fabs(e.mean - (dot(x, x) + mu * mu * d)), 3 * e.stderr_);
}

TEST(Smoothing, ClassifierMarginStderrShrinksAsRootN) {
  const auto& c = toy::classifier().model;
  const Tensor img = toy::test_set().image(0);
  const std::size_t y = static_cast<std::size_t>(toy::test_set().label(0));
  ScalarFn f = [&](std::span<const double> z) {
    Tensor t = img;
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(z[i]);
    Tensor p = predict(c, t);
    return margin_loss(p.data(), y);
  };
  const Vec x(img.data().begin(), img.data().end());
  auto a = gaussian_smooth(f, x, {.mu = 0.05, .n = 2000, .seed = 5});
  auto b = gaussian_smooth(f, x, {.mu = 0.05, .n = 8000, .seed = 6});
  EXPECT_NEAR(b.stderr_ / a.stderr_, 0.5, 0.1);
}

TEST(Smoothing, NonFiniteObjectiveThrows) {
  ScalarFn f = [](std::span<const double>) { return std::numeric_limits<double>::infinity(); };
  EXPECT_THROW(gaussian_smooth(f, Vec{0.0}, {}), NonFiniteError);
}

TEST(SmoothingSpecTest, Validate) {
  EXPECT_THROW(SmoothingSpec{.mu = 0}.validate(4), std::invalid_argument);
  EXPECT_THROW(SmoothingSpec{.n = 0}.validate(4), std::invalid_argument);
  SmoothingSpec s{.mu = 0.05, .theorem_mode = true, .epsilon = 0.1, .lipschitz_F = 1.0};
  EXPECT_NO_THROW(s.validate(4));  // cap 0.05
  s.mu = 0.06;
  EXPECT_THROW(s.validate(4), std::invalid_argument);
  EXPECT_DOUBLE_EQ(mu_cap(0.1, 4, 1.0), 0.05);
}

TEST(Estimator, UnbiasedForLinearWithIdentityPool) {
  Stream rng(7, {1});
  const std::size_t d = 5;
  const Vec a = draw(d, rng), x = draw(d, rng);
  ScalarFn f = [&](std::span<const double> z) { return dot(a, z); };
  std::vector<VectorFn> pool{identity()};
  Stream s1(8, {1});
  auto [mean, se] = mean_gradient(f, pool, x, 0.1, 100000, s1);
  for (std::size_t i = 0; i < d; ++i) EXPECT_LE(std::fabs(mean[i] - a[i]), 3 * se[i]) << i;

  Stream s2(8, {2});
  auto [mean4, se4] = mean_gradient(f, pool, x, 0.1, 400000, s2);
  for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(se4[i] / se[i], 0.5, 0.05);
}

TEST(Estimator, PoolOfCopiesMatchesSingleMember) {
  ScalarFn f = [](std::span<const double> z) { return std::sin(z[0]) + z[0] * z[1]; };
  const Vec x{0.3, -0.7};
  std::vector<VectorFn> one{identity()}, three{identity(), identity(), identity()};
  Stream r1(9, {1}), r3(9, {2});
  auto [m1, s1] = mean_gradient(f, one, x, 0.2, 50000, r1);
  auto [m3, s3] = mean_gradient(f, three, x, 0.2, 50000, r3);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_LE(std::fabs(m1[i] - m3[i]), 4 * std::hypot(s1[i], s3[i]));
  // Same draws of u give the same sample: only k1, k2 differ and they do not matter.
  Stream b(10, {1});
  std::vector<VectorFn> two{identity(), identity()};
  Vec g2 = grad_estimator_G(f, two, x, 0.2, b);
  Stream c(10, {1});
  Vec u(2);
  for (double& e : u) e = c.normal();
  const double diff = f(Vec{x[0] + 0.2 * u[0], x[1] + 0.2 * u[1]}) - f(x);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(g2[i], diff / 0.2 * u[i], 1e-12);
}

// f(y) = sin y0 + cos y1 + y0 y1 smooths to exp(-mu^2/2)(sin y0 + cos y1) + y0 y1.
// With offset members m_k(x) = x + b_k, the mean of G is the gradient of the
// pool average of the smoothed function, taken here by central differences.
TEST(Estimator, MeanMatchesFiniteDifferenceOfPoolObjective) {
  ScalarFn f = [](std::span<const double> z) { return std::sin(z[0]) + std::cos(z[1]) + z[0] * z[1]; };
  const double mu = 0.5;
  auto pool = offset_pool(3, 2, 0.3, 11);
  auto smooth = [&](const Vec& y) { return std::exp(-mu * mu / 2) * (std::sin(y[0]) + std::cos(y[1])) + y[0] * y[1]; };
  auto F = [&](const Vec& x) {
    double s = 0;
    for (const auto& m : pool) s += smooth(m(x));
    return s / static_cast<double>(pool.size());
  };
  const Vec x{0.4, 0.9};
  const double h = 1e-5;
  Stream rng(12, {1});
  auto [mean, se] = mean_gradient(f, pool, x, mu, 200000, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    Vec p = x, q = x;
    p[i] += h;
    q[i] -= h;
    const double fd = (F(p) - F(q)) / (2 * h);
    EXPECT_LE(std::fabs(mean[i] - fd), 5 * se[i]) << i;
  }
}

TEST(Estimator, Errors) {
  ScalarFn f = [](std::span<const double>) { return 0.0; };
  Stream rng(1, {1});
  EXPECT_THROW(grad_estimator_G(f, {}, Vec{0.0}, 0.1, rng), std::invalid_argument);
  std::vector<VectorFn> pool{identity()};
  EXPECT_THROW(debiased_sq_norm(f, pool, Vec{0.0}, 0.1, 1, rng), std::invalid_argument);
}

TEST(Estimator, DebiasedNormOfLinearGradient) {
  Stream rng(13, {1});
  const Vec a = draw(4, rng), x = draw(4, rng);
  ScalarFn f = [&](std::span<const double> z) { return dot(a, z); };
  std::vector<VectorFn> pool{identity()};
  double s = 0;
  const int reps = 200;
  for (int r = 0; r < reps; ++r) s += debiased_sq_norm(f, pool, x, 0.1, 256, rng);
  EXPECT_NEAR(s / reps, dot(a, a), 0.1 * dot(a, a));
}

TEST(Nu, Examples) {
  std::vector<Vec> probes{{0.6, 0.8}};
  std::vector<VectorFn> same{identity(), identity()};
  EXPECT_EQ(estimate_nu(same, probes), 0.0);
  std::vector<VectorFn> pair{identity(), scaled(0.9)};
  EXPECT_NEAR(estimate_nu(pair, probes), 0.1, 1e-15);
  EXPECT_THROW(estimate_nu(std::vector<VectorFn>{}, probes), std::invalid_argument);
  EXPECT_THROW(estimate_nu(pair, std::vector<Vec>{}), std::invalid_argument);
}

TEST(Nu, MonotoneUnderInclusion) {
  auto pool = offset_pool(6, 4, 0.2, 3);
  Stream rng(14, {1});
  std::vector<Vec> probes{draw(4, rng), draw(4, rng)};
  const double full = estimate_nu(pool, probes);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) {
      std::vector<VectorFn> sub{pool[i], pool[j]};
      EXPECT_LE(estimate_nu(sub, probes), full);
    }
}

TEST(Lipschitz, LinearFunction) {
  Stream rng(15, {1});
  const Vec a = draw(3, rng);
  const double na = std::sqrt(dot(a, a));
  VectorFn g = [&](std::span<const double> z) { return Vec{dot(a, z)}; };
  Sampler cube = [](Stream& r) { return draw(3, r, 0, 1); };
  auto few = estimate_lipschitz(g, cube, 50, 1);
  EXPECT_LE(few.L0_hat, na * (1 + 1e-12));
  auto many = estimate_lipschitz(g, cube, 10000, 2);
  EXPECT_LE(many.L0_hat, na * (1 + 1e-12));
  EXPECT_GE(many.L0_hat, 0.95 * na);
  EXPECT_EQ(many.pairs, 10000u);
}

TEST(Lipschitz, RampOnUnitInterval) {
  VectorFn ramp = [](std::span<const double> z) { return Vec{std::min(2 * z[0], 1.0)}; };
  Sampler unit = [](Stream& r) { return Vec{r.uniform()}; };
  auto e = estimate_lipschitz(ramp, unit, 5000, 3);
  EXPECT_GT(e.L0_hat, 1.8);
  EXPECT_LE(e.L0_hat, 2.0 + 1e-12);
}

TEST(Lipschitz, CoincidentPairsAreSkipped) {
  VectorFn g = identity();
  std::vector<std::pair<Vec, Vec>> pairs{{{1.0}, {1.0}}, {{0.0}, {2.0}}};
  auto e = estimate_lipschitz(g, pairs);
  EXPECT_EQ(e.pairs, 1u);
  EXPECT_DOUBLE_EQ(e.L0_hat, 1.0);
}

// Sampled L0 of f o m stays below the product of the factors' constants. The
// member x + 0.1 sin(x) is 1.1-Lipschitz; f's constant is the largest
// gradient norm over the same region.
TEST(Lipschitz, CompositionBound) {
  auto toyf = make_toy_function("margin-toy", 4, 5);
  VectorFn m = [](std::span<const double> z) {
    Vec v(z.begin(), z.end());
    for (double& e : v) e += 0.1 * std::sin(e);
    return v;
  };
  VectorFn fm = [&](std::span<const double> z) { return Vec{toyf.f(m(z))}; };
  Sampler box = [](Stream& r) { return draw(4, r, -1, 1); };
  double Lf = 0;
  Stream rng(16, {1});
  for (int i = 0; i < 20000; ++i) {
    Vec g = (*toyf.grad)(draw(4, rng, -1.1, 1.1));
    Lf = std::max(Lf, std::sqrt(dot(g, g)));
  }
  auto e = estimate_lipschitz(fm, box, 5000, 6);
  EXPECT_LE(e.L0_hat, Lf * 1.1 * 1.05);
  EXPECT_GT(e.L0_hat, 0.0);
}

TEST(Moments, BelowClosedFormBound) {
  for (std::size_t d : {1u, 8u, 64u}) {
    for (double p : {2.0, 3.0, 4.0}) {
      auto e = gaussian_moment(d, p, 20000, 17);
      EXPECT_LE(e.mean, std::pow(p + static_cast<double>(d), p / 2)) << d << " " << p;
    }
    auto two = gaussian_moment(d, 2.0, 20000, 18);
    EXPECT_LE(std::fabs(two.mean - static_cast<double>(d)), 3 * two.stderr_);
  }
}

TEST(Formulas, GammaMatchesClosedForm) {
  Stream rng(19, {1});
  for (int t = 0; t < 1000; ++t) {
    const double nu = rng.uniform(0, 2), mu = rng.uniform(1e-3, 1), L = rng.uniform(0.1, 3),
                 d = 1 + static_cast<double>(rng.below(500));
    const double expect = 4 * nu * nu / (mu * mu) + (4 * nu / mu) * L * std::sqrt(d) + L * L * d;
    EXPECT_NEAR(gamma(nu, mu, L, d), expect, 1e-15 * expect);
  }
  EXPECT_DOUBLE_EQ(gamma(0, 0.1, 1.5, 9), 1.5 * 1.5 * 9);
}

TEST(Formulas, BoundsMonotoneInNu) {
  double prev1 = 0, prev2 = 0;
  for (int i = 0; i <= 50; ++i) {
    const double nu = 0.01 * i;
    const double b1 = theorem1_bound(1.2, 1.0, 8, 200, 0.1, gamma(nu, 0.01, 1.0, 8), 1.0);
    const double b2 = theorem2_bound(nu, 1.2, 0.5);
    if (i > 0) {
      EXPECT_GT(b1, prev1);
      EXPECT_GE(b2, prev2);
    }
    prev1 = b1;
    prev2 = b2;
  }
  EXPECT_DOUBLE_EQ(theorem2_bound(0.1, 1.0, 0.1), 1.0);  // vacuous
  EXPECT_DOUBLE_EQ(theorem2_bound(0.01, 1.0, 1.0), 0.02);
}

TEST(Theorem2, IdenticalPoolNeverFlips) {
  auto toyf = make_toy_function("margin-toy", 6, 2);
  std::vector<VectorFn> pool(4, identity());
  std::vector<Theorem2Probe> probes;
  Stream rng(20, {1});
  for (int i = 0; i < 20; ++i) probes.push_back({draw(6, rng), draw(6, rng)});
  auto rows = theorem2_experiment(toyf.f, pool, probes, 0.1, 1000, 0.0, 1.0, 1, "same");
  ASSERT_EQ(rows.size(), probes.size());
  for (const auto& r : rows) {
    EXPECT_EQ(r.measured, 0.0);
    EXPECT_TRUE(r.pass);
  }
}

TEST(Theorem2, BoundRespectedAndDegenerateProbesSkipped) {
  auto toyf = make_toy_function("linear", 6, 3);
  auto pool = offset_pool(4, 6, 0.02, 4);
  std::vector<Theorem2Probe> probes;
  Stream rng(21, {1});
  for (int i = 0; i < 20; ++i) probes.push_back({draw(6, rng), draw(6, rng)});
  probes.push_back({Vec(6, 0.0), Vec(6, 0.0)});  // H == 0
  const double nu = estimate_nu(pool, std::vector<Vec>{probes[0].x});
  Sampler box = [](Stream& r) { return draw(6, r, -2, 2); };
  VectorFn fv = [&](std::span<const double> z) { return Vec{toyf.f(z)}; };
  const double L = estimate_lipschitz(fv, box, 4000, 5).L0_hat * 1.05;
  auto rows = theorem2_experiment(toyf.f, pool, probes, 0.5, 2000, nu, L, 6, "offset");
  std::size_t informative = 0;
  for (const auto& r : rows) {
    EXPECT_TRUE(r.pass) << r.config_id;
    informative += r.bound < 1.0;
  }
  EXPECT_GT(informative, 0u);
  EXPECT_EQ(rows.back().note, "skipped");
}

TEST(Theorem1, SmallRunRowsAndMonotoneBound) {
  Theorem1Config cfg;
  cfg.Q = 20;
  cfg.seeds = 2;
  cfg.grad_samples = 64;
  cfg.lipschitz_pairs = 500;
  auto res = theorem1_experiment(cfg);
  ASSERT_EQ(res.rows.size(), 4u);
  EXPECT_EQ(res.rows[0].K, 1u);
  EXPECT_EQ(res.rows[0].nu_hat, 0.0);
  for (std::size_t i = 1; i < res.rows.size(); ++i) {
    EXPECT_GE(res.rows[i].nu_hat, res.rows[i - 1].nu_hat);
    if (res.rows[i].nu_hat > res.rows[i - 1].nu_hat) EXPECT_GT(res.rows[i].bound, res.rows[i - 1].bound);
  }
  for (const auto& r : res.rows) EXPECT_TRUE(std::isfinite(r.measured));
  EXPECT_GT(res.mu, 0.0);
  EXPECT_GT(res.eta, 0.0);
  cfg.pool_sizes.clear();
  EXPECT_THROW(theorem1_experiment(cfg), std::invalid_argument);
}

TEST(ToyFunctions, AnalyticGradientsMatchDifferences) {
  for (const char* name : {"linear", "quadratic", "margin-toy"}) {
    auto t = make_toy_function(name, 5, 8);
    Stream rng(22, {1});
    const Vec x = draw(5, rng);
    const Vec g = (*t.grad)(x);
    for (std::size_t i = 0; i < 5; ++i) {
      Vec p = x, q = x;
      p[i] += 1e-6;
      q[i] -= 1e-6;
      EXPECT_NEAR(g[i], (t.f(p) - t.f(q)) / 2e-6, 1e-6) << name;
    }
  }
  EXPECT_THROW(make_toy_function("cubic", 3, 1), std::invalid_argument);
}
