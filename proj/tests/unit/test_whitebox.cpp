#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rlp/whitebox.hpp"
#include "support/toy.hpp"

using namespace rlp;

namespace {

struct Batch {
  Tensor x;
  std::vector<int> y;
};

Batch test_batch(std::size_t n) {
  const auto& d = toy::test_set();
  std::vector<std::size_t> idx(std::min(n, d.size()));
  std::iota(idx.begin(), idx.end(), 0);
  Batch b{d.batch(idx), {}};
  for (auto i : idx) b.y.push_back(d.label(i));
  return b;
}

double linf(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
  return m;
}

void expect_in_ball(const Tensor& adv, const Tensor& x, double eps) {
  EXPECT_LE(linf(adv, x), eps + 1e-6);
  for (float v : adv.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

double mean_margin(const Classifier& c, const Tensor& x, const std::vector<int>& y) {
  Tensor p = predict(c, x);
  const std::size_t k = c.num_classes();
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    s += margin_loss(std::span<const float>(p.data().data() + i * k, k), static_cast<std::size_t>(y[i]));
  return s / static_cast<double>(y.size());
}

std::size_t successes(const Classifier& c, const Tensor& x, const std::vector<int>& y) {
  Tensor p = predict(c, x);
  const std::size_t k = c.num_classes();
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    n += argmax(std::span<const float>(p.data().data() + i * k, k)) != static_cast<std::size_t>(y[i]);
  return n;
}

}  // namespace

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  const auto& c = toy::classifier().model;
  auto b = test_batch(8);
  EXPECT_EQ(fgsm(c, b.x, b.y, 0.0), b.x);
}

TEST(Fgsm, StaysInBallAndLowersMargin) {
  const auto& c = toy::classifier().model;
  auto b = test_batch(40);
  const double eps = 8.0 / 255.0;
  Tensor adv = fgsm(c, b.x, b.y, eps);
  expect_in_ball(adv, b.x, eps);
  EXPECT_LT(mean_margin(c, adv, b.y), mean_margin(c, b.x, b.y));
}

TEST(Pgd, OneStepWithoutRandomStartEqualsFgsm) {
  const auto& c = toy::classifier().model;
  auto b = test_batch(16);
  WhiteBoxConfig cfg;
  cfg.steps = 1;
  cfg.random_start = false;
  cfg.step_size = 2.0 / 255.0;
  EXPECT_EQ(pgd(c, b.x, b.y, cfg), fgsm(c, b.x, b.y, cfg.step_size));
}

TEST(Bim, OneStepEqualsFgsm) {
  const auto& c = toy::classifier().model;
  auto b = test_batch(16);
  WhiteBoxConfig cfg;
  cfg.method = WhiteBoxMethod::kBim;
  cfg.steps = 1;
  EXPECT_EQ(bim(c, b.x, b.y, cfg), fgsm(c, b.x, b.y, cfg.step_size));
}

TEST(Pgd, DeterministicInBallAndDistinctFromBim) {
  const auto& c = toy::classifier().model;
  auto b = test_batch(16);
  WhiteBoxConfig cfg;
  cfg.seed = 7;
  Tensor a1 = pgd(c, b.x, b.y, cfg), a2 = pgd(c, b.x, b.y, cfg);
  EXPECT_EQ(a1, a2);
  expect_in_ball(a1, b.x, cfg.epsilon);
  Tensor bi = bim(c, b.x, b.y, cfg);
  expect_in_ball(bi, b.x, cfg.epsilon);
  EXPECT_NE(a1, bi);
  cfg.seed = 8;
  EXPECT_NE(pgd(c, b.x, b.y, cfg), a1);
}

// Expectation rather than a hard rule: allow two percentage points of noise.
TEST(Pgd, AtLeastAsStrongAsFgsm) {
  const auto& c = toy::classifier().model;
  auto b = test_batch(40);
  WhiteBoxConfig cfg;
  const double n = static_cast<double>(b.y.size());
  double s_pgd = successes(c, pgd(c, b.x, b.y, cfg), b.y) / n;
  double s_fgsm = successes(c, fgsm(c, b.x, b.y, cfg.epsilon), b.y) / n;
  EXPECT_GE(s_pgd + 0.02, s_fgsm);
}

TEST(Projection, IdempotentAndContained) {
  Stream rng(3, {1});
  for (int t = 0; t < 100; ++t) {
    std::vector<float> x(50), v(50);
    for (float& e : x) e = static_cast<float>(rng.uniform());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] + static_cast<float>(rng.uniform(-0.3, 0.3));
    const double eps = rng.uniform(0.001, 0.2);
    project_linf(v, x, eps);
    auto once = v;
    project_linf(v, x, eps);
    EXPECT_EQ(v, once);
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_LE(std::fabs(double(v[i]) - x[i]), eps + 1e-6);
      EXPECT_GE(v[i], 0.0f);
      EXPECT_LE(v[i], 1.0f);
    }
  }
}

TEST(WhiteBoxConfigTest, Validate) {
  WhiteBoxConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.step_size = 2 * cfg.epsilon;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.steps = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.epsilon = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_EQ(parse_whitebox(whitebox_name(WhiteBoxMethod::kBim)), WhiteBoxMethod::kBim);
}

TEST(Pairs, GenerateAndRoundTrip) {
  const auto& c = toy::classifier().model;
  const auto& d = toy::test_set();
  WhiteBoxConfig cfg;
  cfg.method = WhiteBoxMethod::kFgsm;
  auto pairs = generate_pairs(c, d, cfg);
  ASSERT_EQ(pairs.size(), d.size());
  EXPECT_EQ(pairs.clean, d.raw());
  auto path = std::filesystem::temp_directory_path() / "rlp_pairs_test.pds";
  save_pairs(path, pairs);
  auto back = load_pairs(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.attack, pairs.attack);
  EXPECT_EQ(back.labels, pairs.labels);
  EXPECT_EQ(back.clean, pairs.clean);
  EXPECT_EQ(back.adversarial, pairs.adversarial);
  EXPECT_EQ(back.shape, pairs.shape);
}
