#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rlp/models.hpp"
#include "rlp/rng.hpp"
#include "support/toy.hpp"

using namespace rlp;

TEST(MarginLoss, Examples) {
  EXPECT_DOUBLE_EQ(margin_loss(std::vector<float>(10, 0.1f), 0), 0.0);
  std::vector<float> onehot(5, 0.0f);
  onehot[3] = 1.0f;
  EXPECT_DOUBLE_EQ(margin_loss(onehot, 3), 1.0);
  EXPECT_NEAR(margin_loss(std::vector<float>{0.2f, 0.5f, 0.3f}, 0), -0.3, 1e-7);
  EXPECT_NEAR(margin_loss(std::vector<float>{0.2f, 0.5f, 0.3f}, 0, 2), -0.1, 1e-7);
}

TEST(MarginLoss, Errors) {
  EXPECT_THROW(margin_loss(std::vector<float>{1.0f}, 0), std::invalid_argument);
  EXPECT_THROW(margin_loss(std::vector<float>{0.5f, 0.5f}, 1, 1), std::invalid_argument);
  EXPECT_THROW(margin_loss(std::vector<float>{0.5f, 0.5f}, 2), std::out_of_range);
}

TEST(MarginLoss, PermutationOfOtherEntries) {
  Stream rng(11, {1});
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 2 + rng.below(9), y = rng.below(n);
    std::vector<float> s(n);
    for (float& v : s) v = static_cast<float>(rng.uniform(-3, 3));
    double base = margin_loss(s, y);
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < n; ++i)
      if (i != y) others.push_back(i);
    std::vector<float> vals;
    for (auto i : others) vals.push_back(s[i]);
    for (std::size_t i = vals.size(); i > 1; --i) std::swap(vals[i - 1], vals[rng.below(i)]);
    auto p = s;
    for (std::size_t k = 0; k < others.size(); ++k) p[others[k]] = vals[k];
    EXPECT_EQ(margin_loss(p, y), base);
  }
}

TEST(MarginLoss, SignAgreesWithArgmax) {
  Stream rng(12, {1});
  for (int trial = 0; trial < 500; ++trial) {
    std::size_t n = 2 + rng.below(6), y = rng.below(n);
    std::vector<float> s(n);
    for (float& v : s) v = static_cast<float>(rng.uniform(-2, 2));
    // softmax in double, rounded like predict()
    double mx = *std::max_element(s.begin(), s.end()), z = 0;
    for (float v : s) z += std::exp(v - mx);
    std::vector<float> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(std::exp(s[i] - mx) / z);
    EXPECT_EQ(margin_loss(p, y) > 0, argmax(s) == y);
  }
  EXPECT_EQ(argmax(std::vector<float>{0.5f, 0.5f}), 0u);
}

TEST(Classifier, ZeroLinearIsUniform) {
  ImageShape shape{3, 4, 4};
  Classifier c(Architecture::linear(), shape, 4, 1);
  for (auto& [name, t] : c.params()) std::fill(t.data().begin(), t.data().end(), 0.0f);
  Tensor x(shape.batch(1), 0.3f);
  Tensor p = predict(c, x);
  ASSERT_EQ(p.shape(), (Shape{1, 4}));
  for (float v : p.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Classifier, BatchRowsSumToOne) {
  ImageShape shape{3, 8, 8};
  Classifier c(Architecture::tiny_cnn(), shape, 10, 5);
  Stream rng(5, {1});
  Tensor x(shape.batch(7));
  for (float& v : x.data()) v = static_cast<float>(rng.uniform());
  Tensor p = predict(c, x);
  ASSERT_EQ(p.shape(), (Shape{7, 10}));
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 10; ++j) s += p[r * 10 + j];
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
  EXPECT_EQ(predict(c, x), predict(c, x));
  EXPECT_THROW(predict(c, Tensor({1, 3, 4, 4})), ShapeError);
}

TEST(Architecture, ParseAndPresets) {
  auto a = Architecture::parse("conv:8:3,relu,conv:8:3,relu,flatten,linear");
  EXPECT_EQ(a.str(), Architecture::tiny_cnn().str());
  EXPECT_EQ(Architecture::parse(a.str()).str(), a.str());
  EXPECT_THROW(Architecture::parse("conv:8:3,relu"), std::invalid_argument);
  EXPECT_THROW(Architecture::parse("bogus"), std::invalid_argument);
}

TEST(Training, ZeroEpochsLeavesInitialModel) {
  ClassifierTrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 4;
  auto t = train_classifier(toy::train_set(), Architecture::tiny_cnn(), cfg);
  Classifier init(Architecture::tiny_cnn(), toy::train_set().shape(), toy::train_set().num_classes(), cfg.seed);
  EXPECT_TRUE(t.model.params() == init.params());
}

TEST(Training, SameSeedGivesIdenticalCheckpoints) {
  ClassifierTrainConfig cfg;
  cfg.epochs = 3;
  auto a = train_classifier(toy::train_set(), Architecture::tiny_cnn(), cfg);
  auto b = train_classifier(toy::train_set(), Architecture::tiny_cnn(), cfg);
  std::ostringstream sa, sb;
  write_checkpoint(sa, a.model.params());
  write_checkpoint(sb, b.model.params());
  EXPECT_EQ(sa.str(), sb.str());
  cfg.seed = 2;
  auto c = train_classifier(toy::train_set(), Architecture::tiny_cnn(), cfg);
  EXPECT_FALSE(c.model.params() == a.model.params());
}

TEST(Training, RejectsBadData) {
  EXPECT_THROW(train_classifier(LabeledImages({3, 8, 8}, 2), Architecture::linear(), {}), std::invalid_argument);
}

TEST(Training, ToyClassifierFitsItsTrainingImages) {
  const auto& t = toy::classifier();
  EXPECT_GE(accuracy(t.model, toy::train_set()), 0.9);
}

namespace {

// Two classes split by a random hyperplane through the grey image, with a gap
// of `margin` on either side.
LabeledImages separable_set(std::size_t n, std::uint64_t seed, const std::vector<double>& w, double margin) {
  ImageShape shape{3, 8, 8};
  LabeledImages out(shape, 2);
  Stream rng(seed, {1});
  std::vector<float> px(shape.numel());
  while (out.size() < n) {
    double dot = 0;
    for (std::size_t i = 0; i < px.size(); ++i) {
      px[i] = static_cast<float>(0.5 + rng.uniform(-0.25, 0.25));
      dot += w[i] * (px[i] - 0.5);
    }
    if (std::fabs(dot) < margin) continue;
    out.push(px, dot > 0 ? 1 : 0);
  }
  return out;
}

// Perceptron with bias; returns true once an epoch makes no mistakes.
bool perceptron_separates(const LabeledImages& d, std::size_t max_epochs) {
  const std::size_t n = d.shape().numel();
  std::vector<double> w(n + 1, 0.0);
  for (std::size_t e = 0; e < max_epochs; ++e) {
    std::size_t mistakes = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto px = d.pixels(i);
      double s = w[n];
      for (std::size_t k = 0; k < n; ++k) s += w[k] * px[k];
      double y = d.label(i) == 1 ? 1.0 : -1.0;
      if (y * s <= 0) {
        ++mistakes;
        for (std::size_t k = 0; k < n; ++k) w[k] += y * px[k];
        w[n] += y;
      }
    }
    if (mistakes == 0) return true;
  }
  return false;
}

}  // namespace

TEST(Training, LinearlySeparableSet) {
  Stream rng(21, {1});
  std::vector<double> w(3 * 8 * 8);
  double norm = 0;
  for (double& v : w) v = rng.normal(), norm += v * v;
  for (double& v : w) v /= std::sqrt(norm);
  auto data = separable_set(500, 3, w, 0.15);
  ASSERT_TRUE(perceptron_separates(data, 1000));

  ClassifierTrainConfig cfg;
  cfg.epochs = 40;
  cfg.lr = 1e-2f;
  auto t = train_classifier(data, Architecture::linear(), cfg);
  EXPECT_GE(t.heldout_accuracy, 0.98);
}

TEST(AttackProblemTest, Validate) {
  AttackProblem p;
  p.x = Tensor({1, 3, 2, 2}, 0.5f);
  EXPECT_NO_THROW(p.validate(2));
  p.radius = 0;
  EXPECT_THROW(p.validate(2), std::invalid_argument);
  p.radius = 0.1;
  p.x[0] = 1.5f;
  EXPECT_THROW(p.validate(2), std::invalid_argument);
  p.x[0] = 0.5f;
  p.target = 0;
  EXPECT_THROW(p.validate(2), std::invalid_argument);
}
