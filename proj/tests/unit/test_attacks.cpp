#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rlp/attacks.hpp"
#include "support/hsj_oracle.hpp"
#include "support/toy.hpp"

using namespace rlp;

namespace {

const std::vector<AttackKind> kAllAttacks{AttackKind::kNes, AttackKind::kSimba, AttackKind::kSquare,
                                          AttackKind::kBoundary, AttackKind::kHopSkipJump};

NormKind natural_norm(AttackKind k) {
  return k == AttackKind::kSimba || k == AttackKind::kBoundary ? NormKind::kL2 : NormKind::kLinf;
}

AttackProblem toy_problem(std::size_t i, NormKind norm) {
  AttackProblem p;
  p.x = toy::test_set().image(i);
  p.label = static_cast<std::size_t>(toy::test_set().label(i));
  p.norm = norm;
  p.radius = norm == NormKind::kLinf ? 8.0 / 255.0 : 1.0;
  return p;
}

struct Run {
  AttackOutcome out;
  std::size_t oracle_queries = 0;
};

Run run(AttackKind k, const AttackProblem& p, std::size_t budget, std::uint64_t seed,
        const Defense& d = Defense::none(), const Classifier* c = nullptr) {
  AttackConfig cfg;
  cfg.kind = k;
  DefendedOracle o(c ? *c : toy::classifier().model, d, attack_mode(k), budget, seed);
  Stream rng(seed, {2});
  Run r{run_attack(o, p, cfg, rng), 0};
  r.oracle_queries = o.queries();
  return r;
}

bool in_ball(const Tensor& v, const AttackProblem& p) {
  for (float f : v.data())
    if (f < 0.0f || f > 1.0f) return false;
  double n = perturbation_norm(v.data(), p.x.data(), p.norm);
  return p.norm == NormKind::kLinf ? n <= p.radius + 1e-6 : n <= p.radius * (1 + 1e-6);
}

// Zero-weight linear classifier: every query returns uniform scores.
Classifier flat_classifier(ImageShape shape) {
  Classifier c(Architecture::linear(), shape, 2, 1);
  for (auto& [name, t] : c.params()) std::fill(t.data().begin(), t.data().end(), 0.0f);
  return c;
}

}  // namespace

TEST(Oracle, UndefendedScoresAreTheSoftmax) {
  const auto& c = toy::classifier().model;
  DefendedOracle o(c, Defense::none(), OutputMode::kScores, 5, 1);
  Tensor x = toy::test_set().image(0);
  auto s = o.scores(x);
  ASSERT_TRUE(s);
  Tensor p = predict(c, x);
  EXPECT_EQ(*s, std::vector<float>(p.data().begin(), p.data().end()));
  EXPECT_EQ(o.queries(), 1u);
  EXPECT_EQ(*o.label(x), argmax(*s));
  EXPECT_EQ(o.queries(), 2u);
  EXPECT_THROW(o.scores(Tensor({1, 3, 4, 4})), ShapeError);
  DefendedOracle lab(c, Defense::none(), OutputMode::kLabel, 5, 1);
  EXPECT_THROW(lab.scores(x), std::logic_error);
}

TEST(Oracle, ZeroBudgetIsExhaustedImmediately) {
  DefendedOracle o(toy::classifier().model, Defense::none(), OutputMode::kScores, 0, 1);
  EXPECT_FALSE(o.scores(toy::test_set().image(0)));
  EXPECT_FALSE(o.label(toy::test_set().image(0)));
  EXPECT_EQ(o.queries(), 0u);
  DefendedOracle o2(toy::classifier().model, Defense::none(), OutputMode::kScores, 2, 1);
  o2.scores(toy::test_set().image(0));
  o2.scores(toy::test_set().image(0));
  EXPECT_TRUE(o2.exhausted());
  EXPECT_FALSE(o2.scores(toy::test_set().image(0)));
  EXPECT_EQ(o2.queries(), 2u);
}

TEST(Oracle, PatchwiseRandomnessAndDegeneratePool) {
  const auto& c = toy::classifier().model;
  Tensor x = toy::test_set().image(1);
  std::vector<Purifier> diverse, same;
  for (std::size_t i = 0; i < 4; ++i) {
    diverse.emplace_back(EncoderFamily::kEdsrLite, 32, 100 + i);
    same.emplace_back(EncoderFamily::kEdsrLite, 32, 100);
  }
  auto d1 = Defense::patchwise(std::make_shared<PurifierPool>(std::move(diverse)), 2, 2);
  auto d2 = Defense::patchwise(std::make_shared<PurifierPool>(std::move(same)), 2, 2);
  EXPECT_TRUE(d1.randomized());
  DefendedOracle o1(c, d1, OutputMode::kScores, 20, 3), o2(c, d2, OutputMode::kScores, 20, 3);
  auto first = *o1.scores(x);
  bool differs = false;
  for (int i = 0; i < 10; ++i) differs |= *o1.scores(x) != first;
  EXPECT_TRUE(differs);
  auto ref = *o2.scores(x);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(*o2.scores(x), ref);
}

TEST(Oracle, QueryStreamsAreIndexedByQuery) {
  const auto& c = toy::classifier().model;
  Tensor x = toy::test_set().image(2);
  HeuristicTransform t;
  auto d = Defense::transform(t);
  DefendedOracle a(c, d, OutputMode::kScores, 10, 9), b(c, d, OutputMode::kScores, 10, 9);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(*a.scores(x), *b.scores(x));
}

class AttackSuite : public ::testing::TestWithParam<AttackKind> {};

TEST_P(AttackSuite, QueryAccountingIsExact) {
  const AttackKind k = GetParam();
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t budget : {0u, 1u, 37u, 300u}) {
      auto p = toy_problem(i, natural_norm(k));
      auto r = run(k, p, budget, 10 + i);
      std::size_t phases = 0;
      for (const auto& [name, n] : r.out.phase_queries) phases += n;
      EXPECT_EQ(phases, r.oracle_queries) << attack_name(k);
      EXPECT_EQ(r.out.queries, r.oracle_queries);
      EXPECT_LE(r.out.queries, budget);
      if (r.out.success_query) {
        EXPECT_TRUE(r.out.success);
        EXPECT_LE(*r.out.success_query, r.out.queries);
      }
      for (std::size_t t = 1; t < r.out.trace.size(); ++t) EXPECT_LE(r.out.trace[t - 1].query, r.out.trace[t].query);
    }
  }
}

TEST_P(AttackSuite, FinalPointsStayInTheBall) {
  const AttackKind k = GetParam();
  for (std::size_t i = 0; i < 10; ++i) {
    auto p = toy_problem(i, natural_norm(k));
    auto r = run(k, p, 400, 20 + i);
    EXPECT_TRUE(in_ball(r.out.best, p)) << attack_name(k) << " image " << i;
    if (r.out.success) {
      auto y = argmax(predict(toy::classifier().model, r.out.best).data());
      EXPECT_NE(y, p.label);
    }
  }
}

TEST_P(AttackSuite, Deterministic) {
  const AttackKind k = GetParam();
  auto p = toy_problem(3, natural_norm(k));
  auto a = run(k, p, 300, 5), b = run(k, p, 300, 5);
  EXPECT_EQ(a.out.best, b.out.best);
  EXPECT_EQ(a.out.queries, b.out.queries);
  EXPECT_EQ(a.out.success_query, b.out.success_query);
  ASSERT_EQ(a.out.trace.size(), b.out.trace.size());
  for (std::size_t t = 0; t < a.out.trace.size(); ++t) EXPECT_EQ(a.out.trace[t].value, b.out.trace[t].value);
}

TEST_P(AttackSuite, AcceptedTraceIsMonotone) {
  const AttackKind k = GetParam();
  if (k == AttackKind::kNes) GTEST_SKIP() << "NES takes every step";
  for (std::size_t i = 0; i < 10; ++i) {
    auto p = toy_problem(i, natural_norm(k));
    auto r = run(k, p, 600, 30 + i);
    double last = std::numeric_limits<double>::infinity();
    for (const auto& t : r.out.trace) {
      if (!t.accepted) continue;
      EXPECT_LE(t.value, last) << attack_name(k) << " image " << i << " query " << t.query;
      last = t.value;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(All, AttackSuite, ::testing::ValuesIn(kAllAttacks),
                         [](const auto& info) { return std::string(attack_name(info.param)); });

TEST(Simba, TwoQueriesPerCoordinate) {
  // Flat scores: nothing is ever accepted, so a full pass over d coordinates
  // spends exactly two queries on each.
  ImageShape shape{1, 3, 3};
  Classifier c = flat_classifier(shape);
  AttackProblem p;
  p.x = Tensor(shape.batch(1), 0.5f);
  p.norm = NormKind::kL2;
  p.radius = 1.0;
  const std::size_t d = shape.numel();
  DefendedOracle o(c, Defense::none(), OutputMode::kScores, 1 + 2 * d, 1);
  Stream rng(1, {2});
  auto out = simba_attack(o, p, {}, rng);
  EXPECT_EQ(out.phase_queries["search"], 2 * d);
  EXPECT_EQ(out.best, p.x);
}

TEST(Simba, OversizedStepKeepsMonotoneTraceAndBall) {
  auto p = toy_problem(4, NormKind::kL2);
  p.radius = 0.5;
  DefendedOracle o(toy::classifier().model, Defense::none(), OutputMode::kScores, 400, 4);
  Stream rng(4, {2});
  auto out = simba_attack(o, p, {.step = 5.0}, rng);
  double last = std::numeric_limits<double>::infinity();
  for (const auto& t : out.trace) {
    EXPECT_LE(t.norm, p.radius * (1 + 1e-6));
    if (!t.accepted) continue;
    EXPECT_LE(t.value, last);
    last = t.value;
  }
}

TEST(Square, PerturbationSitsOnTheBallSurface) {
  // Pixels away from 0 and 1 so nothing is clipped.
  auto p = toy_problem(5, NormKind::kLinf);
  for (float& v : p.x.data()) v = std::clamp(v, 0.1f, 0.9f);
  DefendedOracle o(toy::classifier().model, Defense::none(), OutputMode::kScores, 200, 5);
  Stream rng(5, {2});
  auto out = square_attack(o, p, {}, rng);
  for (std::size_t i = 0; i < p.x.numel(); ++i)
    EXPECT_NEAR(std::fabs(double(out.best[i]) - p.x[i]), p.radius, 1e-6);
  EXPECT_THROW(square_attack(o, toy_problem(5, NormKind::kL2), {}, rng), std::invalid_argument);
  EXPECT_THROW(square_attack(o, p, {.p_init = 0.6}, rng), std::invalid_argument);
}

TEST(Square, HalvingSchedule) {
  EXPECT_EQ(square_p_schedule(0.4, 0, 10000), 0.4);
  EXPECT_EQ(square_p_schedule(0.4, 30, 10000), 0.2);
  EXPECT_EQ(square_p_schedule(0.4, 100, 10000), 0.1);
  EXPECT_EQ(square_p_schedule(0.4, 9000, 10000), 0.4 / 512);
}

TEST(Nes, FlatScoresGiveZeroStep) {
  ImageShape shape{3, 8, 8};
  Classifier c = flat_classifier(shape);
  auto p = toy_problem(0, NormKind::kLinf);
  p.label = 0;
  DefendedOracle o(c, Defense::none(), OutputMode::kScores, 500, 1);
  Stream rng(1, {2});
  auto out = nes_attack(o, p, {}, rng);
  EXPECT_EQ(out.best, p.x);
  EXPECT_FALSE(out.success);
  EXPECT_EQ(out.queries, 500u);
}

TEST(Defaults, PublishedHyperparameters) {
  AttackConfig cfg;
  EXPECT_EQ(cfg.nes.lr, 0.01);
  EXPECT_EQ(cfg.nes.samples, 100u);
  EXPECT_EQ(cfg.simba.step, 0.2);
  EXPECT_EQ(cfg.boundary.step_adaptation, 1.5);
  EXPECT_EQ(cfg.boundary.spherical_step, 0.01);
  EXPECT_EQ(cfg.boundary.source_step, 0.01);
  EXPECT_EQ(cfg.boundary.source_step_convergence, 1e-7);
  EXPECT_EQ(cfg.hsj.n_est, 100u);
  EXPECT_EQ(cfg.hsj.gamma, 1.0);
  EXPECT_EQ(attack_mode(AttackKind::kBoundary), OutputMode::kLabel);
  EXPECT_EQ(attack_mode(AttackKind::kSquare), OutputMode::kScores);
}

TEST(HopSkipJump, EstimatedNormalAlignsWithLinearModel) {
  auto r = hsj_oracle::boundary_normal_cosine(10);
  EXPECT_EQ(r.failed_init, 0u);
  EXPECT_TRUE(r.estimate_counts_exact);
  ASSERT_GT(r.directions, 10u);
  EXPECT_GE(r.mean_cosine, 0.7);
}

TEST(Boundary, RefinesTheStartingPoint) {
  std::size_t started = 0, improved = 0;
  AttackConfig cfg;
  cfg.kind = AttackKind::kBoundary;
  cfg.boundary.stop_at_success = false;
  for (std::size_t i = 0; i < 20; ++i) {
    auto p = toy_problem(i, NormKind::kL2);
    DefendedOracle o(toy::classifier().model, Defense::none(), OutputMode::kLabel, 1000, 50 + i);
    Stream rng(50 + i, {2});
    auto out = run_attack(o, p, cfg, rng);
    if (out.failed_init || out.trace.empty()) continue;
    ++started;
    improved += out.trace.back().value < out.trace.front().value || out.norm < out.trace.front().value;
  }
  ASSERT_GT(started, 0u);
  EXPECT_GE(static_cast<double>(improved), 0.9 * static_cast<double>(started));
}

// Loose floors; both attacks break nearly every toy image given more queries.
TEST(Effectiveness, UndefendedToySuccessRates) {
  const auto& c = toy::classifier().model;
  LabeledImages first(toy::test_set().shape(), toy::test_set().num_classes());
  for (std::size_t i = 0; i < 20; ++i) first.push(toy::test_set().pixels(i), toy::test_set().label(i));
  AttackConfig cfg;
  cfg.kind = AttackKind::kNes;
  auto nes = evaluate_attack(c, Defense::none(), first, cfg, 2500, NormKind::kLinf, 8.0 / 255.0, 1, 4);
  EXPECT_GE(1.0 - nes.robust_accuracy, 0.6);
  cfg.kind = AttackKind::kSquare;
  auto sq = evaluate_attack(c, Defense::none(), first, cfg, 500, NormKind::kLinf, 8.0 / 255.0, 1, 4);
  EXPECT_GE(1.0 - sq.robust_accuracy, 0.6);

  auto curve = robust_curve(sq, std::vector<std::size_t>{0, 10, 100, 500});
  EXPECT_EQ(curve.back(), sq.robust_accuracy);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i], curve[i - 1]);

  std::ostringstream os;
  write_trace_csv(os, sq);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "image_id,query_index,margin_or_distance,accepted,norm");
}

TEST(Evaluation, IndependentOfThreadCount) {
  const auto& c = toy::classifier().model;
  LabeledImages first(toy::test_set().shape(), toy::test_set().num_classes());
  for (std::size_t i = 0; i < 8; ++i) first.push(toy::test_set().pixels(i), toy::test_set().label(i));
  AttackConfig cfg;
  cfg.kind = AttackKind::kSquare;
  auto d = Defense::transform(HeuristicTransform{});
  auto a = evaluate_attack(c, d, first, cfg, 200, NormKind::kLinf, 8.0 / 255.0, 3, 1);
  auto b = evaluate_attack(c, d, first, cfg, 200, NormKind::kLinf, 8.0 / 255.0, 3, 4);
  ASSERT_EQ(a.outcomes.size(), b.outcomes.size());
  for (std::size_t i = 0; i < a.outcomes.size(); ++i) {
    EXPECT_EQ(a.outcomes[i].best, b.outcomes[i].best);
    EXPECT_EQ(a.outcomes[i].success_query, b.outcomes[i].success_query);
  }
}
