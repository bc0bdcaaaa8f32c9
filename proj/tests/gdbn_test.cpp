#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cnuav/gdbn.hpp"

using namespace cnuav;
using namespace cnuav::gdbn;

TEST(UkfPredict, ConstantVelocityAdvancesPosition) {
  const auto dyn = ContinuousDynamics::constant_velocity();
  const Vec4 x(1, 0, 1, 0);
  EXPECT_TRUE(ukf_predict(x, dyn).isApprox(Vec4(2, 0, 1, 0)));
}

TEST(UkfPredict, StaticStateStaysPut) {
  const auto dyn = ContinuousDynamics::constant_velocity();
  const Vec4 x(0.3, -0.2, 0, 0);
  EXPECT_TRUE(ukf_predict(x, dyn).isApprox(x));
}

TEST(GeneralizedError, ZeroForLinearRamp) {
  SignalTrace tr;
  for (int t = 0; t < 20; ++t) tr.samples.emplace_back(0.1 * t, -0.05 * t);
  const auto errs = trace_errors(tr, ContinuousDynamics::constant_velocity());
  ASSERT_EQ(errs.size(), 19u);
  // first step has an unknown velocity; later ones are exact
  for (std::size_t i = 1; i < errs.size(); ++i) EXPECT_LT(errs[i].at_value.norm(), 1e-12);
}

TEST(GeneralizedError, DifferenceAndReference) {
  const auto e = generalized_error(Vec4(1, 1, 0, 0), Vec4(1.5, 0.5, 0.5, -0.5));
  EXPECT_TRUE(e.at_value.isApprox(Vec4(0.5, -0.5, 0.5, -0.5)));
  EXPECT_TRUE(e.reference_state.isApprox(Vec4(1.5, 0.5, 0.5, -0.5)));
}

TEST(GeneralizedError, SinusoidGivesPeriodicNonzeroErrors) {
  SignalTrace tr;
  const int period = 8;
  for (int t = 0; t < 64; ++t) {
    const double a = 2.0 * std::numbers::pi * t / period;
    tr.samples.emplace_back(std::cos(a), std::sin(a));
  }
  const auto errs = trace_errors(tr, ContinuousDynamics::constant_velocity());
  for (std::size_t i = 1; i + period < errs.size(); ++i) {
    EXPECT_GT(errs[i].at_value.norm(), 1e-3);
    EXPECT_NEAR((errs[i].at_value - errs[i + period].at_value).norm(), 0.0, 1e-9);
  }
}

TEST(Gng, IdenticalPointsGiveOneCluster) {
  Rng rng(1);
  std::vector<Vec4> pts(500, Vec4(1, 2, 3, 4));
  const auto r = gng_train(pts, {}, rng);
  ASSERT_EQ(r.clusters.size(), 1u);
  EXPECT_TRUE(r.clusters[0].mean.isApprox(Vec4(1, 2, 3, 4)));
  EXPECT_EQ(r.clusters[0].hit_count, 500);
}

TEST(Gng, TwoBlobsMatchTwoMeansOracle) {
  Rng rng(2);
  std::normal_distribution<double> n(0.0, 0.1);
  std::vector<Vec4> pts;
  for (int i = 0; i < 400; ++i) {
    const double c = (i % 2) ? 10.0 : -10.0;
    pts.emplace_back(c + n(rng), n(rng), n(rng), n(rng));
  }
  // 2-means oracle with the obvious split: blob means
  Vec4 m_pos = Vec4::Zero(), m_neg = Vec4::Zero();
  for (const auto& p : pts) (p(0) > 0 ? m_pos : m_neg) += p / 200.0;

  GngParams gp;
  gp.learning_rate = 0.05;
  gp.resolution = 1.0;
  const auto r = gng_train(pts, gp, rng);
  ASSERT_GE(r.clusters.size(), 2u);
  // every cluster lies within one blob; the hit-weighted blob means match the oracle
  Vec4 g_pos = Vec4::Zero(), g_neg = Vec4::Zero();
  for (const auto& c : r.clusters) {
    EXPECT_GT(std::abs(c.mean(0)), 9.0);
    (c.mean(0) > 0 ? g_pos : g_neg) += c.mean * static_cast<double>(c.hit_count) / 200.0;
  }
  EXPECT_LT((g_pos - m_pos).norm(), 1e-9);
  EXPECT_LT((g_neg - m_neg).norm(), 1e-9);
}

TEST(Gng, NodeCountBoundedAndQuantizationNonIncreasing) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Vec4> pts;
  for (int i = 0; i < 1000; ++i) pts.emplace_back(u(rng), u(rng), u(rng), u(rng));
  GngParams gp;
  gp.max_nodes = 8;
  gp.epochs = 10;
  const auto r = gng_train(pts, gp, rng);
  EXPECT_LE(static_cast<int>(r.nodes.size()), 8);
  EXPECT_LE(static_cast<int>(r.clusters.size()), 8);
  EXPECT_LE(r.epoch_quantization_error.back(), r.epoch_quantization_error.front());
}

TEST(Gng, RejectsBadParamsAndEmptyInput) {
  Rng rng(4);
  GngParams gp;
  gp.learning_rate = 0.0;
  std::vector<Vec4> pts(10, Vec4::Zero());
  EXPECT_THROW(gng_train(pts, gp, rng), ConfigError);
  EXPECT_THROW(gng_train(std::span<const Vec4>{}, GngParams{}, rng), Error);
}

TEST(AssignCluster, NearestAndTieToLowestId) {
  std::vector<DiscreteCluster> cs(2);
  cs[0].id = 0;
  cs[0].mean = Vec4(-1, 0, 0, 0);
  cs[1].id = 1;
  cs[1].mean = Vec4(1, 0, 0, 0);
  EXPECT_EQ(assign_cluster(Vec4(0.9, 0, 0, 0), cs), 1);
  EXPECT_EQ(assign_cluster(Vec4(-3, 0, 0, 0), cs), 0);
  EXPECT_EQ(assign_cluster(Vec4(0, 5, 0, 0), cs), 0);
}

TEST(Transitions, AlternatingSequenceWithoutSmoothing) {
  const std::vector<int> seq{0, 1, 0, 1, 0};
  const auto P = estimate_transitions(seq, 2, 0.0);
  Eigen::Matrix2d want;
  want << 0, 1, 1, 0;
  EXPECT_TRUE(P.isApprox(want));
}

TEST(Transitions, ConstantSequenceAndUnseenRow) {
  const std::vector<int> seq(10, 1);
  const auto P = estimate_transitions(seq, 3, 0.0);
  EXPECT_DOUBLE_EQ(P(1, 1), 1.0);
  for (int j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(P(0, j), 1.0 / 3.0);
}

TEST(Transitions, RowsStochasticWithSmoothing) {
  const std::vector<int> seq{0, 0, 2, 1, 0, 2};
  const auto P = estimate_transitions(seq, 3, 1.0);
  for (int r = 0; r < 3; ++r) EXPECT_NEAR(P.row(r).sum(), 1.0, 1e-12);
  EXPECT_TRUE((P.array() > 0).all());
}

TEST(Transitions, RecoversThreeStateChain) {
  Eigen::Matrix3d T;
  T << 0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4;
  Rng rng(5);
  std::vector<int> seq{0};
  for (int i = 0; i < 10000; ++i) {
    std::discrete_distribution<int> d({T(seq.back(), 0), T(seq.back(), 1), T(seq.back(), 2)});
    seq.push_back(d(rng));
  }
  const auto P = estimate_transitions(seq, 3, 0.0);
  EXPECT_LT((P - T).cwiseAbs().maxCoeff(), 0.05);
}

TEST(Transitions, SegmentedSplitsByPhase) {
  const std::vector<std::vector<int>> seqs{{0, 0, 0, 1, 1, 1}};
  const auto Ps = estimate_transitions(seqs, 2, 2, 0.0);
  ASSERT_EQ(Ps.size(), 2u);
  EXPECT_DOUBLE_EQ(Ps[0](0, 0), 1.0);
  EXPECT_DOUBLE_EQ(Ps[1](1, 1), 1.0);
}

TEST(Stationary, TwoStateClosedForm) {
  Eigen::Matrix2d P;
  P << 0.9, 0.1, 0.2, 0.8;
  const auto pi = stationary_distribution(P);
  EXPECT_NEAR(pi(0), 2.0 / 3.0, 1e-9);
  EXPECT_NEAR(pi(1), 1.0 / 3.0, 1e-9);
}

namespace {

SignalTrace noise_trace(Rng& rng, int len, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  SignalTrace tr;
  for (int t = 0; t < len; ++t) tr.samples.emplace_back(n(rng), n(rng));
  return tr;
}

SignalTrace bpsk_trace(Rng& rng, int len, double amp, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  std::bernoulli_distribution b(0.5);
  SignalTrace tr;
  for (int t = 0; t < len; ++t) tr.samples.emplace_back((b(rng) ? amp : -amp) + n(rng), n(rng));
  return tr;
}

// geometric relaxation toward `target`, as used for preferred trajectories
SignalTrace relax_trace(Rng& rng, const Vec2& start, const Vec2& target, int len, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  SignalTrace tr;
  Vec2 z = start;
  for (int t = 0; t < len; ++t) {
    tr.samples.push_back(z + Vec2(n(rng), n(rng)));
    z = target + 0.75 * (z - target);
  }
  return tr;
}

TrainingSet make_set(Rng& rng, int num_targets) {
  TrainingSet set;
  std::uniform_real_distribution<double> u(-1, 1);
  for (int i = 0; i < 20; ++i) {
    set.noise.push_back(noise_trace(rng, 20, 0.01));
    set.pu.push_back(bpsk_trace(rng, 20, 0.5, 0.01));
    const Vec2 target(0.2 + 0.6 * (i % num_targets) / std::max(1, num_targets - 1), 0.3);
    set.combined.push_back(relax_trace(rng, Vec2(u(rng), u(rng)), target, 20, 0.01));
  }
  return set;
}

}  // namespace

TEST(LearnVocabularies, NoiseIsCompactNearOrigin) {
  Rng rng(6);
  const auto set = make_set(rng, 1);
  const auto m = learn_vocabularies(set, {}, rng);
  EXPECT_GE(m.noise.num_clusters(), 1);
  EXPECT_LE(m.noise.num_clusters(), 3);
  for (const auto& c : m.noise.clusters) EXPECT_LT(c.mean.head<2>().norm(), 0.05);
}

TEST(LearnVocabularies, PuClustersSplitAlongInPhase) {
  Rng rng(7);
  const auto m = learn_vocabularies(make_set(rng, 1), {}, rng);
  bool pos = false, neg = false;
  for (const auto& c : m.pu.clusters) {
    pos |= c.mean(0) > 0.3;
    neg |= c.mean(0) < -0.3;
  }
  EXPECT_TRUE(pos && neg);
}

TEST(LearnVocabularies, RicherTargetsNeedAtLeastAsManyClusters) {
  Rng a(8), b(8);
  const auto m1 = learn_vocabularies(make_set(a, 1), {}, a);
  const auto m5 = learn_vocabularies(make_set(b, 5), {}, b);
  EXPECT_GE(m5.combined.num_clusters(), m1.combined.num_clusters());
}

TEST(LearnVocabularies, LearnedControlBeatsStaticPredictor) {
  Rng rng(9);
  const auto set = make_set(rng, 3);
  const auto m = learn_vocabularies(set, {}, rng);
  EXPECT_LE(mean_prediction_error(m.combined, set.combined, true),
            mean_prediction_error(m.combined, set.combined, false));
}

TEST(LearnVocabularies, StructureIsWellFormed) {
  Rng rng(10);
  LearningConfig cfg;
  cfg.tau_segments = 2;
  const auto m = learn_vocabularies(make_set(rng, 2), cfg, rng);
  for (const Vocabulary* v : {&m.noise, &m.pu, &m.combined}) {
    ASSERT_EQ(v->transitions.size(), 2u);
    EXPECT_EQ(v->dynamics.control.size(), v->clusters.size());
    for (const auto& P : v->transitions)
      for (int r = 0; r < P.rows(); ++r) EXPECT_NEAR(P.row(r).sum(), 1.0, 1e-12);
    EXPECT_GT(v->preferred.cov.determinant(), 0.0);
  }
}

TEST(LearnVocabularies, DeterministicForSeed) {
  Rng a(11), b(11);
  const auto ma = learn_vocabularies(make_set(a, 3), {}, a);
  const auto mb = learn_vocabularies(make_set(b, 3), {}, b);
  ASSERT_EQ(ma.combined.num_clusters(), mb.combined.num_clusters());
  for (int i = 0; i < ma.combined.num_clusters(); ++i)
    EXPECT_EQ(ma.combined.clusters[static_cast<std::size_t>(i)].mean, mb.combined.clusters[static_cast<std::size_t>(i)].mean);
}

TEST(LearnVocabularies, EmptyTracesRaiseConfigError) {
  Rng rng(12);
  TrainingSet set;
  EXPECT_THROW(learn_vocabularies(set, {}, rng), ConfigError);
}
