#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "cnuav/agent.hpp"

using namespace cnuav;
using namespace cnuav::agent;

namespace {

std::vector<double> forecast_of(const sim::Environment& env) {
  std::vector<double> f;
  for (int k = 0; k < env.num_channels(); ++k) f.push_back(env.pu().forecast(k));
  return f;
}

gdbn::Models train(const sim::Environment& env, const AgentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const auto set = make_training_set(env, cfg, rng);
  gdbn::LearningConfig lc;
  lc.gng.epochs = 5;
  return gdbn::learn_vocabularies(set, lc, rng);
}

}  // namespace

TEST(InitPolicy, UniformRowsAndInitialPower) {
  const auto t = init_policy(6, 20, 2.0);
  EXPECT_TRUE(t.channel[0].isApprox(Eigen::MatrixXd::Constant(20, 6, 1.0 / 6.0)));
  for (int r = 0; r < 20; ++r) EXPECT_DOUBLE_EQ(t.power(0, r), 2.0);
  const auto one = init_policy(1, 3, 5.0);
  EXPECT_TRUE(one.channel[0].isApprox(Eigen::MatrixXd::Ones(3, 1)));
  EXPECT_EQ(init_policy(4, 2, 1.0, 20.0, 3).segments(), 3);
}

TEST(InitPolicy, RejectsBadShape) {
  EXPECT_THROW(init_policy(0, 20, 2.0), ConfigError);
  EXPECT_THROW(init_policy(6, 20, 30.0), ConfigError);
}

TEST(SelectActions, NeverUsesOccupiedChannels) {
  sim::Environment env({}, 1);
  const auto t = init_policy(6, 20, 2.0);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto a = select_actions(t, 0, forecast_of(env), env, {}, rng);
    for (int c : a.channel) EXPECT_TRUE(c == -1 || c >= 3);
  }
}

TEST(SelectActions, RespectsPerChannelCap) {
  sim::Environment env({}, 3);
  const auto t = init_policy(6, 20, 2.0);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto a = select_actions(t, 0, forecast_of(env), env, {}, rng);
    std::map<int, int> load;
    for (int c : a.channel)
      if (c >= 0) ++load[c];
    int active = 0;
    for (auto [k, n] : load) {
      EXPECT_LE(n, 5);
      active += n;
    }
    EXPECT_EQ(active, 15);
    EXPECT_TRUE(phy::check_constraints(a.projection.allocation, env.limits()).feasible);
  }
}

TEST(SelectActions, UniformRowSamplesUniformly) {
  sim::EnvConfig c;
  c.num_sus = 1;
  c.pu_channels = {};
  sim::Environment env(c, 5);
  const auto t = init_policy(6, 1, 2.0);
  Rng rng(6);
  std::vector<int> hits(6, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++hits[static_cast<std::size_t>(select_actions(t, 0, forecast_of(env), env, {}, rng).channel[0])];
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(draws), 1.0 / 6.0, 0.02);
}

TEST(SelectActions, AllOccupiedMeansIdle) {
  sim::EnvConfig c;
  c.pu_channels = {0, 1, 2, 3, 4, 5};
  sim::Environment env(c, 7);
  Rng rng(8);
  const auto a = select_actions(init_policy(6, 20, 2.0), 0, forecast_of(env), env, {}, rng);
  EXPECT_TRUE(a.all_idle);
  EXPECT_EQ(a.projection.allocation.power.sum(), 0.0);
}

TEST(PredictedActions, UniformRowsSpreadAcrossChannels) {
  sim::Environment env({}, 9);
  const auto a = predicted_actions(init_policy(6, 20, 2.0), 0, env.free_channels(), env);
  const auto order = env.by_gain();
  std::set<int> top;
  for (int r = 0; r < 3; ++r) top.insert(a.channel[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])]);
  EXPECT_EQ(top, (std::set<int>{3, 4, 5}));
}

TEST(ActionError, Examples) {
  const Eigen::VectorXd pi = Eigen::VectorXd::Constant(6, 1.0 / 6.0);
  EXPECT_EQ(action_error(pi, pi), Eigen::VectorXd::Zero(6));
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(6);
  lambda(2) = 1.0;
  const auto e = action_error(pi, lambda);
  EXPECT_NEAR(e(2), 1.0 - 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(e.sum(), 0.0, 1e-15);
  EXPECT_THROW(action_error(pi, Eigen::VectorXd::Zero(3)), Error);
}

TEST(UpdatePolicy, ZeroErrorLeavesRowUnchanged) {
  auto t = init_policy(6, 4, 2.0);
  const auto before = t.channel[0];
  update_policy(t, 0, 1, {0, 1, 2, 3, 4, 5}, Eigen::VectorXd::Zero(6), 0.1);
  EXPECT_EQ(t.channel[0], before);
}

TEST(UpdatePolicy, RepeatedPositiveErrorConcentratesMonotonically) {
  auto t = init_policy(6, 4, 2.0);
  const std::vector<int> adm{0, 1, 2, 3, 4, 5};
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(6);
  lambda(4) = 1.0;
  double prev = t.channel[0](2, 4);
  for (int i = 0; i < 200; ++i) {
    const Eigen::VectorXd pi = t.channel[0].row(2).transpose();
    update_policy(t, 0, 2, adm, action_error(pi, lambda), 0.1);
    EXPECT_GE(t.channel[0](2, 4), prev);
    EXPECT_NEAR(t.channel[0].row(2).sum(), 1.0, 1e-12);
    EXPECT_TRUE((t.channel[0].row(2).array() >= 0.0).all());
    prev = t.channel[0](2, 4);
  }
  EXPECT_GT(prev, 0.999);
  EXPECT_DOUBLE_EQ(t.channel[0](0, 0), 1.0 / 6.0);
}

TEST(UpdatePower, StaysWithinBudget) {
  auto t = init_policy(3, 2, 2.0, 20.0);
  for (int i = 0; i < 100; ++i) update_power(t, 0, 0, -1.0, 0.5, 5.0);
  EXPECT_DOUBLE_EQ(t.power(0, 0), 20.0);
  for (int i = 0; i < 100; ++i) update_power(t, 0, 1, 1.0, 0.5, 5.0);
  EXPECT_DOUBLE_EQ(t.power(0, 1), 0.0);
}

TEST(TrainingSet, CombinedTracesRelaxToFullPowerLayout) {
  sim::Environment env({}, 10);
  AgentConfig cfg;
  cfg.training_traces = 3;
  Rng rng(11);
  const auto set = make_training_set(env, cfg, rng);
  EXPECT_EQ(set.noise.size(), 3u);
  EXPECT_EQ(set.combined.size(), 9u);
  const auto target = baselines::greedy_allocate(env);
  const auto zs = env.su_feature(target, env.rates(target), 3);
  EXPECT_LT((set.combined[0].samples.back() - zs).norm(), 0.06);
}

TEST(Agent, SameSeedSameTrace) {
  sim::EnvConfig c;
  c.episode_length = 5;
  sim::Environment e1(c, 12), e2(c, 12);
  AgentConfig cfg;
  cfg.training_traces = 5;
  cfg.num_particles = 20;
  const auto models = train(e1, cfg, 13);
  Agent a(models, cfg, e1, 14), b(models, cfg, e2, 14);
  for (int ep = 0; ep < 3; ++ep) {
    const auto x = a.run_episode(e1), y = b.run_episode(e2);
    EXPECT_EQ(x.cum_abnormality, y.cum_abnormality);
    EXPECT_EQ(x.mean_sum_rate, y.mean_sum_rate);
    EXPECT_EQ(x.mean_inphase_error, y.mean_inphase_error);
  }
  EXPECT_EQ(a.episodes_run(), 3);
  EXPECT_EQ(a.tables().channel[0], b.tables().channel[0]);
}

TEST(Agent, EverySlotRespectsConstraints) {
  sim::EnvConfig c;
  c.episode_length = 6;
  sim::Environment env(c, 15);
  AgentConfig cfg;
  cfg.training_traces = 5;
  cfg.num_particles = 20;
  Agent ag(train(env, cfg, 16), cfg, env, 17);
  for (int ep = 0; ep < 4; ++ep) {
    const auto tr = ag.run_episode(env);
    ASSERT_EQ(tr.slots.size(), 6u);
    for (const auto& s : tr.slots) {
      std::map<int, int> load;
      for (std::size_t n = 0; n < s.channel.size(); ++n) {
        EXPECT_LE(s.power[n], 20.0 + 1e-12);
        if (s.channel[n] >= 0) ++load[s.channel[n]];
        EXPECT_NE(s.channel[n], 0);
      }
      for (auto [k, m] : load) EXPECT_LE(m, 5);
      EXPECT_TRUE(s.ladder_feasible);
      EXPECT_GE(s.sum_rate, 0.0);
      EXPECT_GE(s.total_abnormality, 0.0);
    }
  }
}

TEST(Agent, TinyInstanceSeparatesUsersLikeTheOracle) {
  sim::EnvConfig c;
  c.num_sus = 2;
  c.num_subchannels = 2;
  c.max_per_channel = 1;
  c.pu_channels = {};
  c.episode_length = 10;
  radio::GainMatrix g(2, 2);
  g << 2e-10, 2e-10, 5e-11, 5e-11;
  sim::Environment env(c, g, 18);
  const auto best = baselines::exhaustive_oracle(env, baselines::PowerGrid{{10.0, 20.0}});
  EXPECT_NE(best.assignment[0], best.assignment[1]);
  AgentConfig cfg;
  cfg.training_traces = 10;
  cfg.num_particles = 30;
  Agent ag(train(env, cfg, 19), cfg, env, 20);
  EpisodeTrace last;
  for (int ep = 0; ep < 40; ++ep) last = ag.run_episode(env);
  EXPECT_GE(last.mean_sum_rate, 0.9 * best.sum_rate);
}
