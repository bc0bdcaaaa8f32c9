#pragma once

// Comparison allocators: tabular Q-learning, OMA, random, round-robin greedy
// and an exhaustive oracle for tiny instances.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "cnuav/env.hpp"
#include "cnuav/error.hpp"
#include "cnuav/noma_phy.hpp"

namespace cnuav::baselines {

struct PowerGrid {
  std::vector<double> levels{5.0, 10.0, 15.0, 20.0};

  void validate(double p_max) const {
    require(!levels.empty(), "power_grid", "needs at least one level");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      require(levels[i] >= 0.0 && levels[i] <= p_max + 1e-12, "power_grid", "levels must lie in [0, p_max]");
      if (i > 0) require(levels[i] > levels[i - 1], "power_grid", "levels must be strictly increasing");
    }
  }
  int size() const { return static_cast<int>(levels.size()); }
};

class QTable {
 public:
  QTable(int states, int actions, double init = 0.0) : q_(Eigen::MatrixXd::Constant(states, actions, init)) {
    require(states >= 1 && actions >= 1, "qtable", "dimensions must be positive");
  }

  int states() const { return static_cast<int>(q_.rows()); }
  int actions() const { return static_cast<int>(q_.cols()); }
  double operator()(int s, int a) const { return q_(s, a); }
  const Eigen::MatrixXd& values() const { return q_; }

  /// Greedy action; ties go to the lowest index.
  int greedy(int s) const {
    int best = 0;
    for (int a = 1; a < actions(); ++a)
      if (q_(s, a) > q_(s, best)) best = a;
    return best;
  }

  int epsilon_greedy(int s, double eps, Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < eps) return std::uniform_int_distribution<int>(0, actions() - 1)(rng);
    return greedy(s);
  }

  void update(int s, int a, double reward, int s_next, double alpha, double gamma) {
    const double target = reward + gamma * q_.row(s_next).maxCoeff();
    q_(s, a) += alpha * (target - q_(s, a));
  }

 private:
  Eigen::MatrixXd q_;
};

struct QLearningConfig {
  double alpha = 0.1;
  double gamma = 0.9;
  double epsilon_start = 0.3;
  double epsilon_end = 0.01;
  int gain_buckets = 3;

  void validate() const {
    require(alpha > 0.0 && alpha <= 1.0, "q_alpha", "must lie in (0, 1]");
    require(gamma > 0.0 && gamma <= 1.0, "q_gamma", "must lie in (0, 1]");
    require(epsilon_start >= 0.0 && epsilon_start <= 1.0, "q_epsilon_start", "must lie in [0, 1]");
    require(epsilon_end >= 0.0 && epsilon_end <= 1.0, "q_epsilon_end", "must lie in [0, 1]");
    require(gain_buckets >= 1, "q_gain_buckets", "must be >= 1");
  }
};

/// Linear decay from start (first episode) to end (last episode).
inline double epsilon_at(int episode, int episodes, double start, double end) {
  if (episodes <= 1) return end;
  return start + (end - start) * static_cast<double>(episode) / (episodes - 1);
}

namespace detail {

/// Channel choices in SU order, with |U_k| <= M enforced first-come by gain rank.
inline std::vector<int> cap_assignment(const sim::Environment& env, std::vector<int> choice) {
  std::vector<int> load(static_cast<std::size_t>(env.num_channels()), 0);
  for (int n : env.by_gain()) {
    int& c = choice[static_cast<std::size_t>(n)];
    if (c < 0) continue;
    if (load[static_cast<std::size_t>(c)] >= env.config().max_per_channel)
      c = -1;
    else
      ++load[static_cast<std::size_t>(c)];
  }
  return choice;
}

inline sim::Projection build(const sim::Environment& env, const std::vector<int>& channel,
                             const std::vector<double>& power) {
  return env.project(sim::make_allocation(env.num_sus(), env.num_channels(), channel, power));
}

}  // namespace detail

struct QLearningResult {
  QTable table;
  std::vector<double> episode_sum_rate;  // mean per-slot sum rate, bit/s
};

/// One table shared by all SUs. State = (PU occupancy pattern, gain bucket of
/// the SU), action = (channel, grid power). Reward = sum rate / system bandwidth.
inline QLearningResult q_learning_allocate(sim::Environment& env, int episodes, const QLearningConfig& cfg,
                                           const PowerGrid& grid, Rng& rng) {
  cfg.validate();
  grid.validate(env.config().p_max);
  require(episodes >= 1, "episodes", "must be >= 1");
  const int K = env.num_channels();
  require(K <= 20, "num_subchannels", "too many channels for the occupancy-pattern state");
  const int states = (1 << K) * cfg.gain_buckets;
  const int actions = K * grid.size();
  QLearningResult res{QTable(states, actions), {}};
  const int N = env.num_sus();

  auto pattern = [&] {
    int s = 0;
    for (int k = 0; k < K; ++k)
      if (env.occupancy()[static_cast<std::size_t>(k)]) s |= 1 << k;
    return s;
  };

  for (int e = 0; e < episodes; ++e) {
    env.begin_episode();
    const auto rank = env.gain_ranks();
    auto state_of = [&](int n) {
      const int bucket = std::min(cfg.gain_buckets - 1, rank[static_cast<std::size_t>(n)] * cfg.gain_buckets / N);
      return pattern() * cfg.gain_buckets + bucket;
    };
    const double eps = epsilon_at(e, episodes, cfg.epsilon_start, cfg.epsilon_end);
    double total = 0.0;
    for (int t = 0; t < env.config().episode_length; ++t) {
      std::vector<int> s(static_cast<std::size_t>(N)), a(static_cast<std::size_t>(N)), ch(static_cast<std::size_t>(N));
      std::vector<double> pw(static_cast<std::size_t>(N));
      for (int n = 0; n < N; ++n) {
        const auto un = static_cast<std::size_t>(n);
        s[un] = state_of(n);
        a[un] = res.table.epsilon_greedy(s[un], eps, rng);
        ch[un] = a[un] / grid.size();
        pw[un] = grid.levels[static_cast<std::size_t>(a[un] % grid.size())];
      }
      const auto proj = detail::build(env, detail::cap_assignment(env, ch), pw);
      const double rate = env.rates(proj.allocation).sum_rate;
      total += rate;
      const double reward = rate / env.config().bandwidth_hz;
      env.step_slot();
      for (int n = 0; n < N; ++n)
        res.table.update(s[static_cast<std::size_t>(n)], a[static_cast<std::size_t>(n)], reward, state_of(n), cfg.alpha,
                         cfg.gamma);
    }
    res.episode_sum_rate.push_back(total / env.config().episode_length);
  }
  return res;
}

/// One SU per free channel, strongest first, at full power.
inline phy::Allocation oma_allocate(const sim::Environment& env, const PowerGrid& grid) {
  grid.validate(env.config().p_max);
  const auto free = env.free_channels();
  const auto order = env.by_gain();
  std::vector<int> ch(static_cast<std::size_t>(env.num_sus()), -1);
  std::vector<double> pw(static_cast<std::size_t>(env.num_sus()), 0.0);
  for (std::size_t i = 0; i < free.size() && i < order.size(); ++i) {
    ch[static_cast<std::size_t>(order[i])] = free[i];
    pw[static_cast<std::size_t>(order[i])] = grid.levels.back();
  }
  return detail::build(env, ch, pw).allocation;
}

/// Uniform channel (or idle) and grid power per SU, capped and projected.
inline phy::Allocation random_allocate(const sim::Environment& env, const PowerGrid& grid, Rng& rng) {
  grid.validate(env.config().p_max);
  std::uniform_int_distribution<int> pick_ch(-1, env.num_channels() - 1);
  std::uniform_int_distribution<int> pick_p(0, grid.size() - 1);
  std::vector<int> ch(static_cast<std::size_t>(env.num_sus()));
  std::vector<double> pw(ch.size());
  for (std::size_t n = 0; n < ch.size(); ++n) {
    ch[n] = pick_ch(rng);
    pw[n] = grid.levels[static_cast<std::size_t>(pick_p(rng))];
  }
  return detail::build(env, detail::cap_assignment(env, ch), pw).allocation;
}

/// Round-robin by gain rank over the free channels, M per channel, every
/// active SU at `power` (full power by default), then projected. Strong SUs
/// land on distinct channels as the top SIC layers.
inline phy::Allocation greedy_allocate(const sim::Environment& env, double power = -1.0) {
  const double p = power < 0.0 ? env.config().p_max : power;
  const auto free = env.free_channels();
  std::vector<int> ch(static_cast<std::size_t>(env.num_sus()), -1);
  std::vector<double> pw(ch.size(), p);
  if (!free.empty()) {
    const auto order = env.by_gain();
    const std::size_t slots = free.size() * static_cast<std::size_t>(env.config().max_per_channel);
    for (std::size_t i = 0; i < order.size() && i < slots; ++i)
      ch[static_cast<std::size_t>(order[i])] = free[i % free.size()];
  }
  return detail::build(env, ch, pw).allocation;
}

struct OracleResult {
  phy::Allocation best;
  std::vector<int> assignment;  // per SU channel, -1 idle
  std::vector<double> grid_power;
  double sum_rate = 0.0;
  long evaluated = 0;
};

/// Enumerates every (assignment, grid power) pair, keeps the feasible ones
/// and returns the goodput maximiser. Ties keep the lexicographically smallest
/// assignment (idle < channel 0 < ...) and, within it, the highest powers.
inline OracleResult exhaustive_oracle(const sim::Environment& env, const PowerGrid& grid, double limit = 1e7) {
  grid.validate(env.config().p_max);
  const int N = env.num_sus(), K = env.num_channels(), G = grid.size();
  const double size = std::pow(K + 1.0, N) * std::pow(static_cast<double>(G), N);
  if (size > limit) {
    char approx[32];
    std::snprintf(approx, sizeof approx, "%.3g", size);
    throw ConfigError("oracle", "instance too large: (K+1)^N * G^N = " + std::to_string(K + 1) + "^" +
                                    std::to_string(N) + " * " + std::to_string(G) + "^" + std::to_string(N) +
                                    " ~ " + approx + " combinations exceeds " +
                                    std::to_string(static_cast<long long>(limit)));
  }
  OracleResult best;
  best.sum_rate = -1.0;
  std::vector<int> assign(static_cast<std::size_t>(N), -1);
  const auto lim = env.limits();
  for (;;) {
    std::vector<int> load(static_cast<std::size_t>(K), 0);
    bool ok = true;
    std::vector<int> active;
    for (int n = 0; n < N; ++n)
      if (assign[static_cast<std::size_t>(n)] >= 0) {
        ok = ok && ++load[static_cast<std::size_t>(assign[static_cast<std::size_t>(n)])] <= lim.max_per_channel;
        active.push_back(n);
      }
    if (ok) {
      std::vector<int> level(active.size(), G - 1);
      for (;;) {
        std::vector<double> pw(static_cast<std::size_t>(N), 0.0);
        for (std::size_t i = 0; i < active.size(); ++i)
          pw[static_cast<std::size_t>(active[i])] = grid.levels[static_cast<std::size_t>(level[i])];
        const auto proj = detail::build(env, assign, pw);
        ++best.evaluated;
        if (env.feasible(proj)) {
          const double r = env.rates(proj.allocation).sum_rate;
          if (r > best.sum_rate * (1.0 + 1e-12) + 1e-12) {
            best.sum_rate = r;
            best.best = proj.allocation;
            best.assignment = assign;
            best.grid_power = pw;
          }
        }
        std::size_t i = 0;
        while (i < level.size() && level[i] == 0) level[i++] = G - 1;
        if (i == level.size()) break;
        --level[i];
      }
    }
    // next assignment in lexicographic order (last SU varies fastest)
    int n = N - 1;
    while (n >= 0 && assign[static_cast<std::size_t>(n)] == K - 1) assign[static_cast<std::size_t>(n--)] = -1;
    if (n < 0) break;
    ++assign[static_cast<std::size_t>(n)];
  }
  if (best.sum_rate < 0.0) {
    best.sum_rate = 0.0;
    best.best = phy::Allocation::empty(N, K);
    best.assignment.assign(static_cast<std::size_t>(N), -1);
    best.grid_power.assign(static_cast<std::size_t>(N), 0.0);
  }
  return best;
}

}  // namespace cnuav::baselines
