#pragma once

// Active-inference decision layer: policy tables over gain-rank states,
// PU-skipping channel sampling, power adjustment from generalized errors and
// the per-slot perception/action loop.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "cnuav/baselines.hpp"
#include "cnuav/env.hpp"
#include "cnuav/error.hpp"
#include "cnuav/gdbn.hpp"
#include "cnuav/mjpf.hpp"

namespace cnuav::agent {

struct AgentConfig {
  double initial_power = 2.0;       // A0, watts
  double pu_skip_threshold = 0.5;
  double step_size = 0.1;
  bool harmonic_decay = true;
  double temperature = 0.05;        // lambda(A) softmax temperature
  double power_gain = 2.0;          // scales the power-directed error into watts
  int num_particles = 100;
  int tau_segments = 1;
  mjpf::Combiner combiner = mjpf::Combiner::Sum;
  // offline preferred trajectories
  int training_traces = 30;
  double relax_rate = 0.75;

  void validate(double p_max) const {
    require(initial_power > 0.0 && initial_power <= p_max, "initial_power", "must lie in (0, p_max]");
    require(pu_skip_threshold > 0.0 && pu_skip_threshold <= 1.0, "pu_skip_threshold", "must lie in (0, 1]");
    require(step_size > 0.0 && step_size <= 1.0, "step_size", "must lie in (0, 1]");
    require(temperature > 0.0, "temperature", "must be positive");
    require(power_gain >= 0.0, "power_gain", "must be non-negative");
    require(num_particles >= 1, "num_particles", "must be >= 1");
    require(tau_segments >= 1, "tau_segments", "must be >= 1");
    require(training_traces >= 1, "training_traces", "must be >= 1");
    require(relax_rate >= 0.0 && relax_rate < 1.0, "relax_rate", "must lie in [0, 1)");
  }
};

struct ActionSpace {
  int num_channels = 6;
  int num_sus = 20;
  double p_max = 20.0;

  void validate() const {
    require(num_channels >= 1, "num_subchannels", "must be >= 1");
    require(num_sus >= 1, "num_sus", "must be >= 1");
    require(p_max > 0.0, "p_max", "must be positive");
  }
  bool contains_power(double p) const { return p >= 0.0 && p <= p_max; }
};

/// Rows are indexed by SU gain rank (0 = strongest); one table per tau segment.
struct PolicyTables {
  std::vector<Eigen::MatrixXd> channel;       // N x K probabilities
  std::vector<Eigen::VectorXd> power_offset;  // N, added to base_power
  double base_power = 1.0;
  double p_max = 20.0;

  int segments() const { return static_cast<int>(channel.size()); }
  double power(int segment, int rank) const {
    return std::clamp(base_power + power_offset[static_cast<std::size_t>(segment)](rank), 0.0, p_max);
  }
};

inline PolicyTables init_policy(int K, int N, double A0, double p_max = 20.0, int segments = 1) {
  require(K >= 1, "num_subchannels", "must be >= 1");
  require(N >= 1, "num_sus", "must be >= 1");
  require(A0 >= 0.0 && A0 <= p_max, "initial_power", "must lie in [0, p_max]");
  require(segments >= 1, "tau_segments", "must be >= 1");
  PolicyTables t;
  t.channel.assign(static_cast<std::size_t>(segments), Eigen::MatrixXd::Constant(N, K, 1.0 / K));
  t.power_offset.assign(static_cast<std::size_t>(segments), Eigen::VectorXd::Zero(N));
  t.base_power = A0;
  t.p_max = p_max;
  return t;
}

struct Action {
  std::vector<int> channel;   // per SU, -1 idle
  std::vector<double> power;  // requested (pre-projection)
  sim::Projection projection;
  std::vector<int> admissible;
  bool all_idle = false;      // no admissible channel this slot
};

namespace detail {

inline Eigen::VectorXd restrict(const Eigen::RowVectorXd& row, const std::vector<int>& admissible) {
  Eigen::VectorXd p(static_cast<long>(admissible.size()));
  for (std::size_t i = 0; i < admissible.size(); ++i) p(static_cast<long>(i)) = std::max(0.0, row(admissible[i]));
  const double s = p.sum();
  if (s > 0.0) return p / s;
  return Eigen::VectorXd::Constant(p.size(), 1.0 / static_cast<double>(p.size()));
}

}  // namespace detail

/// Samples one channel per SU (strongest first) from its policy row over the
/// channels whose PU forecast is below the skip threshold. A full channel
/// (|U_k| = M) sends the SU to its next most likely channel, else idle.
inline Action select_actions(const PolicyTables& tables, int segment, const std::vector<double>& pu_forecast,
                             const sim::Environment& env, const AgentConfig& cfg, Rng& rng) {
  const int N = env.num_sus(), K = env.num_channels(), M = env.config().max_per_channel;
  Action act;
  act.channel.assign(static_cast<std::size_t>(N), -1);
  act.power.assign(static_cast<std::size_t>(N), 0.0);
  for (int k = 0; k < K; ++k)
    if (pu_forecast[static_cast<std::size_t>(k)] < cfg.pu_skip_threshold) act.admissible.push_back(k);
  const auto order = env.by_gain();
  if (act.admissible.empty()) {
    act.all_idle = true;
    act.projection = env.project(phy::Allocation::empty(N, K));
    return act;
  }
  std::vector<int> load(static_cast<std::size_t>(K), 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rank = 0; rank < N; ++rank) {
    const int n = order[static_cast<std::size_t>(rank)];
    const auto p = detail::restrict(tables.channel[static_cast<std::size_t>(segment)].row(rank), act.admissible);
    double x = u(rng);
    std::size_t pick = 0;
    while (pick + 1 < act.admissible.size() && x >= p(static_cast<long>(pick))) x -= p(static_cast<long>(pick++));
    int c = act.admissible[pick];
    if (load[static_cast<std::size_t>(c)] >= M) {
      c = -1;
      double best = -1.0;
      for (std::size_t i = 0; i < act.admissible.size(); ++i) {
        const int k = act.admissible[i];
        if (load[static_cast<std::size_t>(k)] < M && p(static_cast<long>(i)) > best) {
          best = p(static_cast<long>(i));
          c = k;
        }
      }
    }
    if (c < 0) continue;
    ++load[static_cast<std::size_t>(c)];
    act.channel[static_cast<std::size_t>(n)] = c;
    act.power[static_cast<std::size_t>(n)] = tables.power(segment, rank);
  }
  act.projection = env.project(sim::make_allocation(N, K, act.channel, act.power));
  if (!phy::check_constraints(act.projection.allocation, env.limits()).feasible)
    throw ModelError("select_actions: projected allocation violates the constraint set");
  return act;
}

/// The policy's predicted joint action: every SU (strongest first) on its most
/// likely admissible channel, ties to the least loaded then lowest index,
/// overflow as in select_actions. Used as the context for counterfactual
/// evaluation.
inline Action predicted_actions(const PolicyTables& tables, int segment, const std::vector<int>& admissible,
                                const sim::Environment& env) {
  const int N = env.num_sus(), K = env.num_channels(), M = env.config().max_per_channel;
  Action act;
  act.channel.assign(static_cast<std::size_t>(N), -1);
  act.power.assign(static_cast<std::size_t>(N), 0.0);
  act.admissible = admissible;
  act.all_idle = admissible.empty();
  if (act.all_idle) return act;
  std::vector<int> load(static_cast<std::size_t>(K), 0);
  const auto order = env.by_gain();
  for (int rank = 0; rank < N; ++rank) {
    const auto p = detail::restrict(tables.channel[static_cast<std::size_t>(segment)].row(rank), admissible);
    int c = -1;
    double best = -1.0;
    for (std::size_t i = 0; i < admissible.size(); ++i) {
      const int k = admissible[i];
      const double pk = p(static_cast<long>(i));
      if (load[static_cast<std::size_t>(k)] >= M) continue;
      if (pk > best || (pk == best && load[static_cast<std::size_t>(k)] < load[static_cast<std::size_t>(c)])) {
        best = pk;
        c = k;
      }
    }
    if (c < 0) continue;
    ++load[static_cast<std::size_t>(c)];
    const auto n = static_cast<std::size_t>(order[static_cast<std::size_t>(rank)]);
    act.channel[n] = c;
    act.power[n] = tables.power(segment, rank);
  }
  return act;
}

/// Generalized action error lambda(A) - pi(A).
inline Eigen::VectorXd action_error(const Eigen::VectorXd& pi, const Eigen::VectorXd& lambda) {
  if (pi.size() != lambda.size()) throw Error("action_error: message sizes differ");
  return lambda - pi;
}

/// row <- normalize(max(0, row + step * error)); an all-zero result keeps the old row.
inline void update_policy(PolicyTables& t, int segment, int rank, const std::vector<int>& channels,
                          const Eigen::VectorXd& error, double step) {
  require(step > 0.0 && step <= 1.0, "step_size", "must lie in (0, 1]");
  auto row = t.channel[static_cast<std::size_t>(segment)].row(rank);
  Eigen::RowVectorXd next = row;
  for (std::size_t i = 0; i < channels.size(); ++i)
    next(channels[i]) = std::max(0.0, next(channels[i]) + step * error(static_cast<long>(i)));
  const double s = next.sum();
  if (s > 0.0) row = next / s;
}

/// Power-directed update: offset -= step * gain * GE * p_max, clipped so the
/// resulting power stays in [0, p_max].
inline void update_power(PolicyTables& t, int segment, int rank, double power_error, double step, double gain) {
  auto& off = t.power_offset[static_cast<std::size_t>(segment)](rank);
  off -= step * gain * power_error * t.p_max;
  off = std::clamp(off, -t.base_power, t.p_max - t.base_power);
}

// ---------------------------------------------------------------------------

/// Offline traces: receiver noise, PU BPSK bursts and, for the combined
/// entity, trajectories that relax from a random start allocation to the
/// round-robin full-power allocation.
inline gdbn::TrainingSet make_training_set(const sim::Environment& env, const AgentConfig& cfg, Rng& rng) {
  const int T = env.config().episode_length;
  const double sd = env.config().observation_noise_std;
  std::normal_distribution<double> noise(0.0, sd);
  std::bernoulli_distribution bit(0.5);
  gdbn::TrainingSet set;
  const auto free = env.free_channels();
  const auto target = baselines::greedy_allocate(env);
  const auto target_rates = env.rates(target);
  const int N = env.num_sus();
  for (int i = 0; i < cfg.training_traces; ++i) {
    gdbn::SignalTrace nz, pu;
    for (int t = 0; t < T; ++t) {
      nz.samples.emplace_back(noise(rng), noise(rng));
      pu.samples.emplace_back((bit(rng) ? 1.0 : -1.0) * env.pu_level() + noise(rng), noise(rng));
    }
    set.noise.push_back(std::move(nz));
    set.pu.push_back(std::move(pu));
    if (free.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, free.size() - 1);
    std::vector<int> ch(static_cast<std::size_t>(N));
    for (auto& c : ch) c = free[pick(rng)];
    ch = baselines::detail::cap_assignment(env, ch);
    const std::vector<double> pw(static_cast<std::size_t>(N), cfg.initial_power);
    const auto start = baselines::detail::build(env, ch, pw).allocation;
    const auto start_rates = env.rates(start);
    for (int k : free) {
      const gdbn::Vec2 z0 = env.su_feature(start, start_rates, k);
      const gdbn::Vec2 zs = env.su_feature(target, target_rates, k);
      gdbn::SignalTrace tr;
      for (int t = 0; t < T; ++t)
        tr.samples.push_back(zs + std::pow(cfg.relax_rate, t) * (z0 - zs) + gdbn::Vec2(noise(rng), noise(rng)));
      set.combined.push_back(std::move(tr));
    }
  }
  if (set.combined.empty()) {
    gdbn::SignalTrace tr;
    for (int t = 0; t < T; ++t) tr.samples.emplace_back(noise(rng), noise(rng));
    set.combined.push_back(std::move(tr));
  }
  return set;
}

struct SlotRecord {
  std::vector<int> channel;
  std::vector<double> power;           // after projection
  std::vector<double> abnormality;     // per channel, combined
  std::vector<double> action_error;    // per SU rank, L1 norm of lambda - pi
  std::vector<double> su_rate;         // bit/s
  double total_abnormality = 0.0;
  double inphase_error = 0.0;          // mean |I_obs - I_pred| over SU channels
  double sum_rate = 0.0;               // bit/s
  bool ladder_feasible = true;
  bool all_idle = false;
};

struct EpisodeTrace {
  std::vector<SlotRecord> slots;
  double cum_abnormality = 0.0;    // sum over slots
  double mean_sum_rate = 0.0;      // bit/s, mean over slots
  double mean_inphase_error = 0.0;
};

namespace detail {

inline gdbn::Entity role(const sim::Environment& env, const phy::Allocation& a, int k) {
  if (env.occupancy()[static_cast<std::size_t>(k)]) return gdbn::Entity::Pu;
  return a.members(k).empty() ? gdbn::Entity::Noise : gdbn::Entity::Combined;
}

inline mjpf::Gaussian obs_gaussian(const gdbn::Vec2& z, const gdbn::Mat2& R) { return {z, R}; }

}  // namespace detail

/// Perception/action state carried across episodes.
class Agent {
 public:
  Agent(const gdbn::Models& models, const AgentConfig& cfg, const sim::Environment& env, std::uint64_t seed)
      : models_(models), cfg_(cfg), rng_(seed) {
    cfg_.validate(env.config().p_max);
    tables_ = init_policy(env.num_channels(), env.num_sus(), cfg_.initial_power, env.config().p_max, cfg_.tau_segments);
  }

  const PolicyTables& tables() const { return tables_; }
  PolicyTables& tables() { return tables_; }
  int episodes_run() const { return episode_; }

  EpisodeTrace run_episode(sim::Environment& env) {
    const int N = env.num_sus(), K = env.num_channels(), T = env.config().episode_length;
    const double step = cfg_.harmonic_decay ? cfg_.step_size / (1.0 + episode_) : cfg_.step_size;
    env.begin_episode();
    beliefs_.assign(static_cast<std::size_t>(K), {});
    roles_.assign(static_cast<std::size_t>(K), gdbn::Entity::Noise);
    fresh_.assign(static_cast<std::size_t>(K), true);
    const auto order = env.by_gain();
    const auto rank = env.gain_ranks();
    const auto& target = models_.combined.preferred;
    const gdbn::Mat2 R = models_.combined.dynamics.R;

    EpisodeTrace tr;
    for (int t = 0; t < T; ++t) {
      if (t > 0) env.step_slot();
      const int seg = gdbn::segment_of(t, T, tables_.segments());
      std::vector<double> forecast(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) forecast[static_cast<std::size_t>(k)] = env.pu().forecast(k);
      const Action act = select_actions(tables_, seg, forecast, env, cfg_, rng_);
      const auto& alloc = act.projection.allocation;
      const auto rates = env.rates(alloc);

      SlotRecord rec;
      rec.channel = act.channel;
      rec.su_rate.resize(static_cast<std::size_t>(N));
      rec.power.resize(static_cast<std::size_t>(N));
      for (int n = 0; n < N; ++n) {
        rec.su_rate[static_cast<std::size_t>(n)] = rates.per_user_rates.row(n).sum();
        rec.power[static_cast<std::size_t>(n)] = alloc.power.row(n).sum();
      }
      rec.sum_rate = rates.sum_rate;
      rec.ladder_feasible = act.projection.ladder_feasible;
      rec.all_idle = act.all_idle;

      // perception: one filter per subchannel
      rec.abnormality.assign(static_cast<std::size_t>(K), 0.0);
      std::vector<gdbn::Vec2> z(static_cast<std::size_t>(K));
      int su_channels = 0;
      for (int k = 0; k < K; ++k) {
        const auto uk = static_cast<std::size_t>(k);
        z[uk] = env.observe(alloc, rates, k, rng_);
        const auto r = detail::role(env, alloc, k);
        const auto& vocab = models_.get(r);
        if (fresh_[uk] || r != roles_[uk]) {
          beliefs_[uk] = init_belief_at_prior(vocab);
          roles_[uk] = r;
          fresh_[uk] = false;
        }
        const auto res = mjpf::belief_update(beliefs_[uk], z[uk], vocab, seg, rng_);
        beliefs_[uk] = res.belief;
        rec.abnormality[uk] = mjpf::combine(res.continuous, res.discrete, cfg_.combiner);
        rec.total_abnormality += rec.abnormality[uk];
        if (r == gdbn::Entity::Combined) {
          rec.inphase_error += std::abs(z[uk](0) - res.messages.pi_x_obs.mean(0));
          ++su_channels;
        }
      }
      if (su_channels > 0) rec.inphase_error /= su_channels;

      // action: lambda(A) from the counterfactual abnormality of each candidate
      // channel, evaluated against the predicted joint action; stronger SUs
      // update first so weaker ones respond to their new choice.
      rec.action_error.assign(static_cast<std::size_t>(N), 0.0);
      if (!act.all_idle) {
        const auto& adm = act.admissible;
        for (int r = 0; r < N; ++r) {
          const int n = order[static_cast<std::size_t>(r)];
          const Action ctx = predicted_actions(tables_, seg, adm, env);
          Eigen::VectorXd score(static_cast<long>(adm.size()));
          for (std::size_t i = 0; i < adm.size(); ++i)
            score(static_cast<long>(i)) = counterfactual_abnormality(env, ctx, n, adm[i], target, R, seg);
          Eigen::VectorXd lambda = (-(score.array() - score.minCoeff()) / cfg_.temperature).exp();
          lambda /= lambda.sum();
          const Eigen::VectorXd pi = detail::restrict(tables_.channel[static_cast<std::size_t>(seg)].row(r), adm);
          const Eigen::VectorXd err = action_error(pi, lambda);
          rec.action_error[static_cast<std::size_t>(r)] = err.cwiseAbs().sum();
          update_policy(tables_, seg, r, adm, err, step);
        }
        // power: compare each used channel's observed level with its level at full power
        for (int k : adm) {
          const auto mem = alloc.members(k);
          if (mem.empty()) continue;
          const double ge = z[static_cast<std::size_t>(k)].norm() - preferred_level(env, act, k);
          for (int n : mem) update_power(tables_, seg, rank[static_cast<std::size_t>(n)], ge, step, cfg_.power_gain);
        }
      }
      tr.cum_abnormality += rec.total_abnormality;
      tr.mean_sum_rate += rec.sum_rate / T;
      tr.mean_inphase_error += rec.inphase_error / T;
      tr.slots.push_back(std::move(rec));
    }
    ++episode_;
    return tr;
  }

 private:
  mjpf::BeliefState init_belief_at_prior(const gdbn::Vocabulary& v) {
    gdbn::Vec4 mean = gdbn::Vec4::Zero();
    mean.head<2>() = v.preferred.mean;
    gdbn::Mat4 cov = v.dynamics.Q;
    cov.topLeftCorner<2, 2>() += v.preferred.cov;
    return mjpf::init_belief(cfg_.num_particles, mean, cov, gdbn::stationary_distribution(v.transition(0)), rng_);
  }

  /// Sum over admissible channels of the abnormality between the preferred
  /// observation prior and the predicted feature if SU n moved to channel c.
  double counterfactual_abnormality(const sim::Environment& env, const Action& act, int n, int c,
                                    const gdbn::Gaussian2& target, const gdbn::Mat2& R, int seg) const {
    std::vector<int> ch = act.channel;
    std::vector<double> pw = act.power;
    const int M = env.config().max_per_channel;
    if (ch[static_cast<std::size_t>(n)] != c) {
      int count = 0, weakest = -1;
      for (int m = 0; m < env.num_sus(); ++m)
        if (ch[static_cast<std::size_t>(m)] == c) {
          ++count;
          if (weakest < 0 || env.gains()(m, c) < env.gains()(weakest, c)) weakest = m;
        }
      if (count >= M) ch[static_cast<std::size_t>(weakest)] = -1;
      ch[static_cast<std::size_t>(n)] = c;
      pw[static_cast<std::size_t>(n)] = tables_.power(seg, env.gain_ranks()[static_cast<std::size_t>(n)]);
    }
    const auto alloc = env.project(sim::make_allocation(env.num_sus(), env.num_channels(), ch, pw)).allocation;
    const auto rates = env.rates(alloc);
    const mjpf::Gaussian pref{target.mean, target.cov};
    double total = 0.0;
    for (int k : act.admissible)
      total += mjpf::abnormality(pref, detail::obs_gaussian(env.su_feature(alloc, rates, k), R));
    return total;
  }

  /// |feature| of channel k with the current members all at full power.
  double preferred_level(const sim::Environment& env, const Action& act, int k) const {
    std::vector<int> ch(static_cast<std::size_t>(env.num_sus()), -1);
    for (int m : act.projection.allocation.members(k)) ch[static_cast<std::size_t>(m)] = k;
    const std::vector<double> pw(ch.size(), env.config().p_max);
    const auto alloc = env.project(sim::make_allocation(env.num_sus(), env.num_channels(), ch, pw)).allocation;
    return env.su_feature(alloc, env.rates(alloc), k).norm();
  }

  gdbn::Models models_;
  AgentConfig cfg_;
  Rng rng_;
  PolicyTables tables_;
  std::vector<mjpf::BeliefState> beliefs_;
  std::vector<gdbn::Entity> roles_;
  std::vector<bool> fresh_;
  int episode_ = 0;
};

}  // namespace cnuav::agent
