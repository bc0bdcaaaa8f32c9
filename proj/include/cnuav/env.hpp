#pragma once

// Simulated uplink cell shared by the agent and the baselines: one scenario,
// its gains and PU activity, feasibility projection, goodput and the
// per-subchannel I/Q sensory feature the perception stack observes.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <cstdint>
#include <vector>

#include "cnuav/error.hpp"
#include "cnuav/gdbn.hpp"
#include "cnuav/noma_phy.hpp"
#include "cnuav/radio_env.hpp"

namespace cnuav::sim {

struct EnvConfig {
  int num_sus = 20;
  int num_subchannels = 6;
  int episode_length = 20;
  double cell_radius = 1000.0;
  double uav_altitude = 100.0;
  double min_distance = 100.0;
  double rho0 = 1e-4;
  double rician_k = 10.0;
  double bandwidth_hz = 1.4e6;
  double noise_psd_dbm_hz = -174.0;
  double p_max = 20.0;
  int max_per_channel = 5;  // M
  double delta_y = 0.02;
  double p_th = 1.0;  // in units of subchannel noise power
  std::set<int> pu_channels{0, 1, 2};
  double pu_stay_vacant = 0.0;  // 0 / 1: PUs never leave
  double pu_stay_occupied = 1.0;
  double pu_snr_db = 30.0;
  double mobility_step = 0.0;        // metres per episode
  bool redraw_fading = false;        // new block-fading draw every episode
  double observation_noise_std = 0.01;

  void validate() const {
    require(num_sus >= 1, "num_sus", "must be >= 1");
    require(num_subchannels >= 1, "num_subchannels", "must be >= 1");
    require(episode_length >= 1, "episode_length", "must be >= 1");
    require(cell_radius > 0.0, "cell_radius", "must be positive");
    require(uav_altitude > 0.0, "uav_altitude", "must be positive");
    require(min_distance >= 0.0 && min_distance < std::hypot(cell_radius, uav_altitude), "min_distance",
            "must lie inside the cell");
    require(rho0 > 0.0, "rho0", "must be positive");
    require(rician_k >= 0.0, "rician_k", "must be non-negative");
    require(bandwidth_hz > 0.0, "bandwidth_hz", "must be positive");
    require(p_max > 0.0, "p_max", "must be positive");
    require(max_per_channel >= 1, "max_per_channel", "must be >= 1");
    require(delta_y > 0.0 && delta_y < 1.0, "delta_y", "must lie in (0, 1)");
    require(p_th >= 0.0, "p_th", "must be non-negative");
    for (int k : pu_channels) require(k >= 0 && k < num_subchannels, "pu_channels", "index out of range");
    require(pu_stay_vacant >= 0.0 && pu_stay_vacant <= 1.0, "pu_stay_vacant", "must be a probability");
    require(pu_stay_occupied >= 0.0 && pu_stay_occupied <= 1.0, "pu_stay_occupied", "must be a probability");
    require(mobility_step >= 0.0, "mobility_step", "must be non-negative");
    require(observation_noise_std > 0.0, "observation_noise_std", "must be positive");
  }
};

struct Projection {
  phy::Allocation allocation;
  bool ladder_feasible = true;
};

class Environment {
 public:
  Environment(const EnvConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    scenario_ = radio::make_scenario(cfg_.num_sus, cfg_.num_subchannels, cfg_.episode_length, cfg_.cell_radius,
                                     cfg_.uav_altitude, cfg_.min_distance, rng_);
    subchannels_ = radio::make_subchannels(cfg_.num_subchannels, cfg_.bandwidth_hz, cfg_.noise_psd_dbm_hz);
    pu_initial_ = radio::markov_pu_model(cfg_.num_subchannels, cfg_.pu_channels, cfg_.pu_stay_vacant,
                                         cfg_.pu_stay_occupied);
    pu_ = pu_initial_;
    draw_gains();
  }

  /// Tiny fully specified instance (no geometry); used by tests and oracle studies.
  Environment(const EnvConfig& cfg, const radio::GainMatrix& gains, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    require(gains.rows() == cfg_.num_sus && gains.cols() == cfg_.num_subchannels, "gains", "shape must be N x K");
    scenario_.num_sus = cfg_.num_sus;
    scenario_.num_subchannels = cfg_.num_subchannels;
    scenario_.episode_length = cfg_.episode_length;
    scenario_.su_positions.assign(static_cast<std::size_t>(cfg_.num_sus), radio::Point::Zero());
    subchannels_ = radio::make_subchannels(cfg_.num_subchannels, cfg_.bandwidth_hz, cfg_.noise_psd_dbm_hz);
    pu_initial_ = radio::markov_pu_model(cfg_.num_subchannels, cfg_.pu_channels, cfg_.pu_stay_vacant,
                                         cfg_.pu_stay_occupied);
    pu_ = pu_initial_;
    gains_ = gains;
    fixed_gains_ = true;
    update_reference();
  }

  const EnvConfig& config() const { return cfg_; }
  const radio::Scenario& scenario() const { return scenario_; }
  const radio::GainMatrix& gains() const { return gains_; }
  const std::vector<radio::Subchannel>& subchannels() const { return subchannels_; }
  const radio::PuActivityModel& pu() const { return pu_; }
  const std::vector<bool>& occupancy() const { return pu_.occupancy; }
  int num_sus() const { return cfg_.num_sus; }
  int num_channels() const { return cfg_.num_subchannels; }

  /// Resets PU activity; optionally moves SUs and redraws fading.
  void begin_episode() {
    pu_ = pu_initial_;
    if (fixed_gains_) return;
    if (cfg_.mobility_step > 0.0) {
      scenario_.su_positions = radio::move_sus(scenario_, cfg_.mobility_step, rng_);
      draw_gains();
    } else if (cfg_.redraw_fading) {
      draw_gains();
    }
  }

  /// PU activity for the next slot (the first slot of an episode keeps the reset state).
  void step_slot() { radio::step_pu_activity(pu_, rng_); }

  phy::Limits limits() const {
    phy::Limits l;
    l.max_per_channel = cfg_.max_per_channel;
    l.p_max = cfg_.p_max;
    return l;
  }

  phy::LadderParams ladder(int k) const {
    phy::LadderParams lp;
    lp.delta_y = cfg_.delta_y;
    lp.p_th = cfg_.p_th * subchannels_[static_cast<std::size_t>(k)].noise_power;
    lp.channel_cap = cfg_.p_max * cfg_.max_per_channel;
    return lp;
  }

  /// Per-SU budget scaling, then the decodable-ladder projection per channel.
  Projection project(const phy::Allocation& in) const {
    Projection out{in, true};
    auto& a = out.allocation;
    a.power = a.power.cwiseMax(0.0);
    for (int n = 0; n < a.num_sus(); ++n) {
      const double tot = a.power.row(n).sum();
      if (tot > cfg_.p_max) a.power.row(n) *= cfg_.p_max / tot;
    }
    a.sic_orders.assign(static_cast<std::size_t>(a.num_channels()), {});
    for (int k = 0; k < a.num_channels(); ++k) {
      const auto mem = a.members(k);
      if (mem.empty()) continue;
      std::vector<double> p, g;
      for (int n : mem) {
        p.push_back(a.power(n, k));
        g.push_back(gains_(n, k));
      }
      const auto r = phy::enforce_min_distance(p, g, ladder(k));
      out.ladder_feasible = out.ladder_feasible && r.feasible;
      for (std::size_t i = 0; i < mem.size(); ++i) a.power(mem[i], k) = r.powers[i];
      for (int i : r.order) a.sic_orders[static_cast<std::size_t>(k)].push_back(mem[static_cast<std::size_t>(i)]);
    }
    return out;
  }

  bool feasible(const Projection& p) const {
    return p.ladder_feasible && phy::check_constraints(p.allocation, limits()).feasible;
  }

  phy::RateReport rates(const phy::Allocation& a) const {
    return phy::effective_rates(a, gains_, subchannels_, pu_.occupancy, cfg_.delta_y);
  }

  /// Single-user spectral efficiency of the strongest SU at full power.
  double reference_rate() const { return reference_rate_; }

  std::vector<int> free_channels() const {
    std::vector<int> out;
    for (int k = 0; k < num_channels(); ++k)
      if (!pu_.occupancy[static_cast<std::size_t>(k)]) out.push_back(k);
    return out;
  }

  /// SU indices sorted by decreasing gain (ties by index).
  std::vector<int> by_gain() const {
    std::vector<int> idx(static_cast<std::size_t>(num_sus()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return gains_(a, 0) > gains_(b, 0); });
    return idx;
  }

  /// rank[n] = position of SU n in by_gain().
  std::vector<int> gain_ranks() const {
    const auto order = by_gain();
    std::vector<int> rank(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) rank[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    return rank;
  }

  /// Noise-free SU part of channel k's feature: normalised goodput carried on
  /// the phase of the known-pilot composite.
  gdbn::Vec2 su_feature(const phy::Allocation& a, const phy::RateReport& rates, int k) const {
    const auto& order = a.sic_orders.size() > static_cast<std::size_t>(k) ? a.sic_orders[static_cast<std::size_t>(k)]
                                                                          : std::vector<int>{};
    if (order.empty()) return gdbn::Vec2::Zero();
    std::vector<double> amp;
    for (int n : order) amp.push_back(std::sqrt(a.power(n, k) * gains_(n, k)));
    const phy::cplx pilot = phy::pilot_composite(amp);
    const double eff = rates.per_user_rates.col(k).sum() / subchannels_[static_cast<std::size_t>(k)].bandwidth;
    const double mag = eff / reference_rate_;
    const double ph = std::arg(pilot);
    return {mag * std::cos(ph), mag * std::sin(ph)};
  }

  double pu_level() const { return std::log2(1.0 + std::pow(10.0, cfg_.pu_snr_db / 10.0)) / reference_rate_; }

  /// Observed feature of channel k: SU part, plus a BPSK PU symbol when the
  /// channel is occupied, plus receiver noise.
  gdbn::Vec2 observe(const phy::Allocation& a, const phy::RateReport& rates, int k, Rng& rng) const {
    std::normal_distribution<double> n(0.0, cfg_.observation_noise_std);
    gdbn::Vec2 z = su_feature(a, rates, k);
    if (pu_.occupancy[static_cast<std::size_t>(k)]) {
      std::bernoulli_distribution bit(0.5);
      z(0) += bit(rng) ? pu_level() : -pu_level();
    }
    return z + gdbn::Vec2(n(rng), n(rng));
  }

 private:
  void draw_gains() {
    gains_ = radio::draw_channels(scenario_, {cfg_.rho0}, {cfg_.rician_k, 1.0}, rng_);
    update_reference();
  }
  void update_reference() {
    const double eta = subchannels_.front().noise_power;
    reference_rate_ = std::log2(1.0 + cfg_.p_max * gains_.maxCoeff() / eta);
  }

  EnvConfig cfg_;
  Rng rng_;
  radio::Scenario scenario_;
  std::vector<radio::Subchannel> subchannels_;
  radio::PuActivityModel pu_initial_;
  radio::PuActivityModel pu_;
  radio::GainMatrix gains_;
  double reference_rate_ = 1.0;
  bool fixed_gains_ = false;
};

/// Allocation from a per-SU channel choice (-1 idle) and per-SU power.
inline phy::Allocation make_allocation(int num_sus, int num_channels, std::span<const int> channel,
                                       std::span<const double> power) {
  auto a = phy::Allocation::empty(num_sus, num_channels);
  for (int n = 0; n < num_sus; ++n) {
    const int k = channel[static_cast<std::size_t>(n)];
    if (k >= 0) a.power(n, k) = power[static_cast<std::size_t>(n)];
  }
  return a;
}

}  // namespace cnuav::sim
