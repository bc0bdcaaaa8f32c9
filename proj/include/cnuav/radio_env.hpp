#pragma once

// Radio environment: geometry, free-space path loss, Rician block fading,
// primary-user occupancy and SU mobility.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "cnuav/error.hpp"

namespace cnuav {

using Rng = std::mt19937_64;

namespace radio {

using Point = Eigen::Vector2d;
using GainMatrix = Eigen::MatrixXd;  // N x K, linear power gains

struct Scenario {
  double cell_radius = 1000.0;
  double uav_altitude = 100.0;
  Point uav_xy = Point::Zero();
  std::vector<Point> su_positions;
  double min_uav_su_distance = 100.0;
  int num_subchannels = 6;
  int num_sus = 20;
  int episode_length = 20;

  void validate() const;
};

struct PathLossConfig {
  double rho0 = 1e-4;  // -40 dB at 1 m
};

struct FadingConfig {
  double rician_k = 10.0;
  double mean_power = 1.0;
};

/// Two-state (vacant/occupied) Markov chain per primary-user channel.
struct PuActivityModel {
  std::vector<bool> occupancy;                // length K
  std::vector<Eigen::Matrix2d> transition;    // length K; row 0 = from vacant
  std::set<int> pu_channels;                  // zero-based channel indices

  void validate() const;
  /// Probability that channel k is occupied next slot given current occupancy.
  double forecast(int k) const {
    if (!pu_channels.contains(k)) return 0.0;
    return transition[static_cast<std::size_t>(k)](occupancy[static_cast<std::size_t>(k)] ? 1 : 0, 1);
  }
};

struct Subchannel {
  int index = 0;
  double bandwidth = 0.0;    // Hz
  double noise_power = 0.0;  // W
};

inline double distance_uav_to_su(const Point& uav_xy, const Point& su_xy, double altitude) {
  require(altitude > 0.0, "uav_altitude", "must be positive");
  return std::sqrt(altitude * altitude + (uav_xy - su_xy).squaredNorm());
}

inline double large_scale_gain(double rho0, double d) {
  if (!(d > 0.0)) throw Error("large_scale_gain: distance must be positive");
  return rho0 / (d * d);
}

/// Rician small-scale coefficient with E|Omega|^2 = mean_power. An infinite
/// K-factor gives the deterministic line-of-sight limit.
inline std::complex<double> sample_small_scale(const FadingConfig& fading, Rng& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const double theta = phase(rng);
  const double amp = std::sqrt(fading.mean_power);
  if (std::isinf(fading.rician_k)) return std::polar(amp, theta);
  const double k = fading.rician_k;
  std::normal_distribution<double> gauss(0.0, std::sqrt(0.5));
  const std::complex<double> scatter(gauss(rng), gauss(rng));
  return amp * (std::sqrt(k / (k + 1.0)) * std::polar(1.0, theta) + std::sqrt(1.0 / (k + 1.0)) * scatter);
}

/// Link power gain g * |Omega|^2 for SU n. Fading is flat across subchannels.
inline double channel_gain(const Scenario& s, const PathLossConfig& pl, std::complex<double> omega, int n) {
  const double d = distance_uav_to_su(s.uav_xy, s.su_positions.at(static_cast<std::size_t>(n)), s.uav_altitude);
  return large_scale_gain(pl.rho0, d) * std::norm(omega);
}

/// One block-fading realisation: gains held constant for a whole episode.
inline GainMatrix draw_channels(const Scenario& s, const PathLossConfig& pl, const FadingConfig& fading, Rng& rng) {
  GainMatrix g(s.num_sus, s.num_subchannels);
  for (int n = 0; n < s.num_sus; ++n) {
    const double gn = channel_gain(s, pl, sample_small_scale(fading, rng), n);
    g.row(n).setConstant(gn);
  }
  return g;
}

inline void Scenario::validate() const {
  require(num_subchannels >= 1, "num_subchannels", "must be >= 1");
  require(num_sus >= 1, "num_sus", "must be >= 1");
  require(episode_length >= 1, "episode_length", "must be >= 1");
  require(cell_radius > 0.0, "cell_radius", "must be positive");
  require(uav_altitude > 0.0, "uav_altitude", "must be positive");
  require(min_uav_su_distance < std::hypot(cell_radius, uav_altitude), "min_uav_su_distance",
          "exceeds the farthest point of the cell");
  require(static_cast<int>(su_positions.size()) == num_sus, "su_positions", "must hold num_sus entries");
  for (const auto& w : su_positions) {
    require(w.norm() <= cell_radius + 1e-9, "su_positions", "SU outside cell radius");
    require(distance_uav_to_su(uav_xy, w, uav_altitude) >= min_uav_su_distance - 1e-9, "su_positions",
            "SU closer than min_uav_su_distance");
  }
}

inline void PuActivityModel::validate() const {
  require(transition.size() == occupancy.size(), "pu_transition", "one matrix per channel required");
  for (int k : pu_channels)
    require(k >= 0 && k < static_cast<int>(occupancy.size()), "pu_channels", "index out of range");
  for (const auto& t : transition) {
    require((t.array() >= 0.0).all(), "pu_transition", "negative probability");
    for (int r = 0; r < 2; ++r)
      require(std::abs(t.row(r).sum() - 1.0) <= 1e-12, "pu_transition", "rows must sum to 1");
  }
}

/// PUs permanently occupying `channels`; the remaining channels stay vacant.
inline PuActivityModel static_pu_model(int num_subchannels, const std::set<int>& channels) {
  PuActivityModel m;
  m.occupancy.assign(static_cast<std::size_t>(num_subchannels), false);
  m.transition.assign(static_cast<std::size_t>(num_subchannels), Eigen::Matrix2d::Identity());
  m.pu_channels = channels;
  Eigen::Matrix2d always;
  always << 0.0, 1.0, 0.0, 1.0;
  for (int k : channels) {
    m.occupancy[static_cast<std::size_t>(k)] = true;
    m.transition[static_cast<std::size_t>(k)] = always;
  }
  return m;
}

/// Symmetric two-state chain with the given stay probability on each PU channel.
inline PuActivityModel markov_pu_model(int num_subchannels, const std::set<int>& channels, double stay_vacant,
                                       double stay_occupied) {
  PuActivityModel m = static_pu_model(num_subchannels, channels);
  Eigen::Matrix2d t;
  t << stay_vacant, 1.0 - stay_vacant, 1.0 - stay_occupied, stay_occupied;
  for (int k : channels) m.transition[static_cast<std::size_t>(k)] = t;
  return m;
}

inline std::vector<bool> step_pu_activity(PuActivityModel& model, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t k = 0; k < model.occupancy.size(); ++k) {
    if (!model.pu_channels.contains(static_cast<int>(k))) {
      model.occupancy[k] = false;
      continue;
    }
    const double p_occ = model.transition[k](model.occupancy[k] ? 1 : 0, 1);
    model.occupancy[k] = u(rng) < p_occ;
  }
  return model.occupancy;
}

namespace detail {
inline Point constrain(Point p, const Scenario& s) {
  const double r = p.norm();
  if (r > s.cell_radius) p *= (2.0 * s.cell_radius - r) / r;  // reflect at the boundary
  if (p.norm() > s.cell_radius) p *= s.cell_radius / p.norm();
  const double h2 = s.uav_altitude * s.uav_altitude;
  const double min_h2 = s.min_uav_su_distance * s.min_uav_su_distance - h2;
  if (min_h2 > 0.0) {
    Point rel = p - s.uav_xy;
    const double min_h = std::sqrt(min_h2);
    if (rel.norm() < min_h) {
      rel = rel.norm() > 0.0 ? Point(rel.normalized() * min_h) : Point(min_h, 0.0);
      p = s.uav_xy + rel;
    }
  }
  return p;
}
}  // namespace detail

/// Uniform random-direction step of length <= mobility_step for every SU.
inline std::vector<Point> move_sus(const Scenario& s, double mobility_step, Rng& rng) {
  require(mobility_step >= 0.0, "mobility_step", "must be non-negative");
  std::vector<Point> out = s.su_positions;
  if (mobility_step == 0.0) return out;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> len(0.0, mobility_step);
  for (auto& p : out) {
    const double a = angle(rng);
    p = detail::constrain(p + len(rng) * Point(std::cos(a), std::sin(a)), s);
  }
  return out;
}

/// SUs dropped uniformly over the admissible annulus of the cell.
inline Scenario make_scenario(int num_sus, int num_subchannels, int episode_length, double cell_radius,
                              double altitude, double min_distance, Rng& rng) {
  Scenario s;
  s.num_sus = num_sus;
  s.num_subchannels = num_subchannels;
  s.episode_length = episode_length;
  s.cell_radius = cell_radius;
  s.uav_altitude = altitude;
  s.min_uav_su_distance = min_distance;
  const double rmin = std::sqrt(std::max(0.0, min_distance * min_distance - altitude * altitude));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  for (int n = 0; n < num_sus; ++n) {
    const double r = std::sqrt(rmin * rmin + u(rng) * (cell_radius * cell_radius - rmin * rmin));
    const double a = angle(rng);
    s.su_positions.emplace_back(r * std::cos(a), r * std::sin(a));
  }
  s.validate();
  return s;
}

/// Equal split of the system bandwidth; noise power = PSD x bandwidth.
inline std::vector<Subchannel> make_subchannels(int num_subchannels, double system_bandwidth_hz,
                                                double noise_psd_dbm_hz) {
  require(num_subchannels >= 1, "num_subchannels", "must be >= 1");
  require(system_bandwidth_hz > 0.0, "system_bandwidth_hz", "must be positive");
  const double bk = system_bandwidth_hz / num_subchannels;
  const double psd_w = std::pow(10.0, noise_psd_dbm_hz / 10.0) * 1e-3;
  std::vector<Subchannel> out;
  for (int k = 0; k < num_subchannels; ++k) out.push_back({k, bk, psd_w * bk});
  return out;
}

}  // namespace radio
}  // namespace cnuav
