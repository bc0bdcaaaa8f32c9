#pragma once

// Uplink power-domain NOMA physical layer: rotated QPSK constellations,
// superposition, hard-decision SIC, achievable rates and the constraint set
// of the sum-rate problem.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cnuav/error.hpp"
#include "cnuav/radio_env.hpp"

namespace cnuav::phy {

using cplx = std::complex<double>;

/// Largest amplitude ratio between consecutive SIC layers that keeps every
/// layer's hard decision correct whatever the weaker layers transmit.
inline constexpr double kLadderRatio = std::numbers::sqrt2 - 1.0;

struct ConstellationConfig {
  int rotation_slots = 5;  // per-user phase offsets step by pi / (2 * rotation_slots)
  double delta_y = 0.02;   // min composite distance, relative to composite RMS amplitude
  double p_th = 1.0;       // min received-power gap between layers, in noise-power units

  void validate() const {
    require(rotation_slots >= 1, "rotation_slots", "must be >= 1");
    require(delta_y > 0.0, "delta_y", "must be positive");
    require(p_th >= 0.0, "p_th", "must be non-negative");
  }
};

inline double user_rotation(int user, const ConstellationConfig& cfg) {
  return user * std::numbers::pi / (2.0 * cfg.rotation_slots);
}

/// Gray-coded unit-energy QPSK map of `user`, indexed by 2*b0 + b1.
inline std::array<cplx, 4> qpsk_points(int user, const ConstellationConfig& cfg = {}) {
  const double s = 1.0 / std::numbers::sqrt2;
  const cplx rot = std::polar(1.0, user_rotation(user, cfg));
  return {cplx(s, s) * rot, cplx(s, -s) * rot, cplx(-s, s) * rot, cplx(-s, -s) * rot};
}

inline cplx modulate(std::span<const std::uint8_t> bits, int user, const ConstellationConfig& cfg = {}) {
  if (bits.size() != 2) throw Error("modulate: QPSK needs a 2-bit word");
  if (bits[0] > 1 || bits[1] > 1) throw Error("modulate: bits must be 0 or 1");
  return qpsk_points(user, cfg)[static_cast<std::size_t>(2 * bits[0] + bits[1])];
}

inline double modulate_bpsk(std::span<const std::uint8_t> bits) {
  if (bits.size() != 1 || bits[0] > 1) throw Error("modulate_bpsk: needs a single bit");
  return bits[0] == 0 ? 1.0 : -1.0;
}

inline cplx superimpose(std::span<const cplx> symbols, std::span<const double> powers,
                        std::span<const double> gains) {
  if (symbols.size() != powers.size() || symbols.size() != gains.size())
    throw Error("superimpose: length mismatch");
  cplx y{0.0, 0.0};
  for (std::size_t i = 0; i < symbols.size(); ++i) y += std::sqrt(powers[i] * gains[i]) * symbols[i];
  return y;
}

/// Decode order: received power p*g descending, ties to the lower index.
inline std::vector<int> sic_order(std::span<const double> powers, std::span<const double> gains) {
  if (powers.size() != gains.size()) throw Error("sic_order: length mismatch");
  std::vector<int> idx(powers.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return powers[static_cast<std::size_t>(a)] * gains[static_cast<std::size_t>(a)] >
           powers[static_cast<std::size_t>(b)] * gains[static_cast<std::size_t>(b)];
  });
  return idx;
}

struct SicResult {
  std::vector<int> symbols;  // detected symbol index per user (input indexing)
  double residual = 0.0;     // |y - sum of re-modulated detections|
};

/// Hard-decision SIC. User i transmits on constellation `qpsk_points(i)`.
inline SicResult sic_decode(cplx composite, std::span<const double> powers, std::span<const double> gains,
                            std::span<const int> order, const ConstellationConfig& cfg = {}) {
  SicResult out;
  out.symbols.assign(powers.size(), -1);
  cplx rest = composite;
  for (int u : order) {
    const auto pts = qpsk_points(u, cfg);
    const double a = std::sqrt(powers[static_cast<std::size_t>(u)] * gains[static_cast<std::size_t>(u)]);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int s = 0; s < 4; ++s) {
      const double d = std::norm(rest - a * pts[static_cast<std::size_t>(s)]);
      if (d < best_d) {
        best_d = d;
        best = s;
      }
    }
    out.symbols[static_cast<std::size_t>(u)] = best;
    rest -= a * pts[static_cast<std::size_t>(best)];
  }
  out.residual = std::abs(rest);
  return out;
}

// ---------------------------------------------------------------------------
// Allocation and rates

struct Allocation {
  Eigen::MatrixXd power;                     // N x K watts; p > 0 <=> member of U_k
  std::vector<std::vector<int>> sic_orders;  // per channel, members in decode order

  static Allocation empty(int num_sus, int num_channels) {
    Allocation a;
    a.power = Eigen::MatrixXd::Zero(num_sus, num_channels);
    a.sic_orders.assign(static_cast<std::size_t>(num_channels), {});
    return a;
  }
  int num_sus() const { return static_cast<int>(power.rows()); }
  int num_channels() const { return static_cast<int>(power.cols()); }

  std::vector<int> members(int k) const {
    std::vector<int> m;
    for (int n = 0; n < num_sus(); ++n)
      if (power(n, k) > 0.0) m.push_back(n);
    return m;
  }

  /// Channel each SU transmits on, or -1 when idle (first channel if several).
  std::vector<int> assignment() const {
    std::vector<int> a(static_cast<std::size_t>(num_sus()), -1);
    for (int n = 0; n < num_sus(); ++n)
      for (int k = 0; k < num_channels(); ++k)
        if (power(n, k) > 0.0) {
          a[static_cast<std::size_t>(n)] = k;
          break;
        }
    return a;
  }

  /// Recompute every sigma_k from received powers.
  void order_by(const radio::GainMatrix& gains) {
    sic_orders.assign(static_cast<std::size_t>(num_channels()), {});
    for (int k = 0; k < num_channels(); ++k) {
      const auto mem = members(k);
      std::vector<double> p, g;
      for (int n : mem) {
        p.push_back(power(n, k));
        g.push_back(gains(n, k));
      }
      for (int i : sic_order(p, g)) sic_orders[static_cast<std::size_t>(k)].push_back(mem[static_cast<std::size_t>(i)]);
    }
  }
};

struct RateReport {
  Eigen::MatrixXd per_user_rates;  // N x K, bits/s
  double sum_rate = 0.0;
};

inline double sum_rate(const RateReport& r) { return r.per_user_rates.sum(); }

namespace detail {
inline std::vector<int> channel_order(const Allocation& alloc, const radio::GainMatrix& gains, int k) {
  const auto& given = alloc.sic_orders.size() == static_cast<std::size_t>(alloc.num_channels())
                          ? alloc.sic_orders[static_cast<std::size_t>(k)]
                          : std::vector<int>{};
  const auto mem = alloc.members(k);
  if (given.size() == mem.size() && !given.empty()) return given;
  Allocation tmp = alloc;
  tmp.order_by(gains);
  return tmp.sic_orders[static_cast<std::size_t>(k)];
}
}  // namespace detail

/// Per-user uplink rates; each user sees interference from the users decoded after it.
inline RateReport achievable_rate(const Allocation& alloc, const radio::GainMatrix& gains,
                                  std::span<const radio::Subchannel> subchannels) {
  RateReport r;
  r.per_user_rates = Eigen::MatrixXd::Zero(alloc.num_sus(), alloc.num_channels());
  for (int k = 0; k < alloc.num_channels(); ++k) {
    const auto order = detail::channel_order(alloc, gains, k);
    const auto& sc = subchannels[static_cast<std::size_t>(k)];
    double interference = 0.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const double rx = alloc.power(*it, k) * gains(*it, k);
      r.per_user_rates(*it, k) = sc.bandwidth * std::log2(1.0 + rx / (interference + sc.noise_power));
      interference += rx;
    }
  }
  r.sum_rate = sum_rate(r);
  return r;
}

// ---------------------------------------------------------------------------
// Constraints

enum class Constraint { TotalPower, Nonnegative, Multiplexing, ChannelCap };

inline const char* to_string(Constraint c) {
  switch (c) {
    case Constraint::TotalPower: return "total_power";
    case Constraint::Nonnegative: return "nonnegative";
    case Constraint::Multiplexing: return "multiplexing";
    case Constraint::ChannelCap: return "channel_cap";
  }
  return "?";
}

struct Violation {
  Constraint constraint;
  int su = -1;
  int channel = -1;
  double value = 0.0;
  double limit = 0.0;
};

struct Feasibility {
  bool feasible = true;
  std::vector<Violation> violations;
};

struct Limits {
  int max_per_channel = 5;        // M
  double p_max = 20.0;            // per-SU budget over all channels
  Eigen::MatrixXd per_channel_cap;  // N x K; empty means p_max everywhere
};

inline Feasibility check_constraints(const Allocation& alloc, const Limits& lim) {
  constexpr double tol = 1e-9;
  Feasibility f;
  auto add = [&](Constraint c, int n, int k, double v, double l) { f.violations.push_back({c, n, k, v, l}); };
  for (int n = 0; n < alloc.num_sus(); ++n) {
    double total = 0.0;
    for (int k = 0; k < alloc.num_channels(); ++k) {
      const double p = alloc.power(n, k);
      if (p < 0.0) add(Constraint::Nonnegative, n, k, p, 0.0);
      total += std::max(p, 0.0);
      const double cap = lim.per_channel_cap.size() > 0 ? lim.per_channel_cap(n, k) : lim.p_max;
      if (p > cap * (1.0 + tol)) add(Constraint::ChannelCap, n, k, p, cap);
    }
    if (total > lim.p_max * (1.0 + tol)) add(Constraint::TotalPower, n, -1, total, lim.p_max);
  }
  for (int k = 0; k < alloc.num_channels(); ++k) {
    const auto m = static_cast<int>(alloc.members(k).size());
    if (m > lim.max_per_channel) add(Constraint::Multiplexing, -1, k, m, lim.max_per_channel);
  }
  f.feasible = f.violations.empty();
  return f;
}

// ---------------------------------------------------------------------------
// Composite-constellation spacing

/// Per-layer separation margin of an amplitude ladder given in decode order:
/// sqrt(2) a_m - 2 * sum_{j>m} a_j, a lower bound on the distance between
/// composite points whose first differing layer is m.
inline std::vector<double> layer_margins(std::span<const double> amplitudes) {
  std::vector<double> d(amplitudes.size());
  double tail = 0.0;
  for (std::size_t i = amplitudes.size(); i-- > 0;) {
    d[i] = std::numbers::sqrt2 * amplitudes[i] - 2.0 * tail;
    tail += amplitudes[i];
  }
  return d;
}

/// Number of leading layers that SIC recovers: a layer decodes while its margin
/// is at least delta_y times the composite RMS amplitude.
inline int decodable_depth(std::span<const double> amplitudes, double delta_y) {
  double energy = 0.0;
  for (double a : amplitudes) energy += a * a;
  const double floor = delta_y * std::sqrt(energy);
  const auto d = layer_margins(amplitudes);
  int depth = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(amplitudes[i] > 0.0) || d[i] < floor * (1.0 - 1e-12)) break;
    ++depth;
  }
  return depth;
}

/// Deepest geometric ladder at kLadderRatio whose spacing still meets delta_y.
inline int max_ladder_depth(double delta_y) {
  double energy = 0.0;
  for (int depth = 1; depth <= 64; ++depth) {
    energy += std::pow(kLadderRatio, 2.0 * (depth - 1));
    const double ratio = std::numbers::sqrt2 * std::pow(kLadderRatio, depth - 1) / std::sqrt(energy);
    if (ratio < delta_y) return depth - 1;
  }
  return 64;
}

struct LadderParams {
  double delta_y = 0.02;
  double p_th = 0.0;           // absolute received-power gap (same units as p*g)
  double channel_cap = 20.0;   // sum of powers on the channel
};

struct LadderResult {
  std::vector<double> powers;  // same indexing as the input
  std::vector<int> order;      // transmitting users, decode order
  bool feasible = true;
  int decodable_depth = 0;
  std::string reason;
};

/// Multiplicative projection of one channel's powers onto a decodable
/// amplitude ladder. Powers only ever decrease. When the users cannot all be
/// separated the strongest decodable prefix is protected and `feasible` is
/// false ("reduce M or increase cap").
inline LadderResult enforce_min_distance(std::span<const double> powers, std::span<const double> gains,
                                         const LadderParams& params) {
  if (powers.size() != gains.size()) throw Error("enforce_min_distance: length mismatch");
  LadderResult res;
  res.powers.assign(powers.begin(), powers.end());
  std::vector<double> p(powers.begin(), powers.end());
  for (double& x : p) x = std::max(x, 0.0);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (total > params.channel_cap && total > 0.0)
    for (double& x : p) x *= params.channel_cap / total;

  std::vector<int> members;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) members.push_back(static_cast<int>(i));
  std::vector<double> mp, mg;
  for (int i : members) {
    mp.push_back(p[static_cast<std::size_t>(i)]);
    mg.push_back(gains[static_cast<std::size_t>(i)]);
  }
  const auto local = sic_order(mp, mg);
  const std::size_t n = members.size();
  for (int i : local) res.order.push_back(members[static_cast<std::size_t>(i)]);

  std::vector<double> alpha(n), a(n);
  for (std::size_t m = 0; m < n; ++m) {
    const auto u = static_cast<std::size_t>(res.order[m]);
    alpha[m] = std::sqrt(p[u] * gains[u]);
  }
  const std::size_t depth_cap = std::min<std::size_t>(n, static_cast<std::size_t>(max_ladder_depth(params.delta_y)));
  const std::size_t prefix = depth_cap;

  // Top-down ratio clamp, then a bottom-up cap (upper layers at most
  // `slack` times the ladder shape above the weakest protected layer), then
  // the P_th gap; iterate to a fixed point. The cap is only as tight as the
  // prefix needs to stay decodable.
  auto shape = [&](double slack) {
    std::vector<double> b = alpha;
    for (int iter = 0; iter < 200; ++iter) {
      const auto before = b;
      for (std::size_t m = 1; m < n; ++m) b[m] = std::min(b[m], kLadderRatio * b[m - 1]);
      if (prefix > 0 && std::isfinite(slack))
        for (std::size_t m = 0; m + 1 < prefix; ++m)
          b[m] = std::min(b[m], slack * b[prefix - 1] * std::pow(kLadderRatio, -static_cast<double>(prefix - 1 - m)));
      for (std::size_t m = 1; m < n; ++m) {
        const double cap2 = b[m - 1] * b[m - 1] - params.p_th;
        b[m] = cap2 > 0.0 ? std::min(b[m], std::sqrt(cap2)) : 0.0;
      }
      if (b == before) break;
    }
    return b;
  };
  auto prefix_ok = [&](const std::vector<double>& b) {
    return decodable_depth(std::span<const double>(b.data(), prefix), params.delta_y) >= static_cast<int>(prefix);
  };
  a = shape(std::numeric_limits<double>::infinity());
  if (prefix > 1 && !prefix_ok(a)) {
    double lo = 0.0, hi = 40.0;  // log2 of the slack
    for (int it = 0; it < 50; ++it) {
      const double mid = 0.5 * (lo + hi);
      (prefix_ok(shape(std::exp2(mid))) ? lo : hi) = mid;
    }
    a = shape(std::exp2(lo));
  }

  bool dropped = false;
  for (std::size_t m = 0; m < n; ++m) dropped = dropped || !(a[m] > 0.0);

  if (n > prefix) {
    // Overflow layers cannot be separated; shrink them until the prefix decodes.
    std::vector<double> tail(a.begin() + static_cast<long>(prefix), a.end());
    auto trial = [&](double s) {
      std::vector<double> t = a;
      for (std::size_t m = prefix; m < n; ++m) t[m] = tail[m - prefix] * s;
      return t;
    };
    double lo = 0.0, hi = 1.0;
    if (decodable_depth(trial(hi), params.delta_y) >= static_cast<int>(prefix)) {
      lo = hi;
    } else {
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (decodable_depth(trial(mid), params.delta_y) >= static_cast<int>(prefix) ? lo : hi) = mid;
      }
    }
    a = trial(lo);
    // Keep overflow users transmitting: a zero power would silently idle them.
    for (std::size_t m = prefix; m < n; ++m)
      if (!(a[m] > 0.0)) a[m] = tail[m - prefix] * 1e-6;
  }

  for (std::size_t i = 0; i < res.powers.size(); ++i) res.powers[i] = 0.0;
  for (std::size_t m = 0; m < n; ++m) {
    const auto u = static_cast<std::size_t>(res.order[m]);
    res.powers[u] = gains[u] > 0.0 ? a[m] * a[m] / gains[u] : p[u];
  }
  res.decodable_depth = decodable_depth(a, params.delta_y);
  res.feasible = res.decodable_depth == static_cast<int>(n) && !dropped;
  if (!res.feasible) {
    res.reason = n > prefix ? "composite spacing below delta_y: reduce M or increase cap"
                            : "power-difference threshold unattainable within cap";
  }
  // Drop users that ended at zero power from the decode order.
  std::erase_if(res.order, [&](int u) { return !(res.powers[static_cast<std::size_t>(u)] > 0.0); });
  return res;
}

/// Known-pilot composite (every layer sends its symbol 0) for a decode-ordered ladder.
inline cplx pilot_composite(std::span<const double> amplitudes, const ConstellationConfig& cfg = {}) {
  cplx y{0.0, 0.0};
  for (std::size_t m = 0; m < amplitudes.size(); ++m)
    y += amplitudes[m] * qpsk_points(static_cast<int>(m), cfg)[0];
  return y;
}

/// Goodput: SIC rates for the layers SIC can actually separate. Layers past
/// the decodable depth earn nothing; SUs on an occupied PU channel collide.
inline RateReport effective_rates(const Allocation& alloc, const radio::GainMatrix& gains,
                                  std::span<const radio::Subchannel> subchannels, const std::vector<bool>& occupied,
                                  double delta_y) {
  RateReport r = achievable_rate(alloc, gains, subchannels);
  for (int k = 0; k < alloc.num_channels(); ++k) {
    const auto order = detail::channel_order(alloc, gains, k);
    if (!order.empty() && static_cast<std::size_t>(k) < occupied.size() && occupied[static_cast<std::size_t>(k)]) {
      r.per_user_rates.col(k).setZero();
      continue;
    }
    std::vector<double> amp;
    for (int u : order) amp.push_back(std::sqrt(alloc.power(u, k) * gains(u, k)));
    const int depth = decodable_depth(amp, delta_y);
    for (std::size_t m = static_cast<std::size_t>(depth); m < order.size(); ++m) r.per_user_rates(order[m], k) = 0.0;
  }
  r.sum_rate = sum_rate(r);
  return r;
}

}  // namespace cnuav::phy
