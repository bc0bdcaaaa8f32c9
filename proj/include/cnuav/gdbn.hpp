#pragma once

// Offline perception: generalized states, the unmotivated (zero-control)
// predictor, generalized errors, Growing Neural Gas vocabularies and
// cluster-transition learning.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cnuav/error.hpp"
#include "cnuav/radio_env.hpp"

namespace cnuav::gdbn {

using Vec2 = Eigen::Vector2d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat4 = Eigen::Matrix4d;
using ObsMatrix = Eigen::Matrix<double, 2, 4>;

/// (I, Q, dI, dQ): an I/Q sample and its per-slot first difference.
using GeneralizedState = Vec4;

inline GeneralizedState generalized_state(const Vec2& z, const Vec2& z_prev) {
  GeneralizedState x;
  x << z, z - z_prev;
  return x;
}

struct ContinuousDynamics {
  Mat4 C = Mat4::Identity();
  Mat4 D = Mat4::Identity();
  std::vector<Vec4> control;  // one U per discrete cluster
  Mat4 Q = Mat4::Identity() * 1e-4;
  ObsMatrix H = ObsMatrix::Zero();
  Mat2 R = Mat2::Identity() * 1e-4;

  /// Constant-velocity C with H selecting (I, Q).
  static ContinuousDynamics constant_velocity() {
    ContinuousDynamics d;
    d.C.setIdentity();
    d.C.topRightCorner<2, 2>().setIdentity();
    d.H.setZero();
    d.H.leftCols<2>().setIdentity();
    return d;
  }

  Vec4 control_for(int cluster) const {
    if (cluster < 0 || cluster >= static_cast<int>(control.size())) return Vec4::Zero();
    return control[static_cast<std::size_t>(cluster)];
  }
};

/// Static-evolution prediction: C x with zero control.
inline GeneralizedState ukf_predict(const GeneralizedState& x, const ContinuousDynamics& dyn) { return dyn.C * x; }

struct GeneralizedError {
  Vec4 at_value = Vec4::Zero();
  GeneralizedState reference_state = Vec4::Zero();
};

inline GeneralizedError generalized_error(const GeneralizedState& pred, const GeneralizedState& obs) {
  return {obs - pred, obs};
}

struct DiscreteCluster {
  int id = 0;
  GeneralizedState mean = Vec4::Zero();
  Mat4 covariance = Mat4::Identity();
  long hit_count = 0;
};

// ---------------------------------------------------------------------------
// Growing Neural Gas

struct GngParams {
  double learning_rate = 0.01;  // winner; neighbours adapt at a tenth of it
  int max_nodes = 12;
  int epochs = 20;
  int max_edge_age = 50;
  int insertion_interval = 100;
  double insertion_error_decay = 0.5;
  double global_error_decay = 0.995;
  // Nodes are inserted only while the recent mean quantization distance exceeds this.
  double resolution = 0.02;

  void validate() const {
    require(learning_rate > 0.0 && learning_rate < 1.0, "gng_learning_rate", "must lie in (0, 1)");
    require(max_nodes >= 2, "gng_max_nodes", "must be >= 2");
    require(epochs >= 1, "gng_epochs", "must be >= 1");
    require(insertion_interval >= 1, "gng_insertion_interval", "must be >= 1");
  }
};

struct GngResult {
  std::vector<DiscreteCluster> clusters;
  std::vector<Vec4> nodes;
  std::vector<double> epoch_quantization_error;  // mean winner distance per epoch
};

namespace detail {

class Gng {
 public:
  explicit Gng(const GngParams& p) : p_(p) {}

  void seed(const Vec4& a, const Vec4& b) {
    w_ = {a, b};
    err_ = {0.0, 0.0};
    age_.assign(2, std::vector<int>(2, -1));
    connect(0, 1);
  }

  double feed(const Vec4& x) {
    int s1 = -1, s2 = -1;
    double d1 = std::numeric_limits<double>::infinity(), d2 = d1;
    for (int i = 0; i < size(); ++i) {
      const double d = (x - w_[static_cast<std::size_t>(i)]).squaredNorm();
      if (d < d1) {
        d2 = d1;
        s2 = s1;
        d1 = d;
        s1 = i;
      } else if (d < d2) {
        d2 = d;
        s2 = i;
      }
    }
    const double dist = std::sqrt(d1);
    err_[static_cast<std::size_t>(s1)] += d1;
    w_[static_cast<std::size_t>(s1)] += p_.learning_rate * (x - w_[static_cast<std::size_t>(s1)]);
    for (int j = 0; j < size(); ++j) {
      if (edge(s1, j) < 0) continue;
      w_[static_cast<std::size_t>(j)] += 0.1 * p_.learning_rate * (x - w_[static_cast<std::size_t>(j)]);
      set_edge(s1, j, edge(s1, j) + 1);
    }
    if (s2 >= 0) connect(s1, s2);
    prune();

    recent_sum_ += dist;
    ++recent_n_;
    if (++step_ % p_.insertion_interval == 0) {
      if (size() < p_.max_nodes && recent_sum_ / recent_n_ > p_.resolution) insert();
      recent_sum_ = 0.0;
      recent_n_ = 0;
    }
    for (double& e : err_) e *= p_.global_error_decay;
    return dist;
  }

  const std::vector<Vec4>& nodes() const { return w_; }

 private:
  int size() const { return static_cast<int>(w_.size()); }
  int edge(int a, int b) const { return age_[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]; }
  void set_edge(int a, int b, int v) {
    age_[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = v;
    age_[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = v;
  }
  void connect(int a, int b) {
    if (a != b) set_edge(a, b, 0);
  }

  void prune() {
    for (int a = 0; a < size(); ++a)
      for (int b = a + 1; b < size(); ++b)
        if (edge(a, b) > p_.max_edge_age) set_edge(a, b, -1);
    // Drop isolated nodes, keeping at least two.
    for (int i = size() - 1; i >= 0 && size() > 2; --i) {
      bool linked = false;
      for (int j = 0; j < size() && !linked; ++j) linked = edge(i, j) >= 0;
      if (!linked) erase(i);
    }
  }

  void erase(int i) {
    const auto ui = static_cast<std::size_t>(i);
    w_.erase(w_.begin() + static_cast<long>(ui));
    err_.erase(err_.begin() + static_cast<long>(ui));
    age_.erase(age_.begin() + static_cast<long>(ui));
    for (auto& row : age_) row.erase(row.begin() + static_cast<long>(ui));
  }

  void insert() {
    const int q = static_cast<int>(std::max_element(err_.begin(), err_.end()) - err_.begin());
    int f = -1;
    for (int j = 0; j < size(); ++j)
      if (edge(q, j) >= 0 && (f < 0 || err_[static_cast<std::size_t>(j)] > err_[static_cast<std::size_t>(f)])) f = j;
    if (f < 0) return;
    w_.push_back(0.5 * (w_[static_cast<std::size_t>(q)] + w_[static_cast<std::size_t>(f)]));
    for (auto& row : age_) row.push_back(-1);
    age_.emplace_back(w_.size(), -1);
    const int r = size() - 1;
    set_edge(q, f, -1);
    connect(q, r);
    connect(r, f);
    err_[static_cast<std::size_t>(q)] *= p_.insertion_error_decay;
    err_[static_cast<std::size_t>(f)] *= p_.insertion_error_decay;
    err_.push_back(err_[static_cast<std::size_t>(q)]);
  }

  GngParams p_;
  std::vector<Vec4> w_;
  std::vector<double> err_;
  std::vector<std::vector<int>> age_;
  long step_ = 0;
  double recent_sum_ = 0.0;
  long recent_n_ = 0;
};

inline int nearest(const Vec4& x, std::span<const Vec4> means) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < means.size(); ++i) {
    const double d = (x - means[i]).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace detail

/// Standard GNG over `samples`; clusters are the nodes that win at least one
/// sample after training, with mean/covariance re-estimated from their members.
inline GngResult gng_train(std::span<const Vec4> samples, const GngParams& params, Rng& rng) {
  params.validate();
  if (samples.empty()) throw Error("gng_train: empty input stream");
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);

  detail::Gng gng(params);
  gng.seed(samples[pick(rng)], samples[pick(rng)]);
  GngResult out;
  for (int e = 0; e < params.epochs; ++e) {
    std::shuffle(idx.begin(), idx.end(), rng);
    double sum = 0.0;
    for (std::size_t i : idx) sum += gng.feed(samples[i]);
    out.epoch_quantization_error.push_back(sum / static_cast<double>(samples.size()));
  }
  out.nodes = gng.nodes();

  std::vector<std::vector<std::size_t>> members(out.nodes.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    members[static_cast<std::size_t>(detail::nearest(samples[i], out.nodes))].push_back(i);
  for (const auto& m : members) {
    if (m.empty()) continue;
    DiscreteCluster c;
    c.id = static_cast<int>(out.clusters.size());
    c.hit_count = static_cast<long>(m.size());
    for (std::size_t i : m) c.mean += samples[i];
    c.mean /= static_cast<double>(m.size());
    Mat4 cov = Mat4::Zero();
    for (std::size_t i : m) cov += (samples[i] - c.mean) * (samples[i] - c.mean).transpose();
    c.covariance = cov / static_cast<double>(m.size()) + Mat4::Identity() * 1e-8;
    out.clusters.push_back(c);
  }
  return out;
}

/// Nearest cluster mean; ties go to the lowest id.
inline int assign_cluster(const GeneralizedState& x, std::span<const DiscreteCluster> clusters) {
  if (clusters.empty()) throw Error("assign_cluster: empty vocabulary");
  int best = clusters.front().id;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& c : clusters) {
    const double d = (x - c.mean).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c.id;
    }
  }
  return best;
}

/// Row-normalised transition counts with additive smoothing. Rows without
/// any count (and no smoothing) fall back to uniform.
inline Eigen::MatrixXd estimate_transitions(std::span<const int> sequence, int num_clusters, double smoothing = 1.0) {
  require(num_clusters >= 1, "num_clusters", "must be >= 1");
  if (sequence.size() < 2) throw Error("estimate_transitions: need at least two states");
  Eigen::MatrixXd counts = Eigen::MatrixXd::Constant(num_clusters, num_clusters, smoothing);
  for (std::size_t t = 1; t < sequence.size(); ++t) counts(sequence[t - 1], sequence[t]) += 1.0;
  for (int r = 0; r < num_clusters; ++r) {
    const double s = counts.row(r).sum();
    if (s > 0.0)
      counts.row(r) /= s;
    else
      counts.row(r).setConstant(1.0 / num_clusters);
  }
  return counts;
}

/// One transition matrix per time segment; each sequence is split into
/// `segments` equal phases by relative time index.
inline std::vector<Eigen::MatrixXd> estimate_transitions(const std::vector<std::vector<int>>& sequences,
                                                         int num_clusters, int segments, double smoothing = 1.0) {
  require(segments >= 1, "tau_segments", "must be >= 1");
  std::vector<Eigen::MatrixXd> counts(static_cast<std::size_t>(segments),
                                      Eigen::MatrixXd::Constant(num_clusters, num_clusters, smoothing));
  for (const auto& seq : sequences) {
    const std::size_t len = seq.size();
    for (std::size_t t = 1; t < len; ++t) {
      const auto tau = std::min<std::size_t>(static_cast<std::size_t>(segments) - 1, t * static_cast<std::size_t>(segments) / len);
      counts[tau](seq[t - 1], seq[t]) += 1.0;
    }
  }
  for (auto& c : counts)
    for (int r = 0; r < num_clusters; ++r) {
      const double s = c.row(r).sum();
      if (s > 0.0)
        c.row(r) /= s;
      else
        c.row(r).setConstant(1.0 / num_clusters);
    }
  return counts;
}

inline int segment_of(int t, int length, int segments) {
  if (length <= 0) return 0;
  return std::min(segments - 1, t * segments / length);
}

/// Long-run distribution of a row-stochastic matrix (power iteration).
inline Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& P) {
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(P.rows(), 1.0 / static_cast<double>(P.rows()));
  for (int i = 0; i < 2000; ++i) {
    const Eigen::RowVectorXd next = pi * P;
    if ((next - pi).cwiseAbs().maxCoeff() < 1e-14) {
      pi = next;
      break;
    }
    pi = next;
  }
  return pi.transpose() / pi.sum();
}

// ---------------------------------------------------------------------------
// Vocabulary learning

enum class Entity { Noise, Pu, Combined };

inline const char* to_string(Entity e) {
  switch (e) {
    case Entity::Noise: return "noise";
    case Entity::Pu: return "pu";
    case Entity::Combined: return "combined";
  }
  return "?";
}

struct Gaussian2 {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
};

struct Vocabulary {
  Entity entity = Entity::Combined;
  std::vector<DiscreteCluster> clusters;
  std::vector<Eigen::MatrixXd> transitions;  // one per tau segment
  ContinuousDynamics dynamics;
  double gng_learning_rate = 0.01;
  Gaussian2 preferred;  // long-run observation prior implied by the vocabulary

  int num_clusters() const { return static_cast<int>(clusters.size()); }
  const Eigen::MatrixXd& transition(int segment) const {
    return transitions[static_cast<std::size_t>(std::clamp(segment, 0, static_cast<int>(transitions.size()) - 1))];
  }
};

struct SignalTrace {
  std::vector<Vec2> samples;  // one observed I/Q feature per slot
};

struct TrainingSet {
  std::vector<SignalTrace> noise;
  std::vector<SignalTrace> pu;
  std::vector<SignalTrace> combined;
};

struct LearningConfig {
  GngParams gng;
  int tau_segments = 1;
  double transition_smoothing = 1.0;
  double observation_noise_std = 0.01;
  double process_noise_floor = 1e-6;
};

struct Models {
  Vocabulary noise;
  Vocabulary pu;
  Vocabulary combined;

  const Vocabulary& get(Entity e) const {
    switch (e) {
      case Entity::Noise: return noise;
      case Entity::Pu: return pu;
      default: return combined;
    }
  }
};

/// Generalized errors of the zero-control predictor along one trace.
inline std::vector<GeneralizedError> trace_errors(const SignalTrace& trace, const ContinuousDynamics& dyn) {
  std::vector<GeneralizedError> out;
  if (trace.samples.size() < 2) return out;
  GeneralizedState prev = generalized_state(trace.samples[0], trace.samples[0]);
  for (std::size_t t = 1; t < trace.samples.size(); ++t) {
    const GeneralizedState obs = generalized_state(trace.samples[t], trace.samples[t - 1]);
    out.push_back(generalized_error(ukf_predict(prev, dyn), obs));
    prev = obs;
  }
  return out;
}

namespace detail {
inline Gaussian2 preferred_prior(const std::vector<DiscreteCluster>& clusters, const Eigen::MatrixXd& P,
                                 const ObsMatrix& H) {
  const Eigen::VectorXd w = stationary_distribution(P);
  Gaussian2 g;
  g.mean.setZero();
  for (std::size_t i = 0; i < clusters.size(); ++i) g.mean += w(static_cast<long>(i)) * (H * clusters[i].mean);
  g.cov.setZero();
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    const Vec2 d = H * clusters[i].mean - g.mean;
    g.cov += w(static_cast<long>(i)) * (H * clusters[i].covariance * H.transpose() + d * d.transpose());
  }
  return g;
}
}  // namespace detail

/// UKF errors -> GNG clusters over the observed generalized states -> cluster
/// sequences -> transition matrices. Each cluster's control vector is the mean
/// generalized error of its members, so C x + U reproduces the learned motion.
inline Vocabulary learn_vocabulary(Entity entity, std::span<const SignalTrace> traces, const LearningConfig& cfg,
                                   Rng& rng) {
  if (traces.empty()) throw ConfigError(std::string("traces.") + to_string(entity), "no training traces");
  Vocabulary v;
  v.entity = entity;
  v.gng_learning_rate = cfg.gng.learning_rate;
  v.dynamics = ContinuousDynamics::constant_velocity();
  v.dynamics.R = Mat2::Identity() * cfg.observation_noise_std * cfg.observation_noise_std;

  std::vector<std::vector<GeneralizedError>> per_trace;
  std::vector<Vec4> states;
  for (const auto& tr : traces) {
    per_trace.push_back(trace_errors(tr, v.dynamics));
    for (const auto& e : per_trace.back()) states.push_back(e.reference_state);
  }
  if (states.empty()) throw ConfigError(std::string("traces.") + to_string(entity), "traces need >= 2 samples");

  auto gng = gng_train(states, cfg.gng, rng);
  v.clusters = std::move(gng.clusters);
  const int nc = v.num_clusters();

  std::vector<Vec4> sum(static_cast<std::size_t>(nc), Vec4::Zero());
  std::vector<long> cnt(static_cast<std::size_t>(nc), 0);
  std::vector<std::vector<int>> sequences;
  for (const auto& errs : per_trace) {
    std::vector<int> seq;
    for (const auto& e : errs) {
      const int c = assign_cluster(e.reference_state, v.clusters);
      seq.push_back(c);
      sum[static_cast<std::size_t>(c)] += e.at_value;
      ++cnt[static_cast<std::size_t>(c)];
    }
    if (seq.size() >= 2) sequences.push_back(std::move(seq));
  }
  v.dynamics.control.resize(static_cast<std::size_t>(nc));
  for (int c = 0; c < nc; ++c)
    v.dynamics.control[static_cast<std::size_t>(c)] =
        cnt[static_cast<std::size_t>(c)] > 0 ? Vec4(sum[static_cast<std::size_t>(c)] / static_cast<double>(cnt[static_cast<std::size_t>(c)])) : Vec4::Zero();

  Mat4 q = Mat4::Zero();
  long nq = 0;
  for (const auto& errs : per_trace)
    for (const auto& e : errs) {
      const Vec4 r = e.at_value - v.dynamics.control_for(assign_cluster(e.reference_state, v.clusters));
      q += r * r.transpose();
      ++nq;
    }
  v.dynamics.Q = q / static_cast<double>(std::max<long>(nq, 1)) + Mat4::Identity() * cfg.process_noise_floor;

  if (sequences.empty()) sequences.push_back({0, 0});
  v.transitions = estimate_transitions(sequences, nc, cfg.tau_segments, cfg.transition_smoothing);
  v.preferred = detail::preferred_prior(v.clusters, v.transitions.back(), v.dynamics.H);
  return v;
}

inline Models learn_vocabularies(const TrainingSet& traces, const LearningConfig& cfg, Rng& rng) {
  Models m;
  m.noise = learn_vocabulary(Entity::Noise, traces.noise, cfg, rng);
  m.pu = learn_vocabulary(Entity::Pu, traces.pu, cfg, rng);
  m.combined = learn_vocabulary(Entity::Combined, traces.combined, cfg, rng);
  return m;
}

/// Mean squared one-step error of the learned model (with_control) or of the
/// zero-control predictor on the given traces, using the observed cluster.
inline double mean_prediction_error(const Vocabulary& v, std::span<const SignalTrace> traces, bool with_control) {
  double s = 0.0;
  long n = 0;
  for (const auto& tr : traces)
    for (const auto& e : trace_errors(tr, v.dynamics)) {
      const Vec4 u = with_control ? Vec4(v.dynamics.D * v.dynamics.control_for(assign_cluster(e.reference_state, v.clusters)))
                                  : Vec4::Zero();
      s += (e.at_value - u).squaredNorm();
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace cnuav::gdbn
