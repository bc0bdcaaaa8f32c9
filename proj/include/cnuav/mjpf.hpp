#pragma once

// Online inference: a Markov jump particle filter with one Kalman filter per
// particle, message passing between the levels, and Bhattacharyya abnormality.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <random>
#include <vector>

#include "cnuav/error.hpp"
#include "cnuav/gdbn.hpp"

namespace cnuav::mjpf {

using gdbn::ContinuousDynamics;
using gdbn::Mat2;
using gdbn::Mat4;
using gdbn::Vec2;
using gdbn::Vec4;

struct Particle {
  int cluster = 0;
  Vec4 kf_mean = Vec4::Zero();
  Mat4 kf_cov = Mat4::Identity();
  double weight = 1.0;
};

struct BeliefState {
  std::vector<Particle> particles;

  int size() const { return static_cast<int>(particles.size()); }
  double weight_sum() const {
    double s = 0.0;
    for (const auto& p : particles) s += p.weight;
    return s;
  }
  double effective_sample_size() const {
    double s2 = 0.0;
    for (const auto& p : particles) s2 += p.weight * p.weight;
    return s2 > 0.0 ? 1.0 / s2 : 0.0;
  }
};

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct Messages {
  Gaussian pi_x;            // predicted continuous state (moment-matched)
  Gaussian lambda_x;        // observation likelihood, in observation space
  Gaussian pi_x_obs;        // pi_x mapped through H
  Eigen::VectorXd pi_s;     // predicted cluster weights
  Eigen::VectorXd lambda_s; // updated cluster weights
};

enum class Combiner { Sum, Max };

inline double combine(double continuous, double discrete, Combiner c) {
  return c == Combiner::Max ? std::max(continuous, discrete) : continuous + discrete;
}

namespace detail {
inline void symmetrize(Mat4& m) { m = 0.5 * (m + m.transpose()).eval(); }

inline void check_psd(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.eigenvalues().minCoeff() < -1e-10) throw ModelError(std::string(what) + ": covariance not PSD");
}
}  // namespace detail

/// Uniformly weighted particles around `mean` with clusters drawn from `prior`.
inline BeliefState init_belief(int L, const Vec4& mean, const Mat4& cov, const Eigen::VectorXd& prior, Rng& rng) {
  require(L >= 1, "num_particles", "must be >= 1");
  BeliefState b;
  std::discrete_distribution<int> d(prior.data(), prior.data() + prior.size());
  for (int i = 0; i < L; ++i) b.particles.push_back({d(rng), mean, cov, 1.0 / L});
  return b;
}

inline BeliefState pf_predict(BeliefState belief, const Eigen::MatrixXd& transition, Rng& rng) {
  std::vector<std::discrete_distribution<int>> rows;
  for (int r = 0; r < transition.rows(); ++r) {
    const Eigen::VectorXd row = transition.row(r).transpose();
    rows.emplace_back(row.data(), row.data() + row.size());
  }
  for (auto& p : belief.particles) {
    const int c = std::clamp(p.cluster, 0, static_cast<int>(transition.rows()) - 1);
    p.cluster = rows[static_cast<std::size_t>(c)](rng);
  }
  return belief;
}

inline Particle kf_predict(Particle p, const ContinuousDynamics& dyn) {
  p.kf_mean = dyn.C * p.kf_mean + dyn.D * dyn.control_for(p.cluster);
  p.kf_cov = dyn.C * p.kf_cov * dyn.C.transpose() + dyn.Q;
  detail::symmetrize(p.kf_cov);
  return p;
}

struct UpdateResult {
  Particle particle;
  double log_likelihood = 0.0;
};

inline UpdateResult kf_update(Particle p, const Vec2& z, const ContinuousDynamics& dyn) {
  const Vec2 innov = z - dyn.H * p.kf_mean;
  const Mat2 S = dyn.H * p.kf_cov * dyn.H.transpose() + dyn.R;
  Eigen::LLT<Mat2> llt(S);
  if (llt.info() != Eigen::Success || S.determinant() <= 0.0)
    throw ModelError("kf_update: singular innovation covariance (check R and particle covariance)");
  const Eigen::Matrix<double, 4, 2> K = p.kf_cov * dyn.H.transpose() * llt.solve(Mat2::Identity());
  p.kf_mean += K * innov;
  const Mat4 IKH = Mat4::Identity() - K * dyn.H;
  p.kf_cov = IKH * p.kf_cov * IKH.transpose() + K * dyn.R * K.transpose();  // Joseph form
  detail::symmetrize(p.kf_cov);
  const double maha = innov.dot(llt.solve(innov));
  const Mat2 L = llt.matrixL();
  const double logdet = 2.0 * L.diagonal().array().log().sum();
  return {p, -0.5 * (maha + logdet + 2.0 * std::log(2.0 * std::numbers::pi))};
}

/// Closed-form Bhattacharyya distance between two Gaussians, -ln BC >= 0.
inline double abnormality(const Gaussian& a, const Gaussian& b) {
  if (a.mean.size() != b.mean.size()) throw Error("abnormality: dimension mismatch");
  detail::check_psd(a.cov, "abnormality");
  detail::check_psd(b.cov, "abnormality");
  const Eigen::MatrixXd S = 0.5 * (a.cov + b.cov);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  const Eigen::VectorXd d = a.mean - b.mean;
  const double maha = d.dot(ldlt.solve(d));
  const double ld_s = std::log(S.determinant());
  const double ld_a = std::log(a.cov.determinant());
  const double ld_b = std::log(b.cov.determinant());
  return std::max(0.0, 0.125 * maha + 0.5 * (ld_s - 0.5 * (ld_a + ld_b)));
}

/// -ln sum sqrt(p q) on two discrete distributions.
inline double discrete_abnormality(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size()) throw Error("discrete_abnormality: dimension mismatch");
  const double bc = (p.cwiseProduct(q)).cwiseSqrt().sum();
  return bc > 0.0 ? std::max(0.0, -std::log(std::min(1.0, bc))) : std::numeric_limits<double>::infinity();
}

/// Systematic resampling, applied only when ESS < L/2.
inline BeliefState resample(BeliefState belief, Rng& rng, bool force = false) {
  const double total = belief.weight_sum();
  if (!(total > 0.0)) throw ModelError("resample: all particle weights are zero (total model mismatch)");
  const int L = belief.size();
  if (!force && belief.effective_sample_size() >= 0.5 * L) return belief;
  std::uniform_real_distribution<double> u(0.0, 1.0 / L);
  const double start = u(rng);
  BeliefState out;
  out.particles.reserve(static_cast<std::size_t>(L));
  double cum = belief.particles[0].weight / total;
  std::size_t i = 0;
  for (int j = 0; j < L; ++j) {
    const double pos = start + static_cast<double>(j) / L;
    while (pos > cum && i + 1 < belief.particles.size()) cum += belief.particles[++i].weight / total;
    Particle p = belief.particles[i];
    p.weight = 1.0 / L;
    out.particles.push_back(p);
  }
  return out;
}

inline Eigen::VectorXd cluster_weights(const BeliefState& b, int num_clusters) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(num_clusters);
  for (const auto& p : b.particles)
    if (p.cluster >= 0 && p.cluster < num_clusters) w(p.cluster) += p.weight;
  const double s = w.sum();
  return s > 0.0 ? Eigen::VectorXd(w / s) : Eigen::VectorXd::Constant(num_clusters, 1.0 / num_clusters);
}

inline Gaussian moment_match(const BeliefState& b) {
  Vec4 mean = Vec4::Zero();
  const double total = b.weight_sum();
  for (const auto& p : b.particles) mean += p.weight / total * p.kf_mean;
  Mat4 cov = Mat4::Zero();
  for (const auto& p : b.particles) {
    const Vec4 d = p.kf_mean - mean;
    cov += p.weight / total * (p.kf_cov + d * d.transpose());
  }
  return {mean, cov};
}

/// `predicted` is the belief after kf_predict; `updated` after reweighting.
inline Messages compute_messages(const BeliefState& predicted, const BeliefState& updated, const Vec2& z,
                                 const ContinuousDynamics& dyn, int num_clusters) {
  Messages m;
  m.pi_x = moment_match(predicted);
  m.pi_x_obs = {dyn.H * m.pi_x.mean, dyn.H * m.pi_x.cov * dyn.H.transpose()};
  m.lambda_x = {z, dyn.R};
  m.pi_s = cluster_weights(predicted, num_clusters);
  m.lambda_s = cluster_weights(updated, num_clusters);
  return m;
}

struct SliceResult {
  BeliefState belief;
  double continuous = 0.0;
  double discrete = 0.0;
  Messages messages;
};

/// One filter slice: discrete prediction, per-particle KF prediction and
/// update, reweighting, conditional resampling, messages and abnormalities.
inline SliceResult belief_update(const BeliefState& belief, const Vec2& z, const gdbn::Vocabulary& vocab,
                                 int segment, Rng& rng) {
  const auto& dyn = vocab.dynamics;
  BeliefState pred = pf_predict(belief, vocab.transition(segment), rng);
  for (auto& p : pred.particles) p = kf_predict(p, dyn);

  BeliefState upd = pred;
  std::vector<double> logw(upd.particles.size());
  for (std::size_t i = 0; i < upd.particles.size(); ++i) {
    auto r = kf_update(upd.particles[i], z, dyn);
    logw[i] = std::log(std::max(upd.particles[i].weight, 1e-300)) + r.log_likelihood;
    upd.particles[i] = r.particle;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logw.size(); ++i) total += (upd.particles[i].weight = std::exp(logw[i] - mx));
  for (auto& p : upd.particles) p.weight /= total;

  SliceResult out;
  out.messages = compute_messages(pred, upd, z, dyn, vocab.num_clusters());
  out.continuous = abnormality({out.messages.pi_x_obs.mean, out.messages.pi_x_obs.cov}, out.messages.lambda_x);
  out.discrete = discrete_abnormality(out.messages.pi_s, out.messages.lambda_s);
  out.belief = resample(std::move(upd), rng);
  return out;
}

/// Belief seeded at an observed sample, clusters from the vocabulary's
/// long-run distribution.
inline BeliefState init_belief(int L, const Vec2& z, const gdbn::Vocabulary& vocab, Rng& rng) {
  Vec4 mean = Vec4::Zero();
  mean.head<2>() = z;
  Mat4 cov = vocab.dynamics.Q;
  cov.topLeftCorner<2, 2>() += vocab.dynamics.R;
  return init_belief(L, mean, cov, gdbn::stationary_distribution(vocab.transition(0)), rng);
}

}  // namespace cnuav::mjpf
