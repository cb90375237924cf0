#include "vqflow/path.hpp"

#include <cmath>
#include <limits>
#include <ostream>

namespace vqflow {

namespace {

void check_time(double t, const char* where) {
  if (!(t >= 0.0) || t > 1.0 - kTimeGuard) {
    throw std::invalid_argument(std::string(where) + ": t must lie in [0, 1 - 1e-3]");
  }
}

void check_same_shape(const LatentPoint& a, const LatentPoint& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(where) + ": shape mismatch");
}

double safe_log(double p) { return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity(); }

// Gaussian log-likelihood of each code at each position, up to a constant.
MatrixXd code_log_likelihood(const Codebook& cb, const LatentPoint& zt, double t) {
  const double s = 1.0 - t;
  const double inv_two_var = 1.0 / (2.0 * s * s);
  MatrixXd ll(zt.rows(), cb.size());
  for (Eigen::Index g = 0; g < zt.rows(); ++g) {
    for (int k = 0; k < cb.size(); ++k) ll(g, k) = -(zt.row(g) - t * cb.row(k)).squaredNorm() * inv_two_var;
  }
  return ll;
}

// Normalizes each row of log-weights in place; returns log-probabilities.
void log_normalize_rows(MatrixXd& logw) {
  for (Eigen::Index g = 0; g < logw.rows(); ++g) {
    const double m = logw.row(g).maxCoeff();
    const double lse = m + std::log((logw.row(g).array() - m).exp().sum());
    logw.row(g).array() -= lse;
  }
}

}  // namespace

LatentPoint sample_prior(int G, int E, Rng& rng) {
  if (G < 1 || E < 1) throw std::invalid_argument("sample_prior: G and E must be >= 1");
  std::normal_distribution<double> normal;
  LatentPoint z(G, E);
  for (int g = 0; g < G; ++g) {
    for (int e = 0; e < E; ++e) z(g, e) = normal(rng);
  }
  return z;
}

LatentPoint sample_prior(int G, int E, std::uint64_t seed) {
  Rng rng = make_rng(seed, "prior");
  return sample_prior(G, E, rng);
}

double sample_time(Rng& rng) { return uniform01(rng) * (1.0 - kTimeGuard); }

double sample_time(std::uint64_t seed) {
  Rng rng = make_rng(seed, "time");
  return sample_time(rng);
}

LatentPoint interpolate(const LatentPoint& z0, const LatentPoint& z1, double t) {
  check_same_shape(z0, z1, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate: t must lie in [0, 1]");
  return t * z1 + (1.0 - t) * z0;
}

LatentPoint conditional_velocity(const LatentPoint& zt, const LatentPoint& z1, double t) {
  check_same_shape(zt, z1, "conditional_velocity");
  check_time(t, "conditional_velocity");
  return (z1 - zt) / (1.0 - t);
}

// ---------------------------------------------------------------------------

OraclePosterior::OraclePosterior(const DataSpec& spec, Codebook cb) : kind_(Kind::enumerated), cb_(std::move(cb)), G_(spec.G) {
  spec.validate();
  if (spec.K != cb_.size()) throw ConfigError("oracle: data spec K does not match codebook");
  if (spec.kind == DataSpec::Kind::independent) {
    kind_ = Kind::independent_factorized;
    log_marginals_ = spec.probs.unaryExpr([](double p) { return safe_log(p); });
    return;
  }
  const JointTable joint = exact_joint(spec);
  grids_.reserve(joint.p.size());
  log_joint_.reserve(joint.p.size());
  for (std::size_t i = 0; i < joint.p.size(); ++i) {
    if (joint.p[i] <= 0.0) continue;
    grids_.push_back(joint.grid(i));
    log_joint_.push_back(std::log(joint.p[i]));
  }
}

OraclePosterior::OraclePosterior(JointTable joint, Codebook cb) : kind_(Kind::enumerated), cb_(std::move(cb)), G_(joint.G) {
  if (joint.K != cb_.size()) throw ConfigError("oracle: joint K does not match codebook");
  for (std::size_t i = 0; i < joint.p.size(); ++i) {
    if (joint.p[i] <= 0.0) continue;
    grids_.push_back(joint.grid(i));
    log_joint_.push_back(std::log(joint.p[i]));
  }
}

MatrixXd OraclePosterior::log_posterior(const LatentPoint& zt, double t) const {
  if (zt.rows() != G_ || zt.cols() != cb_.dim()) throw std::invalid_argument("oracle: z_t must be G x E");
  check_time(t, "oracle");
  const MatrixXd ll = code_log_likelihood(cb_, zt, t);

  if (kind_ == Kind::independent_factorized) {
    MatrixXd logw = log_marginals_ + ll;
    log_normalize_rows(logw);
    return logw;
  }

  std::vector<double> logw(grids_.size());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grids_.size(); ++i) {
    double w = log_joint_[i];
    for (int g = 0; g < G_; ++g) w += ll(g, grids_[i][g]);
    logw[i] = w;
    m = std::max(m, w);
  }
  MatrixXd probs = MatrixXd::Zero(G_, cb_.size());
  double total = 0.0;
  for (std::size_t i = 0; i < grids_.size(); ++i) {
    const double w = std::exp(logw[i] - m);
    total += w;
    for (int g = 0; g < G_; ++g) probs(g, grids_[i][g]) += w;
  }
  probs /= total;
  return probs.unaryExpr([](double p) { return safe_log(p); });
}

MatrixXd OraclePosterior::posterior(const LatentPoint& zt, double t) const {
  MatrixXd p = log_posterior(zt, t).array().exp().matrix();
  // Renormalize away the last ulp so rows sum to 1 as tightly as possible.
  for (Eigen::Index g = 0; g < p.rows(); ++g) p.row(g) /= p.row(g).sum();
  return p;
}

LatentPoint OraclePosterior::marginal_velocity(const LatentPoint& zt, double t) const {
  const MatrixXd probs = posterior(zt, t);
  LatentPoint v = LatentPoint::Zero(zt.rows(), zt.cols());
  const double inv = 1.0 / (1.0 - t);
  for (Eigen::Index g = 0; g < zt.rows(); ++g) {
    for (int k = 0; k < cb_.size(); ++k) v.row(g) += probs(g, k) * (cb_.row(k) - zt.row(g)) * inv;
  }
  return v;
}

MatrixXd bayes_posterior(const OraclePosterior& oracle, const LatentPoint& zt, double t) { return oracle.posterior(zt, t); }

LatentPoint oracle_marginal_velocity(const OraclePosterior& oracle, const LatentPoint& zt, double t) {
  return oracle.marginal_velocity(zt, t);
}

void write_posterior_csv(std::ostream& out, double t, const MatrixXd& probs, bool header) {
  if (header) out << "t,position,code,probability\n";
  const auto old = out.precision(17);
  for (Eigen::Index g = 0; g < probs.rows(); ++g) {
    for (Eigen::Index k = 0; k < probs.cols(); ++k) out << t << ',' << g << ',' << k << ',' << probs(g, k) << '\n';
  }
  out.precision(old);
}

}  // namespace vqflow
