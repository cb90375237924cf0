#pragma once

#include <iosfwd>

#include "vqflow/codebook.hpp"

namespace vqflow {

/// Standard-normal prior sample, G x E.
LatentPoint sample_prior(int G, int E, std::uint64_t seed);
LatentPoint sample_prior(int G, int E, Rng& rng);

/// Uniform on [0, 1 - kTimeGuard].
double sample_time(std::uint64_t seed);
double sample_time(Rng& rng);

/// t * z1 + (1 - t) * z0.
LatentPoint interpolate(const LatentPoint& z0, const LatentPoint& z1, double t);

/// Straight-line velocity toward a fixed endpoint, (z1 - zt) / (1 - t).
LatentPoint conditional_velocity(const LatentPoint& zt, const LatentPoint& z1, double t);

/// Closed-form posterior over code grids given z_t for the linear path with a
/// standard-normal prior: z_t | c ~ N(t * embed(c), (1 - t)^2 I).
class OraclePosterior {
 public:
  enum class Kind { enumerated, independent_factorized };

  /// Factorized when the spec is independent, enumerated otherwise.
  OraclePosterior(const DataSpec& spec, Codebook cb);
  /// Enumerated over an arbitrary joint (e.g. a class mixture).
  OraclePosterior(JointTable joint, Codebook cb);

  Kind kind() const { return kind_; }
  const Codebook& codebook() const { return cb_; }
  int G() const { return G_; }
  int K() const { return cb_.size(); }

  /// Per-position marginals of p(c | z_t), G x K; rows sum to 1.
  MatrixXd posterior(const LatentPoint& zt, double t) const;
  /// Log of the same marginals (finite where the prior has support).
  MatrixXd log_posterior(const LatentPoint& zt, double t) const;
  /// Posterior-expected conditional velocity, G x E, as the weighted sum
  /// over codes of (e_k - z) / (1 - t).
  LatentPoint marginal_velocity(const LatentPoint& zt, double t) const;

 private:
  Kind kind_;
  Codebook cb_;
  int G_;
  MatrixXd log_marginals_;           // factorized: G x K log prior
  std::vector<double> log_joint_;    // enumerated
  std::vector<CodeGrid> grids_;      // enumerated
};

/// Equivalent to OraclePosterior::posterior.
MatrixXd bayes_posterior(const OraclePosterior& oracle, const LatentPoint& zt, double t);
LatentPoint oracle_marginal_velocity(const OraclePosterior& oracle, const LatentPoint& zt, double t);

/// Diagnostic dump: "t,position,code,probability" rows (header written when
/// `header` is true).
void write_posterior_csv(std::ostream& out, double t, const MatrixXd& probs, bool header = true);

}  // namespace vqflow
