#pragma once

#include <functional>
#include <span>
#include <string>

#include "vqflow/path.hpp"
#include "vqflow/sampling.hpp"

namespace vqflow {

struct Histogram {
  int G = 0;
  int K = 0;
  std::size_t n = 0;
  std::vector<std::uint64_t> per_position;  // G x K, row-major
  std::vector<std::uint64_t> joint;         // K^G cells; empty beyond the enumeration limit

  std::uint64_t count(int g, int k) const { return per_position[static_cast<std::size_t>(g * K + k)]; }
  /// Normalized joint; requires n > 0 and an enumerable support.
  std::vector<double> joint_distribution() const;
  /// Normalized per-position distributions, G x K.
  MatrixXd marginal_distribution() const;
};

Histogram histogram(std::span<const CodeGrid> samples, int K, int G);

/// 0.5 * sum |p - q|. Both inputs must sum to 1 within 1e-6.
double tv_distance(std::span<const double> p, std::span<const double> q);
/// sum p log(p / max(q, floor)) with 0 log 0 = 0.
double kl_divergence(std::span<const double> p, std::span<const double> q, double floor = 1e-12);
/// Shannon entropy in nats.
double entropy(std::span<const double> p);

/// Mean over positions of TV between empirical and exact marginals.
double tv_marginal_mean(const Histogram& hist, const MatrixXd& exact_marginals);
/// Mean over positions of the empirical marginal entropy.
double marginal_entropy_mean(const Histogram& hist);

/// Posterior logits (tau = 1) for a batch of z_t rows (N x G*E) at times t.
using PosteriorModel = std::function<Mat<double>(const MatrixXd& zt, const std::vector<double>& t)>;

struct ProbeConfig {
  int n_probes = 1000;
  std::uint64_t seed = 0;
};

/// Mean over probes and positions of KL(bayes posterior || softmax(model)).
/// Probes (t, z_t) follow the training construction: grid ~ data, z0 ~ prior,
/// t ~ U[0, 1 - 1e-3], z_t = t * embed(grid) + (1 - t) * z0.
double posterior_fidelity(const PosteriorModel& model, const OraclePosterior& oracle, const DataSource& data,
                          const ProbeConfig& probes);
/// Checkpoint form: EMA parameters, null label, categorical head required.
double posterior_fidelity(const Checkpoint& ckpt, const ProbeConfig& probes);
/// The Bayes oracle exposed as a PosteriorModel (log-probabilities as logits).
PosteriorModel oracle_as_model(const OraclePosterior& oracle);
/// Oracle for the checkpoint's data: factorized for a single independent
/// spec, enumerated otherwise.
OraclePosterior oracle_for(const DataSource& data, const Codebook& cb);

struct SweepRow {
  double tau = 0.0;
  double tv_joint = 0.0;
  double tv_marginal_mean = 0.0;
  double entropy_mean = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

/// One row per tau (sorted by tau) from samples of a categorical-head
/// checkpoint. tv_joint is NaN when the support is not enumerable.
std::vector<SweepRow> temperature_sweep(const Checkpoint& ckpt, std::vector<double> taus, const SamplerConfig& scfg);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct CompareConfig {
  int eval_every = 1000;
  SamplerConfig sampler;  // n_samples used at every evaluation
};

struct CompareRow {
  Method method = Method::purrception;
  std::int64_t iteration = 0;
  double tv_joint = 0.0;
  double tv_marginal_mean = 0.0;
  double wall_ms = 0.0;
};

/// Trains every config side by side and evaluates TV of generated samples to
/// the exact joint at each multiple of eval_every and at the final iteration.
/// Configs must share data, codebook, seed and iteration budget.
std::vector<CompareRow> convergence_compare(const std::vector<TrainConfig>& runs, const CompareConfig& cfg);
std::string compare_csv(const std::vector<CompareRow>& rows);

}  // namespace vqflow
