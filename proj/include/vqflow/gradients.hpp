#pragma once

#include "vqflow/model.hpp"
#include "vqflow/objectives.hpp"

namespace vqflow {

/// Model head each training method drives.
Head head_for(Method m);

struct LossSettings {
  Method method = Method::purrception;
  double z_coeff = kDefaultZCoeff;
};

/// A training batch. `input.latent` holds z_t rows for the continuous heads,
/// `input.tokens` the corrupted grids for the discrete head. CFM also needs
/// the path endpoints z0 and z1 (N x G*E).
template <typename T>
struct Batch {
  ModelInput<T> input;
  std::vector<CodeGrid> targets;
  MatrixXd z0;
  MatrixXd z1;

  std::size_t size() const { return targets.size(); }
};

template <typename T>
struct BatchResult {
  LossReport report;  // batch means; per_position averaged over the batch
  Params<T> grads;    // gradient of the batch-mean total loss
};

/// Batch-mean loss for the method and, when `want_grad`, its exact gradient
/// by reverse mode through the network.
template <typename T>
BatchResult<T> loss_and_grad(const Params<T>& params, const ModelConfig& cfg, const Codebook& cb, const Batch<T>& batch,
                             const LossSettings& loss, bool want_grad = true);

struct GradCheckOptions {
  double epsilon = 1e-5;
  int coordinates = 200;
  std::uint64_t seed = 0;
};

/// Largest relative error |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|) over
/// randomly chosen coordinates, using central differences.
double grad_check(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const Batch<double>& batch,
                  const LossSettings& loss, const GradCheckOptions& opts = {});

}  // namespace vqflow
