#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "vqflow/training.hpp"

namespace vqflow {

/// Where classifier-free guidance combines conditional and null predictions.
enum class GuidanceSpace { logit, velocity };

struct SamplerConfig {
  int steps = 100;
  double tau = 0.9;
  double guidance_weight = 1.0;
  GuidanceSpace guidance_space = GuidanceSpace::logit;
  std::optional<int> label;
  int n_samples = 1000;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
  json to_json() const;
  static SamplerConfig from_json(const json& doc);
};

/// Batched velocity field: rows of z are flattened G x E states.
using VelocityField = std::function<MatrixXd(const MatrixXd& z, double t)>;

struct SampleResult {
  std::vector<CodeGrid> codes;
  MatrixXd z_final;  // N x G*E before quantization; empty for the DFM sampler
};

/// Network logits (or velocities) with classifier-free guidance applied in
/// output space: null + w * (label - null) when w != 1.
Mat<double> guided_output(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, ModelInput<double> input,
                          double w, std::optional<int> label);

/// Barycentric velocity (mu - z) / (1 - t) where mu is the codebook average
/// under softmax(logits / tau).
MatrixXd purr_velocity(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const MatrixXd& z, double t,
                       double tau, double w = 1.0, std::optional<int> label = std::nullopt,
                       GuidanceSpace space = GuidanceSpace::logit);

/// Same velocity from explicit logits, one G x K block per row of z.
MatrixXd barycentric_velocity(const Mat<double>& logits, const Codebook& cb, const MatrixXd& z, double t, double tau);

/// z_0 ~ N(0, I) per sample (substream "prior", sample index); then
/// z <- z + v(z, s/T) / T for s = 0..T-1; quantize z_T.
SampleResult euler_sample(const VelocityField& field, const Codebook& cb, int G, const SamplerConfig& scfg);

SampleResult purr_sample(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const SamplerConfig& scfg);
SampleResult cfm_sample(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const SamplerConfig& scfg);
/// Progressive unmasking from an all-MASK grid.
SampleResult dfm_sample(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const SamplerConfig& scfg);

/// Dispatches on the checkpoint's method using its EMA parameters.
SampleResult sample_checkpoint(const Checkpoint& ckpt, const SamplerConfig& scfg);

/// Writes the dataset binary, a sidecar "<path>.json" recording the sampler
/// settings, and optionally "<path>.zT.csv" with per-sample z_T norms and
/// distances to the chosen codes.
void write_samples(const std::filesystem::path& path, const SampleResult& result, const Codebook& cb, int G, const json& sidecar,
                   bool with_z_csv);

}  // namespace vqflow
