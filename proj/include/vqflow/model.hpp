#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vqflow/codebook.hpp"

namespace vqflow {

enum class Head {
  categorical,     // G x K posterior logits over codes
  velocity,        // G x E velocity regression
  discrete_token,  // G x K logits from a masked code grid
};

const char* head_name(Head h);
Head head_from_name(const std::string& name);

struct ModelConfig {
  int G = 1;
  int K = 2;
  int E = 1;
  int hidden_width = 256;
  int hidden_layers = 2;
  Head head = Head::categorical;
  std::optional<int> num_classes;
  int time_features = 16;
  int class_embed_dim = 16;
  double class_drop_prob = 0.1;

  void validate() const;
  int input_dim() const;
  int output_dim() const;
  json to_json() const;
  static ModelConfig from_json(const json& doc);
  bool operator==(const ModelConfig&) const = default;
};

struct ParamSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Deterministic parameter layout derived from a ModelConfig.
struct ParamLayout {
  std::vector<ParamSpec> entries;
  std::vector<int> hidden_weight;
  std::vector<int> hidden_bias;
  int out_weight = -1;
  int out_bias = -1;
  int class_embed = -1;
  int null_embed = -1;
  int mask_embed = -1;
  std::size_t total = 0;

  static ParamLayout for_config(const ModelConfig& cfg);
};

/// Flat parameter vector with named views.
template <typename T>
struct Params {
  ParamLayout layout;
  std::vector<T> values;

  Eigen::Map<Mat<T>> tensor(int idx) {
    const ParamSpec& s = layout.entries[static_cast<std::size_t>(idx)];
    return {values.data() + s.offset, s.rows, s.cols};
  }
  Eigen::Map<const Mat<T>> tensor(int idx) const {
    const ParamSpec& s = layout.entries[static_cast<std::size_t>(idx)];
    return {values.data() + s.offset, s.rows, s.cols};
  }
  std::size_t size() const { return values.size(); }

  static Params zeros_like(const ParamLayout& layout) { return {layout, std::vector<T>(layout.total, T(0))}; }

  template <typename U>
  Params<U> cast() const {
    return {layout, std::vector<U>(values.begin(), values.end())};
  }
};

/// Hidden weights ~ N(0, 2/fan_in), biases zero, output layer zero,
/// embeddings ~ N(0, 1). Deterministic per seed.
template <typename T>
Params<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// One batch of network inputs. Continuous heads read `latent` (N x G*E);
/// the discrete-token head reads `tokens`. A negative label (or an empty
/// label list) selects the null-class embedding.
template <typename T>
struct ModelInput {
  Mat<T> latent;
  std::vector<MaskedGrid> tokens;
  std::vector<double> t;
  std::vector<int> labels;

  std::size_t size() const { return t.size(); }
};

template <typename T>
struct ForwardCache {
  Mat<T> input;
  std::vector<Mat<T>> pre;  // pre-activations per hidden layer
  std::vector<Mat<T>> act;  // activations per hidden layer
};

/// Sinusoidal time features: half sines, half cosines, frequencies geometric
/// from 1 to 1000.
template <typename T>
void time_features(double t, int count, T* out);

/// Rows of the output are flattened G x K logits or G x E velocities.
template <typename T>
Mat<T> forward(const Params<T>& params, const ModelConfig& cfg, const Codebook& cb, const ModelInput<T>& input,
               ForwardCache<T>* cache = nullptr);

/// Reverse-mode gradient of sum_i <grad_out_i, f(x_i)> with respect to the
/// parameters, given the cache from the matching forward pass.
template <typename T>
Params<T> backward(const Params<T>& params, const ModelConfig& cfg, const ModelInput<T>& input, const ForwardCache<T>& cache,
                   const Mat<T>& grad_out);

/// Row-wise softmax of logits / tau with max subtraction. tau >= kTauMin.
MatrixXd softmax_temp(const MatrixXd& logits, double tau);

/// Probability-weighted codebook rows, G x E. Rows of probs must sum to 1
/// within 1e-6.
MatrixXd posterior_mean(const MatrixXd& probs, const Codebook& cb);

}  // namespace vqflow
