#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>

#include "vqflow/gradients.hpp"

namespace vqflow {

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  int batch_size = 128;
  int iterations = 0;
  double ema_decay = 0.9999;
  // Effective EMA decay min(ema_decay, (1+n)/(10+n)) at update n.
  bool ema_warmup = true;

  void validate() const;
  json to_json() const;
  static OptimConfig from_json(const json& doc);
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  static AdamState zeros(std::size_t n) { return {std::vector<T>(n, T(0)), std::vector<T>(n, T(0)), 0}; }
};

/// Bias-corrected Adam update with decoupled weight decay (params are first
/// scaled by 1 - lr * weight_decay). Non-finite gradients throw NumericalError
/// before anything is modified.
template <typename T>
void optim_step(Params<T>& params, const Params<T>& grads, AdamState<T>& state, const OptimConfig& cfg);

/// ema <- decay * ema + (1 - decay) * params.
template <typename T>
void ema_update(Params<T>& ema, const Params<T>& params, double decay);

/// Decay used for the n-th EMA update (1-based).
double ema_decay_at(const OptimConfig& cfg, std::int64_t n);

struct LoggingConfig {
  int log_every = 100;
  int ckpt_every = 0;  // 0: final checkpoint only
  bool wall_clock = false;

  void validate() const;
  json to_json() const;
  static LoggingConfig from_json(const json& doc);
};

struct TrainConfig {
  Method method = Method::purrception;
  ModelConfig model;
  OptimConfig optim;
  double z_coeff = kDefaultZCoeff;
  DataSource data;
  std::shared_ptr<const Codebook> codebook;
  LoggingConfig logging;
  std::uint64_t seed = 0;

  /// Fills model G/K/E and head from the data, codebook and method, then
  /// checks cross-section consistency.
  void finalize();
  void validate() const;
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  Method method = Method::purrception;
  ModelConfig model;
  OptimConfig optim;
  double z_coeff = kDefaultZCoeff;
  DataSource data;
  std::shared_ptr<const Codebook> codebook;
  std::uint64_t seed = 0;
  std::int64_t iteration = 0;
  Params<float> params;
  Params<float> ema;
  AdamState<float> adam;

  /// Canonical JSON of everything that defines the run.
  json config_json() const;
  std::string config_hash() const;
  /// Inference parameters (the EMA copy) promoted to double.
  Params<double> inference_params() const { return ema.cast<double>(); }
};

/// Throws ConfigError naming both tags when the checkpoint's method differs.
void require_method(const Checkpoint& ckpt, Method expected);

/// Layout: "PURRCKPT", u32 header length, UTF-8 JSON header, then
/// little-endian f32 arrays (params, ema, adam_m, adam_v) in manifest order.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct MetricsRow {
  std::int64_t iteration = 0;
  double wall_ms = 0.0;
  double loss_total = 0.0;
  double loss_primary = 0.0;
  double loss_z = 0.0;
  double grad_norm = 0.0;
  double mean_log2z = 0.0;
};

const char* metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

/// Iteration-by-iteration training driver.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  /// One optimization step; returns the metrics of that step.
  MetricsRow step();
  std::int64_t iteration() const { return iteration_; }
  const TrainConfig& config() const { return cfg_; }
  const Params<float>& params() const { return params_; }
  const Params<float>& ema() const { return ema_; }
  double train_ms() const { return train_ms_; }
  Checkpoint checkpoint() const;

 private:
  Batch<float> draw_batch();

  TrainConfig cfg_;
  Params<float> params_;
  Params<float> ema_;
  AdamState<float> adam_;
  std::int64_t iteration_ = 0;
  int consecutive_bad_ = 0;
  double train_ms_ = 0.0;
  Rng data_rng_;
  Rng label_rng_;
  Rng time_rng_;
  Rng prior_rng_;
  Rng corrupt_rng_;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
};

/// Runs cfg.optim.iterations steps. With an output directory, appends rows
/// to metrics.csv as they are logged and writes ckpt_<iteration>.ckpt every
/// ckpt_every iterations plus ckpt_final.ckpt at the end.
TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace vqflow
