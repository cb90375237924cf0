#include "vqflow/training.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <spdlog/spdlog.h>

#include "vqflow/path.hpp"

namespace vqflow {

namespace {

constexpr std::string_view kCheckpointMagic = "PURRCKPT";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, const std::vector<float>& values) {
  for (float f : values) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(out, bits);
  }
}

std::vector<float> get_floats(std::string_view in, std::size_t at, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = get_u32(in, at + 4 * i);
    std::memcpy(&out[i], &bits, sizeof bits);
  }
  return out;
}

double l2_norm(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Optimizer and EMA

void OptimConfig::validate() const {
  if (!(lr > 0.0) || !(eps > 0.0)) throw ConfigError("optim: lr and eps must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim: betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("optim: batch_size must be >= 1");
  if (iterations < 0) throw ConfigError("optim: iterations must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("optim: ema_decay must lie in [0, 1]");
}

json OptimConfig::to_json() const {
  return json{{"lr", lr},
              {"weight_decay", weight_decay},
              {"beta1", beta1},
              {"beta2", beta2},
              {"eps", eps},
              {"batch_size", batch_size},
              {"iterations", iterations},
              {"ema_decay", ema_decay},
              {"ema_warmup", ema_warmup}};
}

OptimConfig OptimConfig::from_json(const json& doc) {
  OptimConfig c;
  c.lr = doc.value("lr", c.lr);
  c.weight_decay = doc.value("weight_decay", c.weight_decay);
  c.beta1 = doc.value("beta1", c.beta1);
  c.beta2 = doc.value("beta2", c.beta2);
  c.eps = doc.value("eps", c.eps);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.iterations = doc.value("iterations", c.iterations);
  c.ema_decay = doc.value("ema_decay", c.ema_decay);
  c.ema_warmup = doc.value("ema_warmup", c.ema_warmup);
  c.validate();
  return c;
}

template <typename T>
void optim_step(Params<T>& params, const Params<T>& grads, AdamState<T>& state, const OptimConfig& cfg) {
  const std::size_t n = params.size();
  if (grads.size() != n || state.m.size() != n || state.v.size() != n) throw std::invalid_argument("optim_step: layout mismatch");
  for (T g : grads.values) {
    if (!std::isfinite(g)) throw NumericalError("optim_step: non-finite gradient at step " + std::to_string(state.step + 1));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T decay = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
  const T step_size = static_cast<T>(cfg.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < n; ++i) {
    const T g = grads.values[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    params.values[i] *= decay;
    params.values[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps);
  }
}

template <typename T>
void ema_update(Params<T>& ema, const Params<T>& params, double decay) {
  if (ema.size() != params.size()) throw std::invalid_argument("ema_update: layout mismatch");
  if (decay == 1.0) return;
  const T d = static_cast<T>(decay);
  const T keep = static_cast<T>(1.0 - decay);
  for (std::size_t i = 0; i < ema.size(); ++i) ema.values[i] = d * ema.values[i] + keep * params.values[i];
}

double ema_decay_at(const OptimConfig& cfg, std::int64_t n) {
  if (!cfg.ema_warmup) return cfg.ema_decay;
  const double warm = (1.0 + static_cast<double>(n)) / (10.0 + static_cast<double>(n));
  return std::min(cfg.ema_decay, warm);
}

template void optim_step<float>(Params<float>&, const Params<float>&, AdamState<float>&, const OptimConfig&);
template void optim_step<double>(Params<double>&, const Params<double>&, AdamState<double>&, const OptimConfig&);
template void ema_update<float>(Params<float>&, const Params<float>&, double);
template void ema_update<double>(Params<double>&, const Params<double>&, double);

// ---------------------------------------------------------------------------
// Configs

void LoggingConfig::validate() const {
  if (log_every < 1) throw ConfigError("logging: log_every must be >= 1");
  if (ckpt_every < 0) throw ConfigError("logging: ckpt_every must be >= 0");
}

json LoggingConfig::to_json() const {
  return json{{"log_every", log_every}, {"ckpt_every", ckpt_every}, {"wall_clock", wall_clock}};
}

LoggingConfig LoggingConfig::from_json(const json& doc) {
  LoggingConfig c;
  c.log_every = doc.value("log_every", c.log_every);
  c.ckpt_every = doc.value("ckpt_every", c.ckpt_every);
  c.wall_clock = doc.value("wall_clock", c.wall_clock);
  c.validate();
  return c;
}

void TrainConfig::finalize() {
  if (!codebook) throw ConfigError("train: no codebook");
  data.validate();
  model.G = data.G();
  model.K = data.K();
  model.E = codebook->dim();
  model.head = head_for(method);
  validate();
}

void TrainConfig::validate() const {
  if (!codebook) throw ConfigError("train: no codebook");
  data.validate();
  model.validate();
  optim.validate();
  logging.validate();
  if (codebook->size() != data.K()) throw ConfigError("train: codebook K does not match data K");
  if (model.G != data.G() || model.K != data.K() || model.E != codebook->dim()) throw ConfigError("train: model shape disagrees with data/codebook");
  if (model.head != head_for(method)) throw ConfigError("train: model head does not match method");
  if (data.num_classes() > 1 && model.num_classes && *model.num_classes != data.num_classes()) {
    throw ConfigError("train: model.num_classes does not match the number of data classes");
  }
  if (model.num_classes && *model.num_classes > 1 && data.num_classes() == 1) {
    throw ConfigError("train: class-conditional model needs labeled data (data.classes)");
  }
  if (!(z_coeff >= 0.0)) throw ConfigError("loss: z_coeff must be >= 0");
}

// ---------------------------------------------------------------------------
// Checkpoint

json Checkpoint::config_json() const {
  return json{{"method", method_name(method)},
              {"model", model.to_json()},
              {"optim", optim.to_json()},
              {"loss", json{{"z_coeff", z_coeff}}},
              {"data", data.to_json()},
              {"codebook", codebook->to_json()},
              {"seed", seed}};
}

std::string Checkpoint::config_hash() const { return hex64(fnv1a64(config_json().dump())); }

void require_method(const Checkpoint& ckpt, Method expected) {
  if (ckpt.method != expected) {
    throw ConfigError(std::string("checkpoint method tag '") + method_name(ckpt.method) + "' but '" + method_name(expected) +
                      "' is required");
  }
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const std::size_t n = ckpt.params.size();
  if (ckpt.ema.size() != n || ckpt.adam.m.size() != n || ckpt.adam.v.size() != n) {
    throw std::invalid_argument("serialize_checkpoint: inconsistent array lengths");
  }
  std::string payload;
  payload.reserve(16 * n);
  put_floats(payload, ckpt.params.values);
  put_floats(payload, ckpt.ema.values);
  put_floats(payload, ckpt.adam.m);
  put_floats(payload, ckpt.adam.v);

  json layout = json::array();
  for (const ParamSpec& s : ckpt.params.layout.entries) layout.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  json arrays = json::array();
  for (const char* name : {"params", "ema", "adam_m", "adam_v"}) arrays.push_back({{"name", name}, {"dtype", "f32"}, {"count", n}});

  const json header{{"format_version", Checkpoint::kFormatVersion},
                    {"method", method_name(ckpt.method)},
                    {"config", ckpt.config_json()},
                    {"config_hash", ckpt.config_hash()},
                    {"iteration", ckpt.iteration},
                    {"adam_step", ckpt.adam.step},
                    {"layout", layout},
                    {"arrays", arrays},
                    {"payload_hash", hex64(fnv1a64(payload))}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out += payload;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || bytes.compare(0, 8, kCheckpointMagic) != 0) throw FormatError("checkpoint: bad magic");
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) throw FormatError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (header.value("format_version", 0) != Checkpoint::kFormatVersion) throw FormatError("checkpoint: unsupported format version");

  const std::string_view payload = std::string_view(bytes).substr(12 + header_len);
  Checkpoint ckpt;
  try {
    const json& cfg = header.at("config");
    ckpt.method = method_from_name(cfg.at("method").get<std::string>());
    ckpt.model = ModelConfig::from_json(cfg.at("model"));
    ckpt.optim = OptimConfig::from_json(cfg.at("optim"));
    ckpt.z_coeff = cfg.at("loss").at("z_coeff").get<double>();
    ckpt.data = DataSource::from_json(cfg.at("data"));
    ckpt.codebook = std::make_shared<const Codebook>(Codebook::from_json(cfg.at("codebook")));
    ckpt.seed = cfg.at("seed").get<std::uint64_t>();
    ckpt.iteration = header.at("iteration").get<std::int64_t>();
    if (ckpt.config_hash() != header.at("config_hash").get<std::string>()) throw FormatError("checkpoint: config hash mismatch");
    if (header.at("method").get<std::string>() != method_name(ckpt.method)) throw FormatError("checkpoint: method tag mismatch");

    const ParamLayout layout = ParamLayout::for_config(ckpt.model);
    const auto& arrays = header.at("arrays");
    if (arrays.size() != 4) throw FormatError("checkpoint: expected 4 arrays");
    for (const json& a : arrays) {
      if (a.at("count").get<std::size_t>() != layout.total) throw FormatError("checkpoint: array length does not match model");
    }
    if (payload.size() != 16 * layout.total) throw FormatError("checkpoint: truncated or oversized payload");
    if (hex64(fnv1a64(payload)) != header.at("payload_hash").get<std::string>()) throw FormatError("checkpoint: payload hash mismatch");

    ckpt.params = {layout, get_floats(payload, 0, layout.total)};
    ckpt.ema = {layout, get_floats(payload, 4 * layout.total, layout.total)};
    ckpt.adam.m = get_floats(payload, 8 * layout.total, layout.total);
    ckpt.adam.v = get_floats(payload, 12 * layout.total, layout.total);
    ckpt.adam.step = header.at("adam_step").get<std::int64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path.string(), serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path.string())); }

// ---------------------------------------------------------------------------
// Metrics

const char* metrics_csv_header() { return "iteration,wall_ms,loss_total,loss_primary,loss_z,grad_norm,mean_log2Z"; }

std::string metrics_csv_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.3f,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.iteration), r.wall_ms,
                r.loss_total, r.loss_primary, r.loss_z, r.grad_norm, r.mean_log2z);
  return buf;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig cfg)
    : cfg_(std::move(cfg)),
      data_rng_(make_rng(cfg_.seed, "data")),
      label_rng_(make_rng(cfg_.seed, "label")),
      time_rng_(make_rng(cfg_.seed, "time")),
      prior_rng_(make_rng(cfg_.seed, "prior")),
      corrupt_rng_(make_rng(cfg_.seed, "corrupt")) {
  cfg_.validate();
  params_ = init_params<float>(cfg_.model, derive_seed(cfg_.seed, "init"));
  ema_ = params_;
  adam_ = AdamState<float>::zeros(params_.size());
}

Batch<float> Trainer::draw_batch() {
  const ModelConfig& m = cfg_.model;
  const int n = cfg_.optim.batch_size;
  const int width = m.G * m.E;
  const Codebook& cb = *cfg_.codebook;
  const bool labeled_data = cfg_.data.num_classes() > 1;

  Batch<float> batch;
  batch.targets.reserve(static_cast<std::size_t>(n));
  batch.input.t.resize(static_cast<std::size_t>(n));
  if (m.head == Head::discrete_token) {
    batch.input.tokens.reserve(static_cast<std::size_t>(n));
  } else {
    batch.input.latent.resize(n, width);
  }
  if (m.head == Head::velocity) {
    batch.z0.resize(n, width);
    batch.z1.resize(n, width);
  }
  if (m.num_classes) batch.input.labels.resize(static_cast<std::size_t>(n));

  for (int i = 0; i < n; ++i) {
    int label = 0;
    if (labeled_data) label = static_cast<int>(data_rng_() % static_cast<std::uint64_t>(cfg_.data.num_classes()));
    CodeGrid grid = sample_grid(cfg_.data.classes[static_cast<std::size_t>(label)], data_rng_);
    if (m.num_classes) {
      const bool drop = uniform01(label_rng_) < m.class_drop_prob;
      batch.input.labels[static_cast<std::size_t>(i)] = drop ? -1 : label;
    }
    const double t = sample_time(time_rng_);
    batch.input.t[static_cast<std::size_t>(i)] = t;
    if (m.head == Head::discrete_token) {
      batch.input.tokens.push_back(dfm_corrupt(grid, t, m.K, corrupt_rng_));
    } else {
      const LatentPoint z1 = embed(cb, grid);
      const LatentPoint z0 = sample_prior(m.G, m.E, prior_rng_);
      const LatentPoint zt = interpolate(z0, z1, t);
      batch.input.latent.row(i) = Eigen::Map<const MatrixXd>(zt.data(), 1, width).cast<float>();
      if (m.head == Head::velocity) {
        batch.z0.row(i) = Eigen::Map<const MatrixXd>(z0.data(), 1, width);
        batch.z1.row(i) = Eigen::Map<const MatrixXd>(z1.data(), 1, width);
      }
    }
    batch.targets.push_back(std::move(grid));
  }
  return batch;
}

MetricsRow Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const Batch<float> batch = draw_batch();
  MetricsRow row;
  row.iteration = iteration_ + 1;
  try {
    BatchResult<float> res = loss_and_grad(params_, cfg_.model, *cfg_.codebook, batch, LossSettings{cfg_.method, cfg_.z_coeff});
    optim_step(params_, res.grads, adam_, cfg_.optim);
    ema_update(ema_, params_, ema_decay_at(cfg_.optim, adam_.step));
    consecutive_bad_ = 0;
    row.loss_total = res.report.total;
    row.loss_primary = res.report.primary_term;
    row.loss_z = res.report.z_term;
    row.mean_log2z = res.report.mean_log2z;
    row.grad_norm = l2_norm(res.grads.values);
  } catch (const NumericalError& e) {
    ++consecutive_bad_;
    spdlog::warn("iteration {}: {}", row.iteration, e.what());
    if (consecutive_bad_ >= 2) {
      throw NumericalError("training aborted at iteration " + std::to_string(row.iteration) +
                           " after two consecutive non-finite steps: " + e.what() +
                           "; parameter norm " + std::to_string(l2_norm(params_.values)));
    }
    row.loss_total = row.loss_primary = row.loss_z = std::nan("");
  }
  ++iteration_;
  train_ms_ += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  row.wall_ms = cfg_.logging.wall_clock ? train_ms_ : 0.0;
  return row;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.method = cfg_.method;
  c.model = cfg_.model;
  c.optim = cfg_.optim;
  c.z_coeff = cfg_.z_coeff;
  c.data = cfg_.data;
  c.codebook = cfg_.codebook;
  c.seed = cfg_.seed;
  c.iteration = iteration_;
  c.params = params_;
  c.ema = ema_;
  c.adam = adam_;
  return c;
}

TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
  Trainer trainer(cfg);
  TrainResult result;
  std::ofstream metrics;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics.open(*out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw ConfigError("cannot write metrics.csv in " + out_dir->string());
    metrics << metrics_csv_header() << '\n';
  }
  const LoggingConfig& log = cfg.logging;
  for (int it = 0; it < cfg.optim.iterations; ++it) {
    MetricsRow row = trainer.step();
    if (row.iteration % log.log_every == 0 || it + 1 == cfg.optim.iterations) {
      spdlog::info("{} iteration {} loss {:.6f} (primary {:.6f}, z {:.3g})", method_name(cfg.method), row.iteration, row.loss_total,
                   row.loss_primary, row.loss_z);
      if (metrics.is_open()) metrics << metrics_csv_row(row) << '\n' << std::flush;
      result.metrics.push_back(row);
    }
    if (out_dir && log.ckpt_every > 0 && row.iteration % log.ckpt_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "ckpt_%08lld.ckpt", static_cast<long long>(row.iteration));
      save_checkpoint(trainer.checkpoint(), *out_dir / name);
    }
  }
  result.checkpoint = trainer.checkpoint();
  if (out_dir) save_checkpoint(result.checkpoint, *out_dir / "ckpt_final.ckpt");
  return result;
}

}  // namespace vqflow
