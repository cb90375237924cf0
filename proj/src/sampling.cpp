#include "vqflow/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <thread>

#include "vqflow/path.hpp"

namespace vqflow {

namespace {

const char* guidance_name(GuidanceSpace s) { return s == GuidanceSpace::logit ? "logit" : "velocity"; }

GuidanceSpace guidance_from_name(const std::string& name) {
  if (name == "logit") return GuidanceSpace::logit;
  if (name == "velocity") return GuidanceSpace::velocity;
  throw ConfigError("unknown guidance_space '" + name + "'");
}

// Splits [0, n) into contiguous chunks, one worker per chunk. Every sample
// owns its random substream, so the split does not change results beyond
// reduction order inside the linear algebra.
template <typename Fn>
void for_chunks(int n, int threads, Fn&& fn) {
  const int workers = std::max(1, std::min(threads, n));
  if (workers == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const int per = (n + workers - 1) / workers;
  for (int begin = 0; begin < n; begin += per) {
    const int end = std::min(n, begin + per);
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
}

double eval_time(int s, int steps) { return std::min(static_cast<double>(s) / steps, 1.0 - kTimeGuard); }

void check_guidance(const ModelConfig& cfg, double w, std::optional<int> label) {
  if (label && !cfg.num_classes) throw ConfigError("sampler: label given but the model is not class-conditional");
  if (label && (*label < 0 || *label >= *cfg.num_classes)) throw ConfigError("sampler: label out of range");
  if (w != 1.0 && (!cfg.num_classes || !label)) {
    throw ConfigError("sampler: guidance requested without a class-conditional model and label");
  }
}

ModelInput<double> latent_input(const MatrixXd& z, double t) {
  ModelInput<double> in;
  in.latent = z;
  in.t.assign(static_cast<std::size_t>(z.rows()), t);
  return in;
}

}  // namespace

// ---------------------------------------------------------------------------

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler: steps must be >= 1");
  if (!(tau >= kTauMin)) throw ConfigError("sampler: tau must be >= 1e-3");
  if (!(guidance_weight >= 0.0)) throw ConfigError("sampler: guidance_weight must be >= 0");
  if (n_samples < 0) throw ConfigError("sampler: n_samples must be >= 0");
  if (threads < 1) throw ConfigError("sampler: threads must be >= 1");
}

json SamplerConfig::to_json() const {
  json doc{{"steps", steps},
           {"tau", tau},
           {"guidance_weight", guidance_weight},
           {"guidance_space", guidance_name(guidance_space)},
           {"n_samples", n_samples},
           {"seed", seed}};
  doc["label"] = label ? json(*label) : json(nullptr);
  return doc;
}

SamplerConfig SamplerConfig::from_json(const json& doc) {
  SamplerConfig c;
  c.steps = doc.value("steps", c.steps);
  c.tau = doc.value("tau", c.tau);
  c.guidance_weight = doc.value("guidance_weight", c.guidance_weight);
  c.guidance_space = guidance_from_name(doc.value("guidance_space", std::string("logit")));
  c.n_samples = doc.value("n_samples", c.n_samples);
  c.seed = doc.value("seed", c.seed);
  if (doc.contains("label") && !doc.at("label").is_null()) c.label = doc.at("label").get<int>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

Mat<double> guided_output(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, ModelInput<double> input,
                          double w, std::optional<int> label) {
  const std::size_t n = input.size();
  if (!cfg.num_classes) {
    input.labels.clear();
    return forward(params, cfg, cb, input);
  }
  input.labels.assign(n, label.value_or(-1));
  Mat<double> cond = forward(params, cfg, cb, input);
  if (!label || w == 1.0) return cond;
  input.labels.assign(n, -1);
  const Mat<double> null = forward(params, cfg, cb, input);
  return null + w * (cond - null);
}

MatrixXd barycentric_velocity(const Mat<double>& logits, const Codebook& cb, const MatrixXd& z, double t, double tau) {
  const int K = cb.size();
  const int E = cb.dim();
  const auto G = z.cols() / E;
  if (logits.rows() != z.rows() || logits.cols() != G * K) throw std::invalid_argument("barycentric_velocity: shape mismatch");
  MatrixXd v(z.rows(), z.cols());
  const double inv = 1.0 / (1.0 - t);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const MatrixXd block = Eigen::Map<const MatrixXd>(logits.row(i).data(), G, K);
    const MatrixXd mu = posterior_mean(softmax_temp(block, tau), cb);
    const MatrixXd zi = Eigen::Map<const MatrixXd>(z.row(i).data(), G, E);
    const MatrixXd vi = (mu - zi) * inv;
    v.row(i) = Eigen::Map<const MatrixXd>(vi.data(), 1, G * E);
  }
  return v;
}

MatrixXd purr_velocity(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const MatrixXd& z, double t,
                       double tau, double w, std::optional<int> label, GuidanceSpace space) {
  if (cfg.head != Head::categorical) throw ConfigError("purr_velocity: model does not have a categorical head");
  check_guidance(cfg, w, label);
  if (space == GuidanceSpace::logit || !label || w == 1.0) {
    return barycentric_velocity(guided_output(params, cfg, cb, latent_input(z, t), w, label), cb, z, t, tau);
  }
  const MatrixXd cond = barycentric_velocity(guided_output(params, cfg, cb, latent_input(z, t), 1.0, label), cb, z, t, tau);
  const MatrixXd null = barycentric_velocity(guided_output(params, cfg, cb, latent_input(z, t), 1.0, std::nullopt), cb, z, t, tau);
  return null + w * (cond - null);
}

SampleResult euler_sample(const VelocityField& field, const Codebook& cb, int G, const SamplerConfig& scfg) {
  scfg.validate();
  const int n = scfg.n_samples;
  const int E = cb.dim();
  const int width = G * E;
  MatrixXd z(n, width);
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(scfg.seed, "prior", static_cast<std::uint64_t>(i));
    const LatentPoint z0 = sample_prior(G, E, rng);
    z.row(i) = Eigen::Map<const MatrixXd>(z0.data(), 1, width);
  }

  const int T = scfg.steps;
  std::vector<std::string> failures;
  std::mutex failure_mutex;
  for_chunks(n, scfg.threads, [&](int begin, int end) {
    MatrixXd zc = z.middleRows(begin, end - begin);
    for (int s = 0; s < T; ++s) {
      const MatrixXd v = field(zc, eval_time(s, T));
      zc += v / static_cast<double>(T);
      if (!zc.allFinite()) {
        std::lock_guard lock(failure_mutex);
        failures.push_back("euler_sample: non-finite state at step " + std::to_string(s));
        return;
      }
    }
    z.middleRows(begin, end - begin) = zc;
  });
  if (!failures.empty()) throw NumericalError(failures.front());

  SampleResult out;
  out.codes = quantize_batch(cb, z, G);
  out.z_final = std::move(z);
  return out;
}

SampleResult purr_sample(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const SamplerConfig& scfg) {
  check_guidance(cfg, scfg.guidance_weight, scfg.label);
  if (cfg.head != Head::categorical) throw ConfigError("purr_sample: model does not have a categorical head");
  const VelocityField field = [&](const MatrixXd& z, double t) {
    return purr_velocity(params, cfg, cb, z, t, scfg.tau, scfg.guidance_weight, scfg.label, scfg.guidance_space);
  };
  return euler_sample(field, cb, cfg.G, scfg);
}

SampleResult cfm_sample(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const SamplerConfig& scfg) {
  if (cfg.head != Head::velocity) throw ConfigError("cfm_sample: model does not have a velocity head");
  check_guidance(cfg, scfg.guidance_weight, scfg.label);
  const VelocityField field = [&](const MatrixXd& z, double t) -> MatrixXd {
    return guided_output(params, cfg, cb, latent_input(z, t), scfg.guidance_weight, scfg.label);
  };
  return euler_sample(field, cb, cfg.G, scfg);
}

SampleResult dfm_sample(const Params<double>& params, const ModelConfig& cfg, const Codebook& cb, const SamplerConfig& scfg) {
  scfg.validate();
  if (cfg.head != Head::discrete_token) throw ConfigError("dfm_sample: model does not have a discrete-token head");
  check_guidance(cfg, scfg.guidance_weight, scfg.label);
  const int n = scfg.n_samples;
  const int G = cfg.G;
  const int K = cfg.K;
  const int T = scfg.steps;

  std::vector<MaskedGrid> grids(static_cast<std::size_t>(n));
  for (auto& m : grids) {
    m.codes.assign(static_cast<std::size_t>(G), K);
    m.masked.assign(static_cast<std::size_t>(G), true);
  }

  for_chunks(n, scfg.threads, [&](int begin, int end) {
    std::vector<Rng> rngs;
    for (int i = begin; i < end; ++i) rngs.push_back(make_rng(scfg.seed, "sampler", static_cast<std::uint64_t>(i)));

    // Resolves masked positions of samples [begin, end) at time t; each
    // masked position unmasks with probability p_unmask.
    auto resolve = [&](double t, double p_unmask) {
      ModelInput<double> in;
      in.tokens.assign(grids.begin() + begin, grids.begin() + end);
      in.t.assign(in.tokens.size(), t);
      const Mat<double> logits = guided_output(params, cfg, cb, std::move(in), scfg.guidance_weight, scfg.label);
      for (int i = begin; i < end; ++i) {
        MaskedGrid& m = grids[static_cast<std::size_t>(i)];
        Rng& rng = rngs[static_cast<std::size_t>(i - begin)];
        for (int g = 0; g < G; ++g) {
          if (!m.masked[static_cast<std::size_t>(g)]) continue;
          if (p_unmask < 1.0 && uniform01(rng) >= p_unmask) continue;
          const MatrixXd row = logits.row(i - begin).segment(g * K, K);
          const MatrixXd probs = softmax_temp(row, scfg.tau);
          m.codes[static_cast<std::size_t>(g)] = sample_categorical(probs.row(0), rng);
          m.masked[static_cast<std::size_t>(g)] = false;
        }
      }
    };
    auto any_masked = [&] {
      for (int i = begin; i < end; ++i) {
        if (grids[static_cast<std::size_t>(i)].masked_count() > 0) return true;
      }
      return false;
    };

    const double h = 1.0 / T;
    for (int s = 0; s < T && any_masked(); ++s) {
      const double t = static_cast<double>(s) / T;
      resolve(std::min(t, 1.0 - kTimeGuard), std::min(1.0, h / (1.0 - t)));
    }
    if (any_masked()) resolve(eval_time(T - 1, T), 1.0);
  });

  SampleResult out;
  out.codes.reserve(grids.size());
  for (const MaskedGrid& m : grids) out.codes.push_back(CodeGrid{m.codes});
  return out;
}

SampleResult sample_checkpoint(const Checkpoint& ckpt, const SamplerConfig& scfg) {
  const Params<double> params = ckpt.inference_params();
  switch (ckpt.method) {
    case Method::purrception: return purr_sample(params, ckpt.model, *ckpt.codebook, scfg);
    case Method::cfm: return cfm_sample(params, ckpt.model, *ckpt.codebook, scfg);
    case Method::dfm: return dfm_sample(params, ckpt.model, *ckpt.codebook, scfg);
  }
  throw ConfigError("unknown checkpoint method");
}

void write_samples(const std::filesystem::path& path, const SampleResult& result, const Codebook& cb, int G, const json& sidecar,
                   bool with_z_csv) {
  write_dataset(path, Dataset{G, cb.size(), result.codes});
  write_file_atomic(path.string() + ".json", sidecar.dump(2) + "\n");
  if (!with_z_csv) return;
  std::string csv = "sample,zT_norm,prequant_distance\n";
  const int E = cb.dim();
  for (std::size_t i = 0; i < result.codes.size() && static_cast<Eigen::Index>(i) < result.z_final.rows(); ++i) {
    const MatrixXd zi = Eigen::Map<const MatrixXd>(result.z_final.row(static_cast<Eigen::Index>(i)).data(), G, E);
    const double dist = (zi - embed(cb, result.codes[i])).norm();
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, zi.norm(), dist);
    csv += buf;
  }
  write_file_atomic(path.string() + ".zT.csv", csv);
}

}  // namespace vqflow
