#include "vqflow/cli.hpp"

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include "vqflow/config.hpp"

namespace vqflow {

namespace {

void setup_logging() {
  auto logger = spdlog::get("vqflow");
  if (!logger) logger = spdlog::stderr_logger_mt("vqflow");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("VQFLOW_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path.string(), text);
}

struct SamplerFlags {
  std::optional<double> tau;
  std::optional<int> steps;
  std::optional<int> n;
  std::optional<int> label;
  std::optional<double> guidance;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::vector<std::string> sets;
  std::string config;

  void add_to(CLI::App* cmd, bool with_tau) {
    cmd->add_option("--config", config, "Run config whose sampler section supplies defaults");
    if (with_tau) cmd->add_option("--tau", tau, "Sampling temperature");
    cmd->add_option("--steps", steps, "Euler steps");
    cmd->add_option("--n", n, "Number of samples");
    cmd->add_option("--label", label, "Class label for conditional models");
    cmd->add_option("--guidance", guidance, "Classifier-free guidance weight");
    cmd->add_option("--seed", seed, "Sampler seed");
    cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--set", sets, "Sampler override key=value (repeatable)");
  }

  /// Checkpoint-derived defaults < config sampler section < --set < flags.
  SamplerConfig resolve(std::uint64_t run_seed) const {
    json doc = SamplerConfig{}.to_json();
    doc["seed"] = derive_seed(run_seed, "sampler");
    if (!config.empty()) {
      const RunConfig rc = load_run_config(config);
      const json section = rc.raw.value("sampler", json::object());
      for (const auto& [key, value] : section.items()) doc[key] = value;
    }
    for (std::string s : sets) {
      if (s.rfind("sampler.", 0) == 0) s = s.substr(8);
      apply_override(doc, s);
    }
    if (tau) doc["tau"] = *tau;
    if (steps) doc["steps"] = *steps;
    if (n) doc["n_samples"] = *n;
    if (label) doc["label"] = *label;
    if (guidance) doc["guidance_weight"] = *guidance;
    if (seed) doc["seed"] = *seed;
    SamplerConfig cfg;
    try {
      cfg = SamplerConfig::from_json(doc);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("sampler: ") + e.what());
    }
    cfg.threads = threads;
    cfg.validate();
    return cfg;
  }
};

int cmd_train(const std::string& config, const std::string& out, const std::vector<std::string>& sets,
              std::optional<std::uint64_t> seed) {
  const RunConfig cfg = load_run_config(config, sets, seed);
  std::filesystem::create_directories(out);
  write_text(std::filesystem::path(out) / "config.json", cfg.raw.dump(2) + "\n");
  const TrainResult res = train(cfg.train, std::filesystem::path(out));
  const MetricsRow last = res.metrics.empty() ? MetricsRow{} : res.metrics.back();
  std::cout << "trained " << method_name(cfg.train.method) << " iterations=" << res.checkpoint.iteration
            << " loss=" << fmt(last.loss_total) << " config_hash=" << res.checkpoint.config_hash() << "\n";
  return kExitOk;
}

int cmd_sample(const std::string& ckpt_path, const std::string& out, const SamplerFlags& flags, bool z_csv) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const SamplerConfig scfg = flags.resolve(ckpt.seed);
  const SampleResult res = sample_checkpoint(ckpt, scfg);
  json sidecar = scfg.to_json();
  sidecar["method"] = method_name(ckpt.method);
  sidecar["checkpoint_iteration"] = ckpt.iteration;
  sidecar["config_hash"] = ckpt.config_hash();
  const std::filesystem::path path(out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_samples(path, res, *ckpt.codebook, ckpt.model.G, sidecar, z_csv);
  std::cout << "wrote " << res.codes.size() << " samples tau=" << fmt(scfg.tau) << " steps=" << scfg.steps << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config, const std::vector<std::string>& sets,
             bool oracle_model, int probes, std::optional<std::uint64_t> seed, const std::string& out) {
  ProbeConfig pc;
  pc.n_probes = probes;
  double kl = 0.0;
  json report;
  if (oracle_model) {
    if (config.empty()) throw ConfigError("eval: --oracle-model needs --config");
    const RunConfig cfg = load_run_config(config, sets);
    pc.seed = seed.value_or(derive_seed(cfg.train.seed, "probes"));
    const OraclePosterior oracle = oracle_for(cfg.train.data, *cfg.train.codebook);
    kl = posterior_fidelity(oracle_as_model(oracle), oracle, cfg.train.data, pc);
    report["model"] = "oracle";
  } else {
    if (ckpt_path.empty()) throw ConfigError("eval: --ckpt is required");
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    pc.seed = seed.value_or(derive_seed(ckpt.seed, "probes"));
    kl = posterior_fidelity(ckpt, pc);
    report["model"] = "checkpoint";
    report["checkpoint_iteration"] = ckpt.iteration;
    report["config_hash"] = ckpt.config_hash();
  }
  report["posterior_kl"] = kl;
  report["n_probes"] = pc.n_probes;
  report["seed"] = pc.seed;
  if (!out.empty()) write_text(out, report.dump(2) + "\n");
  std::cout << "posterior_kl=" << fmt(kl) << "\n";
  return kExitOk;
}

std::vector<double> parse_taus(const std::string& text) {
  std::vector<double> taus;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      taus.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--taus: not a number: '" + item + "'");
    }
  }
  if (taus.empty()) throw ConfigError("--taus: empty list");
  return taus;
}

int cmd_sweep(const std::string& ckpt_path, const std::string& taus, const std::string& out, const SamplerFlags& flags) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const SamplerConfig scfg = flags.resolve(ckpt.seed);
  const std::vector<SweepRow> rows = temperature_sweep(ckpt, parse_taus(taus), scfg);
  const std::string csv = sweep_csv(rows);
  if (!out.empty()) write_text(out, csv);
  std::cout << csv;
  return kExitOk;
}

int cmd_compare(const std::string& config, const std::string& out, const std::vector<std::string>& sets,
                std::optional<std::uint64_t> seed, int threads) {
  const RunConfig cfg = load_run_config(config, sets, seed);
  auto [runs, cc] = compare_runs(cfg);
  cc.sampler.threads = threads;
  const std::vector<CompareRow> rows = convergence_compare(runs, cc);
  const std::string csv = compare_csv(rows);
  std::filesystem::create_directories(out);
  write_text(std::filesystem::path(out) / "compare.csv", csv);
  std::cout << csv;
  return kExitOk;
}

int cmd_oracle_check(const std::string& config, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
                     int steps, int n, int threads, double tol, const std::string& out) {
  const RunConfig cfg = load_run_config(config, sets, seed);
  const DataSource& data = cfg.train.data;
  const Codebook& cb = *cfg.train.codebook;
  if (!joint_support(data.K(), data.G())) {
    throw ConfigError("oracle-check: K^G exceeds the enumeration limit of " + std::to_string(kEnumerationLimit));
  }
  const OraclePosterior oracle = oracle_for(data, cb);
  const int G = data.G();
  const int E = cb.dim();
  const VelocityField field = [&](const MatrixXd& z, double t) {
    MatrixXd v(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const LatentPoint zi = Eigen::Map<const MatrixXd>(z.row(i).data(), G, E);
      const LatentPoint vi = oracle_marginal_velocity(oracle, zi, t);
      v.row(i) = Eigen::Map<const MatrixXd>(vi.data(), 1, G * E);
    }
    return v;
  };
  SamplerConfig scfg = cfg.sampler;
  scfg.steps = steps;
  scfg.n_samples = n;
  scfg.threads = threads;
  scfg.validate();
  const SampleResult res = euler_sample(field, cb, G, scfg);
  const Histogram hist = histogram(res.codes, data.K(), G);
  const JointTable exact = data.joint();
  const std::vector<double> emp = hist.joint_distribution();
  const double tv = tv_distance(emp, exact.p);
  const bool pass = tv <= tol;
  json report{{"tv_joint", tv}, {"tolerance", tol}, {"steps", steps}, {"n_samples", n}, {"seed", scfg.seed}, {"pass", pass}};
  if (!out.empty()) write_text(out, report.dump(2) + "\n");
  std::cout << "oracle-check tv_joint=" << fmt(tv) << " tol=" << fmt(tol) << (pass ? " PASS" : " FAIL") << "\n";
  return pass ? kExitOk : kExitTolerance;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  setup_logging();
  CLI::App app{"vqflow: flow matching over VQ code grids"};
  app.require_subcommand(1);

  std::string config, out, ckpt, taus;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  int probes = 1000;
  bool oracle_model = false;
  bool z_csv = false;
  int steps = 200;
  int n = 20000;
  double tol = 0.02;
  SamplerFlags sflags;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "Run configuration JSON")->required();
    cmd->add_option("--set", sets, "Override key=value with a dotted key (repeatable)");
    cmd->add_option("--seed", seed, "Top-level seed");
    cmd->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  };

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  common(train_cmd);
  train_cmd->add_option("--out", out, "Output directory")->required();

  CLI::App* sample_cmd = app.add_subcommand("sample", "Generate code grids from a checkpoint");
  sample_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  sample_cmd->add_option("--out", out, "Output dataset file")->required();
  sample_cmd->add_flag("--z-csv", z_csv, "Also write <out>.zT.csv");
  sflags.add_to(sample_cmd, true);

  CLI::App* eval_cmd = app.add_subcommand("eval", "Posterior fidelity against the Bayes oracle");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint file");
  eval_cmd->add_option("--config", config, "Run config (for --oracle-model)");
  eval_cmd->add_option("--set", sets, "Config override key=value (repeatable)");
  eval_cmd->add_flag("--oracle-model", oracle_model, "Score the oracle itself as the model");
  eval_cmd->add_option("--probes", probes, "Number of (t, z_t) probes")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", seed, "Probe seed");
  eval_cmd->add_option("--out", out, "Report JSON file");

  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Temperature sweep of sample quality");
  sweep_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  sweep_cmd->add_option("--taus", taus, "Comma-separated temperatures")->required();
  sweep_cmd->add_option("--out", out, "CSV output file");
  sflags.add_to(sweep_cmd, false);

  CLI::App* compare_cmd = app.add_subcommand("compare", "Train all methods side by side and track TV");
  common(compare_cmd);
  compare_cmd->add_option("--out", out, "Output directory")->required();

  CLI::App* oracle_cmd = app.add_subcommand("oracle-check", "Transport with the exact marginal velocity");
  common(oracle_cmd);
  oracle_cmd->add_option("--steps", steps, "Euler steps")->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--tol", tol, "TV tolerance");
  oracle_cmd->add_option("--out", out, "Report JSON file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(config, out, sets, seed);
    if (*sample_cmd) return cmd_sample(ckpt, out, sflags, z_csv);
    if (*eval_cmd) return cmd_eval(ckpt, config, sets, oracle_model, probes, seed, out);
    if (*sweep_cmd) return cmd_sweep(ckpt, taus, out, sflags);
    if (*compare_cmd) return cmd_compare(config, out, sets, seed, threads);
    if (*oracle_cmd) return cmd_oracle_check(config, sets, seed, steps, n, threads, tol, out);
  } catch (const NumericalError& e) {
    spdlog::error("numerical abort: {}", e.what());
    return kExitNumerical;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const FormatError& e) {
    spdlog::error("bad input file: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace vqflow
