// Acceptance suite: one PASS/FAIL line per criterion.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>

#include <spdlog/spdlog.h>

#include "helpers.hpp"

using namespace testutil;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double joint_tv(const std::vector<CodeGrid>& codes, const JointTable& exact) {
  const Histogram h = histogram(codes, exact.K, exact.G);
  return tv_distance(h.joint_distribution(), exact.p);
}

TrainConfig pair_run() {
  TrainConfig cfg;
  cfg.method = Method::purrception;
  cfg.data.classes = {pair_reference()};
  cfg.codebook = std::make_shared<const Codebook>(pair_codebook());
  cfg.optim.batch_size = 128;
  cfg.optim.iterations = 2000;
  cfg.logging.log_every = 500;
  cfg.finalize();
  return cfg;
}

// Criterion 2 trains this checkpoint; criterion 3 samples from it.
std::optional<Checkpoint> g_pair_ckpt;

Outcome oracle_transport() {
  const auto start = Clock::now();
  const Codebook cb = square_codebook();
  const DataSpec spec = markov_reference();
  const OraclePosterior oracle(spec, cb);
  const VelocityField field = [&](const MatrixXd& z, double t) {
    MatrixXd v(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const LatentPoint zi = Eigen::Map<const MatrixXd>(z.row(i).data(), 2, 2);
      const LatentPoint vi = oracle_marginal_velocity(oracle, zi, t);
      v.row(i) = Eigen::Map<const MatrixXd>(vi.data(), 1, 4);
    }
    return v;
  };
  SamplerConfig s;
  s.steps = 200;
  s.n_samples = 20000;
  s.seed = 1;
  const double tv = joint_tv(euler_sample(field, cb, 2, s).codes, exact_joint(spec));
  const double secs = seconds_since(start);
  return {tv <= 0.02 && secs <= 60.0, fmt("tv_joint=%.4f (<= 0.02)", tv) + fmt(", %.1fs (<= 60s)", secs)};
}

Outcome posterior_recovery() {
  const auto start = Clock::now();
  g_pair_ckpt = train(pair_run()).checkpoint;
  const double kl = posterior_fidelity(*g_pair_ckpt, ProbeConfig{1000, 0});
  const double secs = seconds_since(start);
  return {kl <= 0.05 && secs <= 300.0, fmt("mean KL=%.5f (<= 0.05)", kl) + fmt(", %.1fs (<= 300s)", secs)};
}

Outcome trained_generation() {
  if (!g_pair_ckpt) return {false, "no checkpoint from criterion 2"};
  SamplerConfig s;
  s.tau = 1.0;
  s.steps = 100;
  s.n_samples = 10000;
  s.seed = derive_seed(g_pair_ckpt->seed, "sampler");
  const double tv = joint_tv(sample_checkpoint(*g_pair_ckpt, s).codes, g_pair_ckpt->data.joint());
  return {tv <= 0.10, fmt("tv_joint=%.4f (<= 0.10)", tv)};
}

Outcome gradient_fidelity() {
  const Codebook cb = square_codebook();
  const DataSpec spec = markov_reference();
  double worst = 0.0;
  std::string detail;
  for (Method m : {Method::purrception, Method::cfm, Method::dfm}) {
    ModelConfig cfg = tiny_model(m, 2, 4, 2);
    cfg.hidden_width = 32;
    cfg.time_features = 16;
    const Params<double> params = perturbed_params(cfg, 31);
    const Batch<double> batch = make_batch<double>(m, cfg, cb, spec, 16, 7);
    const double err = grad_check(params, cfg, cb, batch, LossSettings{m, kDefaultZCoeff}, GradCheckOptions{1e-5, 400, 11});
    worst = std::max(worst, err);
    detail += std::string(detail.empty() ? "" : ", ") + method_name(m) + fmt("=%.2e", err);
  }
  return {worst <= 1e-4, "max rel err " + detail + " (<= 1e-4)"};
}

Outcome algebraic_identities() {
  const Codebook cb = square_codebook();
  bool ok = true;
  double bary = 0.0, onehot = 0.0, last = 0.0;

  // Barycentric velocity against an explicit softmax average.
  Rng rng = make_rng(2, "identities");
  std::normal_distribution<double> nd;
  Mat<double> logits(4, 8);
  MatrixXd z(4, 4);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 3 * nd(rng);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = nd(rng);
  const double t = 0.61;
  const MatrixXd v = barycentric_velocity(logits, cb, z, t, 0.7);
  for (int i = 0; i < 4; ++i) {
    for (int g = 0; g < 2; ++g) {
      double norm = 0.0;
      for (int k = 0; k < 4; ++k) norm += std::exp(logits(i, g * 4 + k) / 0.7);
      for (int e = 0; e < 2; ++e) {
        double mu = 0.0;
        for (int k = 0; k < 4; ++k) mu += std::exp(logits(i, g * 4 + k) / 0.7) / norm * cb.embeddings()(k, e);
        bary = std::max(bary, std::abs(v(i, g * 2 + e) - (mu - z(i, g * 2 + e)) / (1 - t)));
      }
    }
  }
  ok = ok && bary <= 1e-12;

  // One-hot posterior: Euler transport ends on the code.
  for (int k = 0; k < 4; ++k) {
    const MatrixXd e = cb.embeddings().row(k);
    const VelocityField field = [&](const MatrixXd& zz, double tt) {
      MatrixXd out(zz.rows(), zz.cols());
      for (Eigen::Index i = 0; i < zz.rows(); ++i) out.row(i) = (e - zz.row(i)) / (1 - tt);
      return out;
    };
    SamplerConfig s;
    s.steps = 100;
    s.n_samples = 50;
    s.seed = static_cast<std::uint64_t>(k);
    const SampleResult res = euler_sample(field, cb, 1, s);
    for (Eigen::Index i = 0; i < res.z_final.rows(); ++i) onehot = std::max(onehot, (res.z_final.row(i) - e).cwiseAbs().maxCoeff());
  }
  ok = ok && onehot <= 1e-9;

  // Final Euler step from t = (T-1)/T lands on the posterior mean.
  const ModelConfig cfg = tiny_model(Method::purrception, 2, 4, 2);
  const Params<double> params = perturbed_params(cfg, 12);
  const int T = 100;
  const double tl = static_cast<double>(T - 1) / T;
  const MatrixXd next = z + purr_velocity(params, cfg, cb, z, tl, 0.9) / T;
  ModelInput<double> in;
  in.latent = z;
  in.t.assign(4, tl);
  const Mat<double> out = forward(params, cfg, cb, in);
  for (int i = 0; i < 4; ++i) {
    const MatrixXd block = Eigen::Map<const MatrixXd>(out.row(i).data(), 2, 4);
    const MatrixXd mu = posterior_mean(softmax_temp(block, 0.9), cb);
    const MatrixXd zi = Eigen::Map<const MatrixXd>(next.row(i).data(), 2, 2);
    last = std::max(last, (zi - mu).cwiseAbs().maxCoeff());
  }
  ok = ok && last <= 1e-12;

  // Temperature keeps the argmax; entropy grows with tau.
  bool argmax_ok = true, entropy_ok = true;
  for (int i = 0; i < 4; ++i) {
    const MatrixXd row = logits.row(i).head(4);
    Eigen::Index ref = 0;
    row.row(0).maxCoeff(&ref);
    double prev = -1.0;
    for (double tau : {0.05, 0.2, 0.5, 0.9, 1.0, 1.5, 3.0}) {
      const MatrixXd p = softmax_temp(row, tau);
      Eigen::Index arg = 0;
      p.row(0).maxCoeff(&arg);
      argmax_ok = argmax_ok && arg == ref;
      const std::vector<double> pv(p.data(), p.data() + p.size());
      const double h = entropy(pv);
      entropy_ok = entropy_ok && h >= prev;
      prev = h;
    }
  }
  ok = ok && argmax_ok && entropy_ok;
  return {ok, fmt("barycentric=%.1e (<= 1e-12)", bary) + fmt(", one-hot=%.1e (<= 1e-9)", onehot) +
                  fmt(", final-step=%.1e (<= 1e-12)", last) + ", argmax " + (argmax_ok ? "stable" : "CHANGED") + ", entropy " +
                  (entropy_ok ? "monotone" : "NOT monotone")};
}

Outcome z_loss() {
  const int K = 16384;
  const double z_term = purr_loss(MatrixXd::Zero(1, K).eval(), CodeGrid{{0}}, kDefaultZCoeff).z_term;
  const double expect = 1e-5 * std::pow(std::log(static_cast<double>(K)), 2);
  const double rel = std::abs(z_term - expect) / expect;

  // Same seed, with and without the regularizer.
  auto drift = [](double coeff) {
    TrainConfig cfg;
    cfg.method = Method::purrception;
    cfg.data.classes = {DataSpec::independent(MatrixXd::Constant(1, 64, 1.0 / 64))};
    cfg.codebook = std::make_shared<const Codebook>(Codebook::seeded(64, 4, 3));
    cfg.z_coeff = coeff;
    cfg.optim.iterations = 5000;
    cfg.logging.log_every = 5000;
    cfg.seed = 6;
    cfg.finalize();
    Trainer tr(cfg);
    while (tr.iteration() < cfg.optim.iterations) tr.step();
    // Mean (log Z)^2 of the trained weights on a fixed probe batch.
    const Batch<double> probes = make_batch<double>(Method::purrception, cfg.model, *cfg.codebook, cfg.data.classes[0], 2000, 99);
    return loss_and_grad(tr.params().cast<double>(), cfg.model, *cfg.codebook, probes, LossSettings{}, false).report.mean_log2z;
  };
  const double with = drift(kDefaultZCoeff);
  const double without = drift(0.0);
  return {rel <= 1e-12 && with <= without, fmt("z_term rel err=%.1e (<= 1e-12)", rel) +
                                               fmt(", mean(logZ)^2 with=%.4g", with) + fmt(" <= without=%.4g", without)};
}

Outcome three_way() {
  const auto start = Clock::now();
  std::vector<TrainConfig> runs;
  for (Method m : {Method::purrception, Method::cfm, Method::dfm}) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.data.classes = {markov_reference()};
    cfg.codebook = std::make_shared<const Codebook>(square_codebook());
    cfg.optim.iterations = 10000;
    cfg.logging.log_every = 10000;
    cfg.seed = 3;
    cfg.finalize();
    runs.push_back(cfg);
  }
  CompareConfig cc;
  cc.eval_every = 2500;
  cc.sampler.tau = 1.0;
  cc.sampler.steps = 100;
  cc.sampler.n_samples = 10000;
  cc.sampler.seed = 4;
  const std::vector<CompareRow> rows = convergence_compare(runs, cc);
  const std::string csv = compare_csv(rows);
  const bool complete = rows.size() == 12 && std::count(csv.begin(), csv.end(), '\n') == 13;
  bool ok = complete;
  std::string detail;
  for (const CompareRow& r : rows) {
    if (r.iteration != 10000) continue;
    ok = ok && r.tv_joint <= 0.15;
    detail += std::string(detail.empty() ? "" : ", ") + method_name(r.method) + fmt("=%.4f", r.tv_joint);
  }
  const double secs = seconds_since(start);
  ok = ok && secs <= 1200.0;
  return {ok, "final tv_joint " + detail + " (<= 0.15), csv " + (complete ? "complete" : "INCOMPLETE") +
                  fmt(", %.0fs (<= 1200s)", secs)};
}

int run_cli_process(const std::string& args, const std::filesystem::path& stdout_file) {
  const std::string cmd = std::string(VQFLOW_CLI_PATH) + " " + args + " > " + stdout_file.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Every file under dir, keyed by relative path.
std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[std::filesystem::relative(e.path(), dir).string()] = read_file(e.path().string());
  }
  return files;
}

Outcome determinism() {
  const json config = json::parse(R"({
    "seed": 21,
    "data": {"kind": "markov", "G": 2, "K": 4, "init": [0.25, 0.25, 0.25, 0.25],
             "transition": [[0.7,0.1,0.1,0.1],[0.1,0.7,0.1,0.1],[0.1,0.1,0.7,0.1],[0.1,0.1,0.1,0.7]]},
    "codebook": {"embeddings": [[0, 0], [2, 0], [0, 2], [2, 2]]},
    "model": {"hidden_width": 32},
    "optim": {"iterations": 60, "batch_size": 32, "lr": 0.001},
    "sampler": {"steps": 20, "n_samples": 300},
    "logging": {"log_every": 10, "ckpt_every": 30},
    "compare": {"eval_every": 30, "methods": {"purrception": {}, "cfm": {}, "dfm": {}}}
  })");
  std::vector<std::map<std::string, std::string>> outputs;
  std::vector<std::string> failures;
  for (int rep = 0; rep < 2; ++rep) {
    const auto dir = scratch_dir("acceptance_det_" + std::to_string(rep));
    const auto run_dir = dir / "out";
    std::filesystem::create_directories(run_dir);
    write_file_atomic((dir / "run.json").string(), config.dump(2));
    const std::string cfg = (dir / "run.json").string();
    const std::string ck = (run_dir / "train" / "ckpt_final.ckpt").string();
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"train", "train --config " + cfg + " --out " + (run_dir / "train").string() + " --threads 1"},
        {"sample", "sample --ckpt " + ck + " --config " + cfg + " --out " + (run_dir / "s.bin").string() + " --z-csv --threads 1"},
        {"eval", "eval --ckpt " + ck + " --probes 200 --out " + (run_dir / "eval.json").string()},
        {"sweep", "sweep --ckpt " + ck + " --config " + cfg + " --taus 0.3,0.6,0.9 --out " + (run_dir / "sweep.csv").string() +
                      " --threads 1"},
        {"compare", "compare --config " + cfg + " --out " + (run_dir / "compare").string() + " --threads 1"},
        {"oracle-check", "oracle-check --config " + cfg + " --steps 50 --n 2000 --tol 1 --out " +
                             (run_dir / "oracle.json").string() + " --threads 1"},
    };
    for (const auto& [name, args] : commands) {
      if (run_cli_process(args, run_dir / (name + ".stdout")) != 0) failures.push_back(name + " exit");
    }
    outputs.push_back(snapshot(run_dir));
  }
  std::size_t differing = 0;
  for (const auto& [path, bytes] : outputs[0]) {
    const auto it = outputs[1].find(path);
    if (it == outputs[1].end() || it->second != bytes) {
      ++differing;
      failures.push_back(path);
    }
  }
  if (outputs[0].size() != outputs[1].size()) failures.push_back("file sets differ");
  std::string detail = std::to_string(outputs[0].size()) + " files over 6 commands, " + std::to_string(differing) + " differ";
  for (const std::string& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 oracle transport", oracle_transport},
      {"2 posterior recovery by training", posterior_recovery},
      {"3 trained-model generation", trained_generation},
      {"4 gradient fidelity", gradient_fidelity},
      {"5 algebraic identities", algebraic_identities},
      {"6 z-loss", z_loss},
      {"7 three-way comparison", three_way},
      {"8 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("[%s] %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
