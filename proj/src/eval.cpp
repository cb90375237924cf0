#include "vqflow/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>

#include <spdlog/spdlog.h>

namespace vqflow {

namespace {

void check_normalized(std::span<const double> p, const char* what) {
  double s = 0.0;
  for (double v : p) s += v;
  if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument(std::string(what) + ": distribution does not sum to 1");
}

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double tv_joint_or_nan(const Histogram& hist, const JointTable* exact) {
  if (!exact || hist.joint.empty() || hist.n == 0) return std::numeric_limits<double>::quiet_NaN();
  return tv_distance(hist.joint_distribution(), exact->p);
}

}  // namespace

std::vector<double> Histogram::joint_distribution() const {
  if (n == 0 || joint.empty()) throw std::invalid_argument("histogram: no enumerable joint counts");
  std::vector<double> p(joint.size());
  for (std::size_t i = 0; i < joint.size(); ++i) p[i] = static_cast<double>(joint[i]) / static_cast<double>(n);
  return p;
}

MatrixXd Histogram::marginal_distribution() const {
  MatrixXd m(G, K);
  for (int g = 0; g < G; ++g) {
    for (int k = 0; k < K; ++k) m(g, k) = n ? static_cast<double>(count(g, k)) / static_cast<double>(n) : 0.0;
  }
  return m;
}

Histogram histogram(std::span<const CodeGrid> samples, int K, int G) {
  Histogram h;
  h.G = G;
  h.K = K;
  h.n = samples.size();
  h.per_position.assign(static_cast<std::size_t>(G) * static_cast<std::size_t>(K), 0);
  const auto support = joint_support(K, G);
  if (support) h.joint.assign(*support, 0);
  const JointTable index_helper{G, K, {}};
  for (const CodeGrid& c : samples) {
    if (c.size() != G) throw std::invalid_argument("histogram: grid size mismatch");
    for (int g = 0; g < G; ++g) {
      if (c[g] < 0 || c[g] >= K) throw std::out_of_range("histogram: code out of range");
      ++h.per_position[static_cast<std::size_t>(g * K + c[g])];
    }
    if (support) ++h.joint[index_helper.index(c)];
  }
  return h;
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: support sizes differ");
  check_normalized(p, "tv_distance");
  check_normalized(q, "tv_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return std::clamp(0.5 * s, 0.0, 1.0);
}

double kl_divergence(std::span<const double> p, std::span<const double> q, double floor) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: support sizes differ");
  check_normalized(p, "kl_divergence");
  check_normalized(q, "kl_divergence");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], floor)));
  }
  return std::max(s, 0.0);
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double tv_marginal_mean(const Histogram& hist, const MatrixXd& exact_marginals) {
  if (hist.n == 0) return std::numeric_limits<double>::quiet_NaN();
  const MatrixXd emp = hist.marginal_distribution();
  double s = 0.0;
  for (int g = 0; g < hist.G; ++g) {
    const VectorXd a = emp.row(g).transpose();
    const VectorXd b = exact_marginals.row(g).transpose();
    s += tv_distance({a.data(), static_cast<std::size_t>(a.size())}, {b.data(), static_cast<std::size_t>(b.size())});
  }
  return s / hist.G;
}

double marginal_entropy_mean(const Histogram& hist) {
  if (hist.n == 0) return 0.0;
  const MatrixXd emp = hist.marginal_distribution();
  double s = 0.0;
  for (int g = 0; g < hist.G; ++g) {
    const VectorXd a = emp.row(g).transpose();
    s += entropy({a.data(), static_cast<std::size_t>(a.size())});
  }
  return s / hist.G;
}

// ---------------------------------------------------------------------------
// Posterior fidelity

OraclePosterior oracle_for(const DataSource& data, const Codebook& cb) {
  if (data.num_classes() == 1) return OraclePosterior(data.classes.front(), cb);
  return OraclePosterior(data.joint(), cb);
}

PosteriorModel oracle_as_model(const OraclePosterior& oracle) {
  return [&oracle](const MatrixXd& zt, const std::vector<double>& t) {
    const int G = oracle.G();
    const int E = oracle.codebook().dim();
    const int K = oracle.K();
    Mat<double> out(zt.rows(), G * K);
    for (Eigen::Index i = 0; i < zt.rows(); ++i) {
      const LatentPoint z = Eigen::Map<const MatrixXd>(zt.row(i).data(), G, E);
      const MatrixXd lp = oracle.log_posterior(z, t[static_cast<std::size_t>(i)]);
      out.row(i) = Eigen::Map<const MatrixXd>(lp.data(), 1, G * K);
    }
    return out;
  };
}

double posterior_fidelity(const PosteriorModel& model, const OraclePosterior& oracle, const DataSource& data,
                          const ProbeConfig& probes) {
  if (probes.n_probes < 1) throw std::invalid_argument("posterior_fidelity: need at least one probe");
  const int G = oracle.G();
  const int E = oracle.codebook().dim();
  const int K = oracle.K();
  Rng data_rng = make_rng(probes.seed, "probe-data");
  Rng prior_rng = make_rng(probes.seed, "probe-prior");
  Rng time_rng = make_rng(probes.seed, "probe-time");

  MatrixXd zt(probes.n_probes, G * E);
  std::vector<double> ts(static_cast<std::size_t>(probes.n_probes));
  for (int i = 0; i < probes.n_probes; ++i) {
    int label = 0;
    if (data.num_classes() > 1) label = static_cast<int>(data_rng() % static_cast<std::uint64_t>(data.num_classes()));
    const CodeGrid grid = sample_grid(data.classes[static_cast<std::size_t>(label)], data_rng);
    const LatentPoint z0 = sample_prior(G, E, prior_rng);
    const double t = sample_time(time_rng);
    const LatentPoint z = interpolate(z0, embed(oracle.codebook(), grid), t);
    zt.row(i) = Eigen::Map<const MatrixXd>(z.data(), 1, G * E);
    ts[static_cast<std::size_t>(i)] = t;
  }

  const Mat<double> logits = model(zt, ts);
  double total = 0.0;
  for (int i = 0; i < probes.n_probes; ++i) {
    const LatentPoint z = Eigen::Map<const MatrixXd>(zt.row(i).data(), G, E);
    const MatrixXd exact = oracle.posterior(z, ts[static_cast<std::size_t>(i)]);
    const MatrixXd block = Eigen::Map<const MatrixXd>(logits.row(i).data(), G, K);
    const MatrixXd q = softmax_temp(block, 1.0);
    for (int g = 0; g < G; ++g) {
      const VectorXd p = exact.row(g).transpose();
      const VectorXd qg = q.row(g).transpose();
      total += kl_divergence({p.data(), static_cast<std::size_t>(K)}, {qg.data(), static_cast<std::size_t>(K)});
    }
  }
  return total / (static_cast<double>(probes.n_probes) * G);
}

double posterior_fidelity(const Checkpoint& ckpt, const ProbeConfig& probes) {
  require_method(ckpt, Method::purrception);
  const Params<double> params = ckpt.inference_params();
  const OraclePosterior oracle = oracle_for(ckpt.data, *ckpt.codebook);
  const PosteriorModel model = [&](const MatrixXd& zt, const std::vector<double>& t) {
    ModelInput<double> in;
    in.latent = zt;
    in.t = t;
    if (ckpt.model.num_classes) in.labels.assign(t.size(), -1);
    return forward(params, ckpt.model, *ckpt.codebook, in);
  };
  return posterior_fidelity(model, oracle, ckpt.data, probes);
}

// ---------------------------------------------------------------------------
// Temperature sweep

std::vector<SweepRow> temperature_sweep(const Checkpoint& ckpt, std::vector<double> taus, const SamplerConfig& scfg) {
  require_method(ckpt, Method::purrception);
  std::stable_sort(taus.begin(), taus.end());
  const auto support = joint_support(ckpt.data.K(), ckpt.data.G());
  std::optional<JointTable> exact;
  if (support) exact = ckpt.data.joint(scfg.label);
  const MatrixXd marginals = ckpt.data.marginals(scfg.label);

  std::vector<SweepRow> rows;
  for (double tau : taus) {
    SamplerConfig s = scfg;
    s.tau = tau;
    const SampleResult res = sample_checkpoint(ckpt, s);
    const Histogram hist = histogram(res.codes, ckpt.data.K(), ckpt.data.G());
    SweepRow row;
    row.tau = tau;
    row.tv_joint = tv_joint_or_nan(hist, exact ? &*exact : nullptr);
    row.tv_marginal_mean = tv_marginal_mean(hist, marginals);
    row.entropy_mean = marginal_entropy_mean(hist);
    row.n_samples = s.n_samples;
    row.seed = s.seed;
    spdlog::info("sweep tau={} tv_joint={:.4f} entropy={:.4f}", tau, row.tv_joint, row.entropy_mean);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "tau,tv_joint,tv_marg,entropy,n,seed\n";
  for (const SweepRow& r : rows) {
    out += fmt_g(r.tau) + ',' + fmt_g(r.tv_joint) + ',' + fmt_g(r.tv_marginal_mean) + ',' + fmt_g(r.entropy_mean) + ',' +
           std::to_string(r.n_samples) + ',' + std::to_string(r.seed) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convergence comparison

std::vector<CompareRow> convergence_compare(const std::vector<TrainConfig>& runs, const CompareConfig& cfg) {
  if (runs.empty()) throw ConfigError("compare: no runs");
  if (cfg.eval_every < 1) throw ConfigError("compare: eval_every must be >= 1");
  const TrainConfig& first = runs.front();
  for (const TrainConfig& r : runs) {
    r.validate();
    if (r.data.to_json() != first.data.to_json()) throw ConfigError("compare: runs disagree on the data spec");
    if (r.codebook->to_json() != first.codebook->to_json()) throw ConfigError("compare: runs disagree on the codebook");
    if (r.seed != first.seed) throw ConfigError("compare: runs disagree on the seed");
    if (r.optim.iterations != first.optim.iterations) throw ConfigError("compare: runs disagree on the iteration budget");
  }
  for (std::size_t a = 0; a < runs.size(); ++a) {
    for (std::size_t b = a + 1; b < runs.size(); ++b) {
      if (runs[a].method == runs[b].method) throw ConfigError("compare: duplicate method");
    }
  }

  const int budget = first.optim.iterations;
  std::vector<std::int64_t> marks;
  for (std::int64_t it = cfg.eval_every; it <= budget; it += cfg.eval_every) marks.push_back(it);
  if (marks.empty() || marks.back() != budget) marks.push_back(budget);

  const auto support = joint_support(first.data.K(), first.data.G());
  std::optional<JointTable> exact;
  if (support) exact = first.data.joint();
  const MatrixXd marginals = first.data.marginals();

  std::vector<Trainer> trainers;
  trainers.reserve(runs.size());
  for (const TrainConfig& r : runs) trainers.emplace_back(r);

  std::vector<CompareRow> rows;
  for (std::int64_t mark : marks) {
    for (Trainer& trainer : trainers) {
      while (trainer.iteration() < mark) trainer.step();
      const Checkpoint ckpt = trainer.checkpoint();
      const SampleResult res = sample_checkpoint(ckpt, cfg.sampler);
      const Histogram hist = histogram(res.codes, first.data.K(), first.data.G());
      CompareRow row;
      row.method = trainer.config().method;
      row.iteration = mark;
      row.tv_joint = tv_joint_or_nan(hist, exact ? &*exact : nullptr);
      row.tv_marginal_mean = tv_marginal_mean(hist, marginals);
      row.wall_ms = trainer.config().logging.wall_clock ? trainer.train_ms() : 0.0;
      spdlog::info("compare {} iteration {} tv_joint={:.4f}", method_name(row.method), mark, row.tv_joint);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string out = "method,iteration,tv_joint,tv_marg,wall_ms\n";
  for (const CompareRow& r : rows) {
    char wall[48];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_ms);
    out += std::string(method_name(r.method)) + ',' + std::to_string(r.iteration) + ',' + fmt_g(r.tv_joint) + ',' +
           fmt_g(r.tv_marginal_mean) + ',' + wall + '\n';
  }
  return out;
}

}  // namespace vqflow
