#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "vqflow/config.hpp"

namespace testutil {

using namespace vqflow;

inline MatrixXd mat(std::initializer_list<std::initializer_list<double>> rows) {
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

inline Codebook square_codebook() { return Codebook::from_table(mat({{0, 0}, {2, 0}, {0, 2}, {2, 2}})); }
inline Codebook pair_codebook() { return Codebook::from_table(mat({{0, 0}, {2, 0}})); }

inline MatrixXd cyclic_transition() {
  return mat({{0.7, 0.1, 0.1, 0.1}, {0.1, 0.7, 0.1, 0.1}, {0.1, 0.1, 0.7, 0.1}, {0.1, 0.1, 0.1, 0.7}});
}

inline DataSpec markov_reference() {
  return DataSpec::markov(2, VectorXd::Constant(4, 0.25), cyclic_transition());
}

inline DataSpec pair_reference() { return DataSpec::independent(mat({{0.5, 0.5}})); }

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vqflow_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// A seeded training batch built the same way the trainer does: grid from the
// spec, z0 from the prior, t uniform, then either z_t or a corrupted grid.
template <typename T>
Batch<T> make_batch(Method method, const ModelConfig& cfg, const Codebook& cb, const DataSpec& spec, int n, std::uint64_t seed) {
  Rng rng = make_rng(seed, "batch");
  Batch<T> b;
  const int width = cfg.G * cfg.E;
  b.input.latent = Mat<T>(n, width);
  b.z0 = MatrixXd(n, width);
  b.z1 = MatrixXd(n, width);
  for (int i = 0; i < n; ++i) {
    const CodeGrid grid = sample_grid(spec, rng);
    const LatentPoint z0 = sample_prior(cfg.G, cfg.E, rng);
    const LatentPoint z1 = embed(cb, grid);
    const double t = sample_time(rng);
    const LatentPoint zt = interpolate(z0, z1, t);
    b.z0.row(i) = Eigen::Map<const MatrixXd>(z0.data(), 1, width);
    b.z1.row(i) = Eigen::Map<const MatrixXd>(z1.data(), 1, width);
    b.input.latent.row(i) = Eigen::Map<const MatrixXd>(zt.data(), 1, width).template cast<T>();
    b.input.t.push_back(t);
    if (cfg.num_classes) b.input.labels.push_back(static_cast<int>(rng() % *cfg.num_classes));
    if (method == Method::dfm) b.input.tokens.push_back(dfm_corrupt(grid, t, cfg.K, rng));
    b.targets.push_back(grid);
  }
  return b;
}

inline ModelConfig tiny_model(Method method, int G, int K, int E) {
  ModelConfig cfg;
  cfg.G = G;
  cfg.K = K;
  cfg.E = E;
  cfg.hidden_width = 16;
  cfg.hidden_layers = 2;
  cfg.time_features = 8;
  cfg.head = head_for(method);
  return cfg;
}

// Initialized parameters with every entry perturbed, so the zero output layer
// does not hide gradient paths.
inline Params<double> perturbed_params(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  Params<double> p = init_params<double>(cfg, seed);
  Rng rng = make_rng(seed, "perturb");
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : p.values) v += n(rng);
  return p;
}

inline bool close_rel(double a, double b, double rel) { return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)); }

}  // namespace testutil
