#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace vqflow {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatrixXd = Mat<double>;
using VectorXd = Vec<double>;

using Rng = std::mt19937_64;

// Largest joint support the exact oracle will enumerate.
inline constexpr std::size_t kEnumerationLimit = 4096;
// Times are clamped to [0, 1 - kTimeGuard] wherever 1/(1-t) appears.
inline constexpr double kTimeGuard = 1e-3;
inline constexpr double kTauMin = 1e-3;

/// Invalid configuration, malformed input file, or violated precondition that
/// the operator can fix. The CLI maps it to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values during training or integration. CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Serialized artifact failed validation (magic, version, hash, truncation).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

/// Seed for a labeled substream of a top-level seed. Components draw from
/// independent streams ("data", "init", "time", "prior", "sampler", ...) and
/// per-sample streams use the index.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index = 0);

/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

inline Rng make_rng(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, label, index));
}

/// Uniform draw in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Inverse-CDF draw from a probability vector; falls back to the last index
/// with positive mass when rounding leaves u beyond the accumulated total.
template <typename Probs>
int sample_categorical(const Probs& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  int last = 0;
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    const double p = static_cast<double>(probs(k));
    if (p <= 0.0) continue;
    acc += p;
    last = static_cast<int>(k);
    if (u < acc) return last;
  }
  return last;
}

}  // namespace vqflow
