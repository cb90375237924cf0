#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "vqflow/common.hpp"

namespace vqflow {

using json = nlohmann::json;

/// A G x E array of embedding-space coordinates: z_0, z_t or z_1 for one grid.
using LatentPoint = MatrixXd;

/// Discrete data point: one zero-based code index per grid position.
struct CodeGrid {
  std::vector<int> codes;

  int size() const { return static_cast<int>(codes.size()); }
  int operator[](int g) const { return codes[static_cast<std::size_t>(g)]; }
  auto operator<=>(const CodeGrid&) const = default;
};

/// Partially masked grid for the discrete-token baseline. Masked entries hold
/// the sentinel K (one past the last legal code).
struct MaskedGrid {
  std::vector<int> codes;
  std::vector<bool> masked;

  int size() const { return static_cast<int>(codes.size()); }
  int masked_count() const;
};

/// Frozen K x E table of code embeddings.
class Codebook {
 public:
  /// Validates K >= 2, E >= 1, finite entries and pairwise-distinct rows.
  static Codebook from_table(MatrixXd table);
  /// Entries i.i.d. N(0,1); duplicate rows are redrawn. Deterministic per seed.
  static Codebook seeded(int K, int E, std::uint64_t seed);

  int size() const { return static_cast<int>(table_.rows()); }
  int dim() const { return static_cast<int>(table_.cols()); }
  const MatrixXd& embeddings() const { return table_; }
  auto row(int k) const { return table_.row(k); }

  json to_json() const;
  static Codebook from_json(const json& doc);

 private:
  explicit Codebook(MatrixXd table) : table_(std::move(table)) {}
  MatrixXd table_;
};

/// Nearest code per position (squared Euclidean; ties go to the lowest index).
CodeGrid quantize(const Codebook& cb, const LatentPoint& z);
/// Row-wise quantization of a batch stored as N x (G*E).
std::vector<CodeGrid> quantize_batch(const Codebook& cb, const MatrixXd& z, int G);
LatentPoint embed(const Codebook& cb, const CodeGrid& c);

/// Synthetic data distribution over [K]^G with an exactly enumerable joint.
struct DataSpec {
  enum class Kind { independent, markov };

  Kind kind = Kind::independent;
  int G = 1;
  int K = 2;
  MatrixXd probs;       // independent: G x K
  VectorXd init;        // markov: K
  MatrixXd transition;  // markov: K x K

  static DataSpec independent(MatrixXd probs);
  static DataSpec markov(int G, VectorXd init, MatrixXd transition);

  void validate() const;
  json to_json() const;
  static DataSpec from_json(const json& doc);
};

std::vector<CodeGrid> gen_dataset(const DataSpec& spec, std::size_t n, std::uint64_t seed);
CodeGrid sample_grid(const DataSpec& spec, Rng& rng);

/// K^G if it does not exceed kEnumerationLimit.
std::optional<std::size_t> joint_support(int K, int G);

/// Probability table over [K]^G; cell index is the mixed-radix number with
/// position 0 most significant.
struct JointTable {
  int G = 0;
  int K = 0;
  std::vector<double> p;

  std::size_t index(const CodeGrid& c) const;
  CodeGrid grid(std::size_t index) const;
};

JointTable exact_joint(const DataSpec& spec);
/// Exact per-position marginals, G x K. No enumeration needed.
MatrixXd exact_marginals(const DataSpec& spec);

/// One DataSpec per class label. A single entry means unlabeled data.
struct DataSource {
  std::vector<DataSpec> classes;

  int G() const { return classes.front().G; }
  int K() const { return classes.front().K; }
  int num_classes() const { return static_cast<int>(classes.size()); }
  /// Joint for a label, or the uniform mixture over classes when unlabeled.
  JointTable joint(std::optional<int> label = std::nullopt) const;
  MatrixXd marginals(std::optional<int> label = std::nullopt) const;

  void validate() const;
  json to_json() const;
  static DataSource from_json(const json& doc);
};

struct Dataset {
  int G = 0;
  int K = 0;
  std::vector<CodeGrid> grids;
};

/// Binary layout: "VQFLOWDS", u32 n, u32 G, u32 K, then n*G u16 indices,
/// all little-endian.
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace vqflow
