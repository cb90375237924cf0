#include "vqflow/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vqflow {

namespace {

bool rows_equal(const MatrixXd& m, Eigen::Index a, Eigen::Index b) {
  return (m.row(a).array() == m.row(b).array()).all();
}

MatrixXd matrix_from_json(const json& rows, const char* what) {
  if (!rows.is_array() || rows.empty()) throw ConfigError(std::string(what) + ": expected nested array");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto m = static_cast<Eigen::Index>(rows.front().size());
  MatrixXd out(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const json& row = rows[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != m) {
      throw ConfigError(std::string(what) + ": ragged rows");
    }
    for (Eigen::Index j = 0; j < m; ++j) out(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return out;
}

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

void check_distribution(const auto& row, const char* what) {
  for (Eigen::Index k = 0; k < row.size(); ++k) {
    if (!std::isfinite(row(k)) || row(k) < 0.0) throw ConfigError(std::string(what) + ": negative or non-finite probability");
  }
  if (std::abs(row.sum() - 1.0) > 1e-12) throw ConfigError(std::string(what) + ": row does not sum to 1");
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

constexpr std::string_view kDatasetMagic = "VQFLOWDS";

}  // namespace

int MaskedGrid::masked_count() const {
  return static_cast<int>(std::count(masked.begin(), masked.end(), true));
}

// ---------------------------------------------------------------------------
// Codebook

Codebook Codebook::from_table(MatrixXd table) {
  if (table.rows() < 2) throw ConfigError("codebook needs K >= 2");
  if (table.cols() < 1) throw ConfigError("codebook needs E >= 1");
  if (!table.allFinite()) throw ConfigError("codebook has non-finite entries");
  for (Eigen::Index a = 0; a < table.rows(); ++a) {
    for (Eigen::Index b = a + 1; b < table.rows(); ++b) {
      if (rows_equal(table, a, b)) {
        throw ConfigError("codebook has duplicate rows " + std::to_string(a) + " and " + std::to_string(b));
      }
    }
  }
  return Codebook(std::move(table));
}

Codebook Codebook::seeded(int K, int E, std::uint64_t seed) {
  if (K < 2 || E < 1) throw ConfigError("codebook needs K >= 2 and E >= 1");
  Rng rng = make_rng(seed, "codebook");
  std::normal_distribution<double> normal;
  MatrixXd table(K, E);
  for (int k = 0; k < K; ++k) {
    bool fresh = false;
    while (!fresh) {
      for (int e = 0; e < E; ++e) table(k, e) = normal(rng);
      fresh = true;
      for (int j = 0; j < k && fresh; ++j) fresh = !rows_equal(table, j, k);
    }
  }
  return Codebook(std::move(table));
}

json Codebook::to_json() const {
  return json{{"v", 1}, {"K", size()}, {"E", dim()}, {"embeddings", matrix_to_json(table_)}};
}

Codebook Codebook::from_json(const json& doc) {
  if (doc.value("v", 0) != 1) throw ConfigError("codebook: unsupported schema version");
  if (doc.contains("embeddings")) {
    MatrixXd table = matrix_from_json(doc.at("embeddings"), "codebook.embeddings");
    if (doc.contains("K") && doc.at("K").get<int>() != table.rows()) throw ConfigError("codebook: K does not match table");
    if (doc.contains("E") && doc.at("E").get<int>() != table.cols()) throw ConfigError("codebook: E does not match table");
    return from_table(std::move(table));
  }
  return seeded(doc.at("K").get<int>(), doc.at("E").get<int>(), doc.at("seed").get<std::uint64_t>());
}

CodeGrid quantize(const Codebook& cb, const LatentPoint& z) {
  if (z.cols() != cb.dim()) throw std::invalid_argument("quantize: latent width does not match codebook dimension");
  if (!z.allFinite()) throw std::invalid_argument("quantize: non-finite latent");
  CodeGrid out;
  out.codes.resize(static_cast<std::size_t>(z.rows()));
  const MatrixXd& table = cb.embeddings();
  for (Eigen::Index g = 0; g < z.rows(); ++g) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cb.size(); ++k) {
      const double d = (z.row(g) - table.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out.codes[static_cast<std::size_t>(g)] = best;
  }
  return out;
}

std::vector<CodeGrid> quantize_batch(const Codebook& cb, const MatrixXd& z, int G) {
  if (z.cols() != static_cast<Eigen::Index>(G) * cb.dim()) throw std::invalid_argument("quantize_batch: width != G*E");
  std::vector<CodeGrid> out;
  out.reserve(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    LatentPoint zi = Eigen::Map<const MatrixXd>(z.row(i).data(), G, cb.dim());
    out.push_back(quantize(cb, zi));
  }
  return out;
}

LatentPoint embed(const Codebook& cb, const CodeGrid& c) {
  LatentPoint z(c.size(), cb.dim());
  for (int g = 0; g < c.size(); ++g) {
    if (c[g] < 0 || c[g] >= cb.size()) throw std::out_of_range("embed: code index out of range");
    z.row(g) = cb.row(c[g]);
  }
  return z;
}

// ---------------------------------------------------------------------------
// DataSpec

DataSpec DataSpec::independent(MatrixXd probs) {
  DataSpec s;
  s.kind = Kind::independent;
  s.G = static_cast<int>(probs.rows());
  s.K = static_cast<int>(probs.cols());
  s.probs = std::move(probs);
  s.validate();
  return s;
}

DataSpec DataSpec::markov(int G, VectorXd init, MatrixXd transition) {
  DataSpec s;
  s.kind = Kind::markov;
  s.G = G;
  s.K = static_cast<int>(init.size());
  s.init = std::move(init);
  s.transition = std::move(transition);
  s.validate();
  return s;
}

void DataSpec::validate() const {
  if (G < 1) throw ConfigError("data spec: G must be >= 1");
  if (K < 2) throw ConfigError("data spec: K must be >= 2");
  if (kind == Kind::independent) {
    if (probs.rows() != G || probs.cols() != K) throw ConfigError("data spec: probs must be G x K");
    for (Eigen::Index g = 0; g < probs.rows(); ++g) check_distribution(probs.row(g), "data spec probs");
  } else {
    if (init.size() != K) throw ConfigError("data spec: init must have K entries");
    if (transition.rows() != K || transition.cols() != K) throw ConfigError("data spec: transition must be K x K");
    check_distribution(init, "data spec init");
    for (Eigen::Index k = 0; k < K; ++k) check_distribution(transition.row(k), "data spec transition");
  }
}

json DataSpec::to_json() const {
  json doc{{"v", 1}, {"G", G}, {"K", K}};
  if (kind == Kind::independent) {
    doc["kind"] = "independent";
    doc["probs"] = matrix_to_json(probs);
  } else {
    doc["kind"] = "markov";
    doc["init"] = std::vector<double>(init.data(), init.data() + init.size());
    doc["transition"] = matrix_to_json(transition);
  }
  return doc;
}

DataSpec DataSpec::from_json(const json& doc) {
  if (doc.value("v", 1) != 1) throw ConfigError("data spec: unsupported schema version");
  const std::string kind = doc.at("kind").get<std::string>();
  DataSpec s;
  if (kind == "independent") {
    s = independent(matrix_from_json(doc.at("probs"), "data.probs"));
  } else if (kind == "markov") {
    const auto init = doc.at("init").get<std::vector<double>>();
    s = markov(doc.at("G").get<int>(), Eigen::Map<const VectorXd>(init.data(), static_cast<Eigen::Index>(init.size())),
               matrix_from_json(doc.at("transition"), "data.transition"));
  } else {
    throw ConfigError("data spec: unknown kind '" + kind + "'");
  }
  if (doc.contains("G") && doc.at("G").get<int>() != s.G) throw ConfigError("data spec: G does not match tables");
  if (doc.contains("K") && doc.at("K").get<int>() != s.K) throw ConfigError("data spec: K does not match tables");
  return s;
}

CodeGrid sample_grid(const DataSpec& spec, Rng& rng) {
  CodeGrid c;
  c.codes.resize(static_cast<std::size_t>(spec.G));
  if (spec.kind == DataSpec::Kind::independent) {
    for (int g = 0; g < spec.G; ++g) c.codes[static_cast<std::size_t>(g)] = sample_categorical(spec.probs.row(g), rng);
  } else {
    int prev = sample_categorical(spec.init, rng);
    c.codes[0] = prev;
    for (int g = 1; g < spec.G; ++g) {
      prev = sample_categorical(spec.transition.row(prev), rng);
      c.codes[static_cast<std::size_t>(g)] = prev;
    }
  }
  return c;
}

std::vector<CodeGrid> gen_dataset(const DataSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, "data");
  std::vector<CodeGrid> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_grid(spec, rng));
  return out;
}

std::optional<std::size_t> joint_support(int K, int G) {
  if (K < 1 || G < 1) return std::nullopt;
  std::size_t size = 1;
  for (int g = 0; g < G; ++g) {
    size *= static_cast<std::size_t>(K);
    if (size > kEnumerationLimit) return std::nullopt;
  }
  return size;
}

std::size_t JointTable::index(const CodeGrid& c) const {
  std::size_t idx = 0;
  for (int g = 0; g < G; ++g) {
    if (c[g] < 0 || c[g] >= K) throw std::out_of_range("joint index: code out of range");
    idx = idx * static_cast<std::size_t>(K) + static_cast<std::size_t>(c[g]);
  }
  return idx;
}

CodeGrid JointTable::grid(std::size_t index) const {
  CodeGrid c;
  c.codes.assign(static_cast<std::size_t>(G), 0);
  for (int g = G - 1; g >= 0; --g) {
    c.codes[static_cast<std::size_t>(g)] = static_cast<int>(index % static_cast<std::size_t>(K));
    index /= static_cast<std::size_t>(K);
  }
  return c;
}

JointTable exact_joint(const DataSpec& spec) {
  spec.validate();
  const auto support = joint_support(spec.K, spec.G);
  if (!support) throw ConfigError("exact_joint: K^G exceeds the enumeration limit of " + std::to_string(kEnumerationLimit));
  JointTable table{spec.G, spec.K, std::vector<double>(*support)};
  for (std::size_t i = 0; i < *support; ++i) {
    const CodeGrid c = table.grid(i);
    double p;
    if (spec.kind == DataSpec::Kind::independent) {
      p = 1.0;
      for (int g = 0; g < spec.G; ++g) p *= spec.probs(g, c[g]);
    } else {
      p = spec.init(c[0]);
      for (int g = 1; g < spec.G; ++g) p *= spec.transition(c[g - 1], c[g]);
    }
    table.p[i] = p;
  }
  return table;
}

MatrixXd exact_marginals(const DataSpec& spec) {
  spec.validate();
  if (spec.kind == DataSpec::Kind::independent) return spec.probs;
  MatrixXd m(spec.G, spec.K);
  m.row(0) = spec.init.transpose();
  for (int g = 1; g < spec.G; ++g) m.row(g) = m.row(g - 1) * spec.transition;
  return m;
}

// ---------------------------------------------------------------------------
// DataSource

JointTable DataSource::joint(std::optional<int> label) const {
  if (label) {
    if (*label < 0 || *label >= num_classes()) throw ConfigError("label out of range");
    return exact_joint(classes[static_cast<std::size_t>(*label)]);
  }
  JointTable mix = exact_joint(classes.front());
  for (std::size_t c = 1; c < classes.size(); ++c) {
    const JointTable other = exact_joint(classes[c]);
    for (std::size_t i = 0; i < mix.p.size(); ++i) mix.p[i] += other.p[i];
  }
  for (double& p : mix.p) p /= static_cast<double>(classes.size());
  return mix;
}

MatrixXd DataSource::marginals(std::optional<int> label) const {
  if (label) {
    if (*label < 0 || *label >= num_classes()) throw ConfigError("label out of range");
    return exact_marginals(classes[static_cast<std::size_t>(*label)]);
  }
  MatrixXd m = MatrixXd::Zero(G(), K());
  for (const DataSpec& s : classes) m += exact_marginals(s);
  return m / static_cast<double>(classes.size());
}

void DataSource::validate() const {
  if (classes.empty()) throw ConfigError("data source: no specs");
  for (const DataSpec& s : classes) {
    s.validate();
    if (s.G != G() || s.K != K()) throw ConfigError("data source: class specs disagree on G or K");
  }
}

json DataSource::to_json() const {
  if (classes.size() == 1) return classes.front().to_json();
  json list = json::array();
  for (const DataSpec& s : classes) list.push_back(s.to_json());
  return json{{"v", 1}, {"classes", list}};
}

DataSource DataSource::from_json(const json& doc) {
  DataSource src;
  if (doc.contains("classes")) {
    for (const json& c : doc.at("classes")) src.classes.push_back(DataSpec::from_json(c));
  } else {
    src.classes.push_back(DataSpec::from_json(doc));
  }
  src.validate();
  return src;
}

// ---------------------------------------------------------------------------
// Dataset file

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  if (data.K > 65536) throw ConfigError("dataset: K does not fit u16 indices");
  std::string bytes(kDatasetMagic);
  put_u32(bytes, static_cast<std::uint32_t>(data.grids.size()));
  put_u32(bytes, static_cast<std::uint32_t>(data.G));
  put_u32(bytes, static_cast<std::uint32_t>(data.K));
  bytes.reserve(bytes.size() + data.grids.size() * static_cast<std::size_t>(data.G) * 2);
  for (const CodeGrid& c : data.grids) {
    if (c.size() != data.G) throw std::invalid_argument("dataset: grid size mismatch");
    for (int code : c.codes) {
      if (code < 0 || code >= data.K) throw std::out_of_range("dataset: code out of range");
      bytes.push_back(static_cast<char>(code & 0xff));
      bytes.push_back(static_cast<char>((code >> 8) & 0xff));
    }
  }
  write_file_atomic(path.string(), bytes);
}

Dataset read_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path.string());
  if (bytes.size() < 20 || bytes.compare(0, 8, kDatasetMagic) != 0) throw FormatError("dataset: bad magic");
  Dataset data;
  const std::uint32_t n = get_u32(bytes, 8);
  data.G = static_cast<int>(get_u32(bytes, 12));
  data.K = static_cast<int>(get_u32(bytes, 16));
  const std::size_t expected = 20 + static_cast<std::size_t>(n) * static_cast<std::size_t>(data.G) * 2;
  if (bytes.size() != expected) throw FormatError("dataset: truncated or oversized payload");
  std::size_t at = 20;
  data.grids.resize(n);
  for (auto& c : data.grids) {
    c.codes.resize(static_cast<std::size_t>(data.G));
    for (int& code : c.codes) {
      code = static_cast<unsigned char>(bytes[at]) | (static_cast<unsigned char>(bytes[at + 1]) << 8);
      at += 2;
      if (code >= data.K) throw FormatError("dataset: code out of range");
    }
  }
  return data;
}

}  // namespace vqflow
