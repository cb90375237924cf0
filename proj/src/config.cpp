#include "vqflow/config.hpp"

#include <set>

namespace vqflow {

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!keys.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

json resolve_file(const json& section, const std::filesystem::path& base_dir, const std::string& where) {
  if (!section.is_object() || !section.contains("path")) return section;
  if (section.size() != 1) throw ConfigError(where + ": 'path' cannot be combined with inline fields");
  std::filesystem::path p = section.at("path").get<std::string>();
  if (p.is_relative()) p = base_dir / p;
  if (!std::filesystem::exists(p)) throw ConfigError(where + ": referenced file does not exist: " + p.string());
  try {
    return json::parse(read_file(p.string()));
  } catch (const json::parse_error& e) {
    throw ConfigError(where + ": malformed JSON in " + p.string() + ": " + e.what());
  }
}

void check_data_keys(const json& d, const std::string& where) {
  if (d.contains("classes")) {
    reject_unknown(d, {"v", "classes"}, where);
    for (const json& c : d.at("classes")) check_data_keys(c, where + ".classes[]");
    return;
  }
  reject_unknown(d, {"v", "kind", "G", "K", "probs", "init", "transition"}, where);
}

void check_model_keys(const json& m, const std::string& where) {
  reject_unknown(m, {"hidden_width", "hidden_layers", "time_features", "class_embed_dim", "num_classes", "class_drop_prob"}, where);
}

void check_optim_keys(const json& o, const std::string& where) {
  reject_unknown(o, {"lr", "weight_decay", "beta1", "beta2", "eps", "batch_size", "iterations", "ema_decay", "ema_warmup"}, where);
}

void merge_into(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) base[key] = value;
}

ModelConfig model_from_section(const json& m) {
  ModelConfig cfg;
  cfg.hidden_width = m.value("hidden_width", cfg.hidden_width);
  cfg.hidden_layers = m.value("hidden_layers", cfg.hidden_layers);
  cfg.time_features = m.value("time_features", cfg.time_features);
  cfg.class_embed_dim = m.value("class_embed_dim", cfg.class_embed_dim);
  cfg.class_drop_prob = m.value("class_drop_prob", cfg.class_drop_prob);
  if (m.contains("num_classes") && !m.at("num_classes").is_null()) cfg.num_classes = m.at("num_classes").get<int>();
  return cfg;
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty key segment in '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("--set: '" + key + "' descends into a non-object");
      *node = json::object();
    }
    start = dot + 1;
  }
}

RunConfig parse_run_config(json doc, const std::filesystem::path& base_dir, const std::vector<std::string>& overrides,
                           std::optional<std::uint64_t> seed) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  for (const std::string& s : overrides) apply_override(doc, s);
  if (seed) doc["seed"] = *seed;
  reject_unknown(doc, {"method", "seed", "model", "optim", "loss", "data", "codebook", "sampler", "logging", "compare"}, "config");

  RunConfig out;
  try {
    if (!doc.contains("data")) throw ConfigError("config: missing 'data'");
    if (!doc.contains("codebook")) throw ConfigError("config: missing 'codebook'");
    doc["data"] = resolve_file(doc.at("data"), base_dir, "data");
    doc["codebook"] = resolve_file(doc.at("codebook"), base_dir, "codebook");
    check_data_keys(doc.at("data"), "data");
    reject_unknown(doc.at("codebook"), {"v", "K", "E", "embeddings", "seed"}, "codebook");

    TrainConfig& t = out.train;
    t.method = method_from_name(doc.value("method", std::string("purrception")));
    t.seed = doc.value("seed", std::uint64_t{0});
    json codebook = doc.at("codebook");
    if (!codebook.contains("v")) codebook["v"] = 1;
    t.codebook = std::make_shared<const Codebook>(Codebook::from_json(codebook));
    t.data = DataSource::from_json(doc.at("data"));

    const json model = doc.value("model", json::object());
    check_model_keys(model, "model");
    t.model = model_from_section(model);

    const json optim = doc.value("optim", json::object());
    check_optim_keys(optim, "optim");
    t.optim = OptimConfig::from_json(optim);

    const json loss = doc.value("loss", json::object());
    reject_unknown(loss, {"z_coeff"}, "loss");
    t.z_coeff = loss.value("z_coeff", kDefaultZCoeff);

    const json logging = doc.value("logging", json::object());
    reject_unknown(logging, {"log_every", "ckpt_every", "wall_clock"}, "logging");
    t.logging = LoggingConfig::from_json(logging);

    t.finalize();

    json sampler = doc.value("sampler", json::object());
    reject_unknown(sampler, {"steps", "tau", "guidance_weight", "guidance_space", "label", "n_samples", "seed"}, "sampler");
    if (!sampler.contains("seed")) sampler["seed"] = derive_seed(t.seed, "sampler");
    out.sampler = SamplerConfig::from_json(sampler);

    if (doc.contains("compare")) {
      const json& cmp = doc.at("compare");
      reject_unknown(cmp, {"eval_every", "methods"}, "compare");
      if (cmp.contains("methods")) {
        reject_unknown(cmp.at("methods"), {"purrception", "cfm", "dfm"}, "compare.methods");
        for (const auto& [name, entry] : cmp.at("methods").items()) {
          reject_unknown(entry, {"model", "optim", "loss"}, "compare.methods." + name);
          if (entry.contains("model")) check_model_keys(entry.at("model"), "compare.methods." + name + ".model");
          if (entry.contains("optim")) check_optim_keys(entry.at("optim"), "compare.methods." + name + ".optim");
          if (entry.contains("loss")) reject_unknown(entry.at("loss"), {"z_coeff"}, "compare.methods." + name + ".loss");
        }
      }
      out.compare = cmp;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  out.raw = std::move(doc);
  return out;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(read_file(path.string()));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return parse_run_config(std::move(doc), path.parent_path(), overrides, seed);
}

std::pair<std::vector<TrainConfig>, CompareConfig> compare_runs(const RunConfig& cfg) {
  if (cfg.compare.is_null()) throw ConfigError("compare: config has no 'compare' section");
  CompareConfig cc;
  cc.eval_every = cfg.compare.value("eval_every", cc.eval_every);
  cc.sampler = cfg.sampler;
  const json methods = cfg.compare.value("methods", json::object());
  reject_unknown(methods, {"purrception", "cfm", "dfm"}, "compare.methods");

  std::vector<TrainConfig> runs;
  for (Method m : {Method::purrception, Method::cfm, Method::dfm}) {
    const std::string name = method_name(m);
    if (!methods.contains(name)) throw ConfigError("compare: missing config for method '" + name + "'");
    const json& entry = methods.at(name);
    reject_unknown(entry, {"model", "optim", "loss"}, "compare.methods." + name);

    json model = cfg.raw.value("model", json::object());
    json optim = cfg.raw.value("optim", json::object());
    json loss = cfg.raw.value("loss", json::object());
    try {
      if (entry.contains("model")) merge_into(model, entry.at("model"));
      if (entry.contains("optim")) merge_into(optim, entry.at("optim"));
      if (entry.contains("loss")) merge_into(loss, entry.at("loss"));
      check_model_keys(model, "compare.methods." + name + ".model");
      check_optim_keys(optim, "compare.methods." + name + ".optim");
      reject_unknown(loss, {"z_coeff"}, "compare.methods." + name + ".loss");

      TrainConfig t = cfg.train;
      t.method = m;
      t.model = model_from_section(model);
      t.optim = OptimConfig::from_json(optim);
      t.z_coeff = loss.value("z_coeff", kDefaultZCoeff);
      t.finalize();
      runs.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw ConfigError("compare." + name + ": " + e.what());
    }
  }
  return {std::move(runs), cc};
}

}  // namespace vqflow
