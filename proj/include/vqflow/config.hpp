#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vqflow/eval.hpp"

namespace vqflow {

/// A parsed run configuration file:
///   {method, seed, model, optim, loss, data, codebook, sampler, logging, compare}
/// Unknown keys are rejected at every level. "data" and "codebook" may be
/// {"path": FILE} references, resolved against the config file's directory.
struct RunConfig {
  TrainConfig train;
  SamplerConfig sampler;
  json compare;  // null when absent
  json raw;      // the document after overrides, for provenance
};

/// Applies "dotted.key=value"; value is parsed as JSON when possible and kept
/// as a string otherwise.
void apply_override(json& doc, const std::string& assignment);

/// Precedence: file < --set overrides < explicit seed.
RunConfig parse_run_config(json doc, const std::filesystem::path& base_dir, const std::vector<std::string>& overrides = {},
                           std::optional<std::uint64_t> seed = std::nullopt);
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {},
                          std::optional<std::uint64_t> seed = std::nullopt);

/// Per-method training configs and evaluation settings from the "compare"
/// section: {"eval_every": N, "methods": {"purrception": {...}, "cfm": {...},
/// "dfm": {...}}}. Each method entry may override "model", "optim" and
/// "loss". All three methods are required.
std::pair<std::vector<TrainConfig>, CompareConfig> compare_runs(const RunConfig& cfg);

}  // namespace vqflow
