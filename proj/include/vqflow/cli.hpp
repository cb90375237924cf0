#pragma once

#include <string>
#include <vector>

namespace vqflow {

inline constexpr int kExitOk = 0;
inline constexpr int kExitTolerance = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Entry point for the `vqflow` tool. args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace vqflow
