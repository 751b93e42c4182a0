#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ssr3d::cli {

inline constexpr const char* kToolVersion = "0.1.0";

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one command. `args` excludes the program name, e.g.
/// {"params", "--filters", "8"}. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ssr3d::cli
