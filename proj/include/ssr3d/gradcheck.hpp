#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace ssr3d {

struct GradcheckOptions {
  double step = 1e-5;       // central-difference half step
  double tolerance = 1e-5;  // on max|analytic - numeric| / max|numeric|
  std::uint64_t seed = 0;
  /// Op whose analytic gradient is deliberately corrupted; empty for none.
  std::string inject_fault;
};

struct GradcheckRow {
  std::string op;
  std::size_t cases = 0;    // geometries / input sets tried
  std::size_t checked = 0;  // scalar derivatives compared
  std::size_t skipped = 0;  // coordinates with a ReLU switching within +-step
  double max_rel_error = 0.0;
  bool passed = false;
};

/// A row fails when more than this share of its coordinates is skipped.
inline constexpr double kMaxSkippedFraction = 0.05;

/// Names of every checked op, in report order.
const std::vector<std::string>& gradcheck_ops();

/// One row per op: conv3d, conv3d_transposed, relu, add, scale,
/// concat_channels, sum, l1_loss, mse_loss, sam_loss, combo_loss and a tiny
/// end-to-end network ("ssrnet").
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& options = {});

}  // namespace ssr3d
