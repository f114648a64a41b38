#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "unimask/graph.hpp"

namespace unimask {

/// Builds a scalar loss from the current parameter values.
using LossBuilder = std::function<NodeId(Graph&, const ParamStore&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t min_coords = 50;
  std::uint64_t seed = 0;
  /// Denominator floor for the relative error, so coordinates whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compare reverse-mode gradients with central finite differences on a random
/// subsample of parameter coordinates. Every parameter tensor contributes at
/// least one coordinate; the rest are drawn uniformly over all scalars.
GradCheckResult grad_check(ParamStore& params, const LossBuilder& build,
                           const GradCheckOptions& options = {});

}  // namespace unimask
