#include "unimask/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <utility>

#include "unimask/random.hpp"

namespace unimask {
namespace {

double evaluate(ParamStore& params, const LossBuilder& build) {
  Graph g;
  return g.value(build(g, params)).item();
}

}  // namespace

GradCheckResult grad_check(ParamStore& params, const LossBuilder& build,
                           const GradCheckOptions& options) {
  Graph g;
  const NodeId loss = build(g, params);
  const Gradients analytic = backward(g, loss, params);

  Rng rng(options.seed);
  std::set<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    total += params.value(p).size();
    if (!params.value(p).empty()) coords.emplace(p, rng.index(params.value(p).size()));
  }
  const std::size_t want = std::min(total, std::max(options.min_coords, coords.size()));
  while (coords.size() < want) {
    std::size_t flat = rng.index(total);
    std::size_t p = 0;
    while (flat >= params.value(p).size()) flat -= params.value(p++).size();
    coords.emplace(p, flat);
  }

  GradCheckResult result;
  for (const auto& [p, k] : coords) {
    double& x = params.value(p)[k];
    const double saved = x;
    x = saved + options.eps;
    const double up = evaluate(params, build);
    x = saved - options.eps;
    const double down = evaluate(params, build);
    x = saved;
    const double numeric = (up - down) / (2.0 * options.eps);
    const double a = analytic[p] ? (*analytic[p])[k] : 0.0;
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    const double rel = std::abs(a - numeric) / denom;
    ++result.coords_checked;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = params.name(p);
      result.worst_index = k;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace unimask
