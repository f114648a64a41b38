#pragma once

#include <cstdint>
#include <vector>

#include "unimask/graph.hpp"

namespace unimask {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Tensor> m;  ///< first moments, aligned with the ParamStore
  std::vector<Tensor> v;  ///< second moments

  static AdamState for_params(const ParamStore& params);
};

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched and their moments do not decay.
/// Throws NumericError naming the parameter when a gradient is non-finite.
void adam_step(ParamStore& params, const Gradients& grads, AdamState& state, double lr);

/// Global L2 norm over all present gradients.
double global_norm(const Gradients& grads);

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// pre-clip norm. Norms within a relative 1e-12 of the limit are left as is,
/// which makes clipping idempotent.
double clip_grad_norm(Gradients& grads, double max_norm = 1.0);

/// Linear warmup from 0 to `peak` over `warmup_fraction` of `total` steps,
/// then linear decay to 0 at `total`.
double warmup_linear_lr(std::int64_t step, std::int64_t total, double peak,
                        double warmup_fraction);

/// Tri-stage schedule: linear warmup, constant hold, linear decay. `phases`
/// are fractions of `total` and must sum to 1. Warmup starts from
/// `init_scale * peak` and decay ends at `final_scale * peak`.
struct TriStageSchedule {
  double warmup = 0.33;
  double hold = 0.0;
  double decay = 0.67;
  double init_scale = 0.01;
  double final_scale = 0.05;

  double lr(std::int64_t step, std::int64_t total, double peak) const;
};

}  // namespace unimask
