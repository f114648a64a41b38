#include "unimask/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unimask {

AdamState AdamState::for_params(const ParamStore& params) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.value(i).shape());
    s.v.emplace_back(params.value(i).shape());
  }
  return s;
}

void adam_step(ParamStore& params, const Gradients& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adam_step: gradient/state count does not match parameter count");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]) continue;
    if (grads[i]->shape() != params.value(i).shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_string(grads[i]->shape()) +
                       " for parameter " + params.name(i) + " " +
                       shape_string(params.value(i).shape()));
    }
    if (!grads[i]->all_finite()) {
      throw NumericError("adam_step: non-finite gradient for parameter " + params.name(i));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i]) continue;
    const Tensor& g = *grads[i];
    Tensor& p = params.value(i);
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& g : grads) {
    if (!g) continue;
    for (double v : g->data()) s += v * v;
  }
  return std::sqrt(s);
}

double clip_grad_norm(Gradients& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
  if (norm > max_norm * (1.0 + 1e-12)) {
    const double factor = max_norm / norm;
    for (auto& g : grads) {
      if (!g) continue;
      for (double& v : g->storage()) v *= factor;
    }
  }
  return norm;
}

double warmup_linear_lr(std::int64_t step, std::int64_t total, double peak,
                        double warmup_fraction) {
  if (total <= 0) return 0.0;
  const auto warmup = std::int64_t(std::llround(warmup_fraction * double(total)));
  if (step < warmup) return peak * double(step) / double(warmup);
  if (total == warmup) return peak;
  const double frac = double(total - step) / double(total - warmup);
  return peak * std::clamp(frac, 0.0, 1.0);
}

double TriStageSchedule::lr(std::int64_t step, std::int64_t total, double peak) const {
  if (std::abs(warmup + hold + decay - 1.0) > 1e-9) {
    throw std::invalid_argument("tri-stage schedule: phase ratios must sum to 1");
  }
  if (total <= 0) return peak;
  const double t = double(step);
  const double w = warmup * double(total);
  const double h = hold * double(total);
  const double d = decay * double(total);
  if (t < w) return peak * (init_scale + (1.0 - init_scale) * t / w);
  if (t < w + h) return peak;
  if (d <= 0.0) return peak * final_scale;
  const double frac = std::clamp((t - w - h) / d, 0.0, 1.0);
  return peak * (1.0 - (1.0 - final_scale) * frac);
}

}  // namespace unimask
