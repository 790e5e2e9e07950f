#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "segdiff/tensor.hpp"

namespace segdiff {

/// AdamW with decoupled weight decay: the decay term joins the update itself
/// and never touches the gradient moments.
template <class T>
struct AdamWState {
  std::int64_t step_count = 0;
  T learning_rate = T(1e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(1e-2);
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  void init(std::span<const Tensor<T>> params) {
    first_moment.clear();
    second_moment.clear();
    for (const auto& p : params) {
      first_moment.emplace_back(p.numel(), T(0));
      second_moment.emplace_back(p.numel(), T(0));
    }
  }
};

template <class T>
void adamw_step(std::span<Tensor<T>> params, AdamWState<T>& state) {
  if (state.first_moment.size() != params.size())
    throw std::invalid_argument("adamw_step: state holds " +
                                std::to_string(state.first_moment.size()) +
                                " moments for " + std::to_string(params.size()) +
                                " parameters");
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(double(state.beta1), double(state.step_count));
  const double bc2 = 1.0 - std::pow(double(state.beta2), double(state.step_count));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.has_grad())
      throw std::invalid_argument("adamw_step: parameter " + std::to_string(pi) +
                                  " has no gradient");
    auto& m = state.first_moment[pi];
    auto& v = state.second_moment[pi];
    if (static_cast<std::int64_t>(m.size()) != p.numel())
      throw std::invalid_argument("adamw_step: moment shape mismatch at parameter " +
                                  std::to_string(pi));
    auto pd = p.data();
    auto g = p.grad();
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = T(double(m[i]) / bc1);
      const T vhat = T(double(v[i]) / bc2);
      pd[i] -= state.learning_rate *
               (mhat / (std::sqrt(vhat) + state.eps) + state.weight_decay * pd[i]);
    }
  }
}

/// Linear warmup to base_lr over warmup_steps, then cosine decay to zero at
/// total_steps.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps,
                          std::int64_t warmup_steps, double base_lr) {
  if (warmup_steps > total_steps)
    throw ConfigError("lr_schedule: warmup_steps " + std::to_string(warmup_steps) +
                      " exceeds total_steps " + std::to_string(total_steps));
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("lr_schedule: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + "]");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * double(step) / double(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double progress = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace segdiff
