#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slm/tensor.hpp"

namespace slm {

enum class LrSchedule { InverseSqrt, Constant };

struct AdamOptions {
  double learning_rate = 9e-5;
  std::int64_t warmup_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  LrSchedule schedule = LrSchedule::InverseSqrt;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

// Linear warmup to the base rate, then inverse-square-root decay (or flat).
// `step` counts updates from 1.
double effective_learning_rate(const AdamOptions& opts, std::int64_t step);

template <typename T>
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
};

// One Adam update over `params`, then clears their gradients. Throws
// PreconditionError when a parameter has no gradient. Returns the gradient
// norm before clipping.
template <typename T>
double adam_step(std::span<ad::Tensor<T>> params, AdamState<T>& state);

}  // namespace slm
