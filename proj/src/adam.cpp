#include "slm/adam.hpp"

#include <cmath>

#include "slm/error.hpp"

namespace slm {

double effective_learning_rate(const AdamOptions& opts, std::int64_t step) {
  if (step < 1) throw PreconditionError("learning-rate step counts from 1");
  if (opts.warmup_steps <= 0) return opts.learning_rate;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(opts.warmup_steps);
  const double decay =
      opts.schedule == LrSchedule::InverseSqrt ? std::sqrt(w / s) : 1.0;
  return opts.learning_rate * std::min(s / w, decay);
}

template <typename T>
double adam_step(std::span<ad::Tensor<T>> params, AdamState<T>& state) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw PreconditionError("adam_step: parameter " + std::to_string(i) +
                              " has no gradient");
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), T(0));
      state.second_moment.emplace_back(p.size(), T(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw PreconditionError("adam_step: parameter list changed size");
  }

  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  const double clip = state.options.clip_norm > 0.0 && norm > state.options.clip_norm
                          ? state.options.clip_norm / norm
                          : 1.0;

  ++state.step;
  const auto& o = state.options;
  const double lr = effective_learning_rate(o, state.step);
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(o.beta1);
  const T b2 = static_cast<T>(o.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(o.epsilon);
  const T c = static_cast<T>(clip);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_value();
    auto g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != w.size()) {
      throw PreconditionError("adam_step: moment buffer shape mismatch");
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g[j] * c;
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
    params[i].clear_grad();
  }
  return norm;
}

template double adam_step<float>(std::span<ad::Tensor<float>>, AdamState<float>&);
template double adam_step<double>(std::span<ad::Tensor<double>>, AdamState<double>&);

}  // namespace slm
