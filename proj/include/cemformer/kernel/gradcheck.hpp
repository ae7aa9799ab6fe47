#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "cemformer/kernel/tape.hpp"
#include "cemformer/kernel/tensor.hpp"

namespace cem::kernel {

/// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Tensor(Tape&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;  // index into the params span
  std::size_t worst_index = 0;  // flat coordinate within that parameter
  bool passed = false;
};

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h on
/// every coordinate of every parameter. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor); abs_floor
/// keeps vanishing gradients from turning rounding noise into large ratios.
/// Parameter values are restored afterwards; their gradient slots hold the
/// analytic gradient.
GradCheckReport finite_diff_grad_check(const LossBuilder& loss, std::span<Tensor> params, double h,
                                       double tol, double abs_floor = 1e-6);

}  // namespace cem::kernel
