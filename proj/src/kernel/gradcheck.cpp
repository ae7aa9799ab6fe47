#include "cemformer/kernel/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cemformer/error.hpp"

namespace cem::kernel {

GradCheckReport finite_diff_grad_check(const LossBuilder& loss, std::span<Tensor> params, double h,
                                       double tol, double abs_floor) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad_check: step must be positive");

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    backward(loss(tape), tape);
  }

  auto evaluate = [&loss]() {
    Tape quiet(false);
    return loss(quiet).item();
  };

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = evaluate();
      values[i] = saved - h;
      const double down = evaluate();
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double rel_err = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
      if (rel_err > report.max_rel_error) {
        report.max_rel_error = rel_err;
        report.worst_param = pi;
        report.worst_index = i;
      }
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      ++report.coordinates;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace cem::kernel
