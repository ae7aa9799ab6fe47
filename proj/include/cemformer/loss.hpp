#pragma once

// Training objective.
//
//   ce_t  = -log p_y
//   cc_t  = -sum over matched rules (r, A) of log(1 - p_r)
//   joint = sum_t w_t (ce_t + cc_t),   w_t = exp(-(T - t))
//
// Probabilities are clamped at 1e-12 before every log. A class named by two
// matched rules is penalized twice.

#include <cstddef>
#include <span>
#include <vector>

#include "cemformer/kernel/tape.hpp"
#include "cemformer/kernel/tensor.hpp"
#include "cemformer/rules.hpp"

namespace cem::loss {

using kernel::Tape;
using kernel::Tensor;

constexpr double kProbFloor = 1e-12;

/// -log max(p_y, 1e-12) on a [1 x C] probability row, as a scalar tensor.
Tensor cross_entropy(Tape& tape, const Tensor& probs, std::size_t label);

/// Context-consistency penalty for one prediction.
Tensor cc_loss(Tape& tape, const Tensor& probs, const rules::ContextVector& context,
               const rules::ScenarioSet& scenarios);

enum class StepWeighting { kExponential, kUniform };

/// w_t for t = 1..T. Exponential: exp(-(T - t)), last weight exactly 1.
std::vector<double> step_weights(std::size_t steps, StepWeighting weighting = StepWeighting::kExponential);

struct LossBreakdown {
  std::vector<double> ce;
  std::vector<double> cc;
  std::vector<double> weights;
  double total = 0.0;
  Tensor total_tensor;  // differentiable scalar
};

/// Per-sample joint loss over per-step (ce, cc) scalars.
LossBreakdown joint_loss(Tape& tape, std::span<const Tensor> ce, std::span<const Tensor> cc,
                         StepWeighting weighting = StepWeighting::kExponential);

/// Mean of per-sample totals.
double batch_mean(std::span<const LossBreakdown> samples);

}  // namespace cem::loss
