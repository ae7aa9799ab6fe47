#include "cemformer/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cemformer/error.hpp"
#include "cemformer/kernel/ops.hpp"

namespace cem::loss {
namespace {

void require_prob_row(const Tensor& probs, std::string_view op) {
  if (probs.rows() != 1 || probs.size() == 0)
    throw ContractError(std::string(op) + ": expected one probability row, got " +
                        kernel::to_string(probs.shape()));
}

}  // namespace

Tensor cross_entropy(Tape& tape, const Tensor& probs, std::size_t label) {
  require_prob_row(probs, "cross_entropy");
  if (label >= probs.size())
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside " +
                        std::to_string(probs.size()) + " classes");
  const double p = probs.values()[label];
  const bool clamped = p < kProbFloor;
  Tensor out = Tensor::scalar(-std::log(std::max(p, kProbFloor)));
  if (tape.wants({&probs})) {
    auto pn = probs.node();
    tape.record("cross_entropy", {pn}, out, [pn, label, clamped](std::span<const double> g) {
      if (!clamped) kernel::grad_slot(*pn)[label] += -g[0] / pn->value[label];
    });
  }
  return out;
}

Tensor cc_loss(Tape& tape, const Tensor& probs, const rules::ContextVector& context,
               const rules::ScenarioSet& scenarios) {
  require_prob_row(probs, "cc_loss");
  std::vector<std::size_t> matched;
  for (const auto& rule : scenarios.rules) {
    if (rule.maneuver >= probs.size())
      throw ContractError("cc_loss: rule class " + std::to_string(rule.maneuver) + " outside " +
                          std::to_string(probs.size()) + " classes");
    if (rules::matches(rule.pattern, context)) matched.push_back(rule.maneuver);
  }
  auto p = probs.values();
  double value = 0.0;
  for (auto r : matched) value -= std::log(std::max(1.0 - p[r], kProbFloor));
  Tensor out = Tensor::scalar(value);
  if (!matched.empty() && tape.wants({&probs})) {
    auto pn = probs.node();
    tape.record("cc_loss", {pn}, out, [pn, matched](std::span<const double> g) {
      auto slot = kernel::grad_slot(*pn);
      for (auto r : matched) {
        const double rest = 1.0 - pn->value[r];
        if (rest >= kProbFloor) slot[r] += g[0] / rest;
      }
    });
  }
  return out;
}

std::vector<double> step_weights(std::size_t steps, StepWeighting weighting) {
  std::vector<double> w(steps, 1.0);
  if (weighting == StepWeighting::kExponential)
    for (std::size_t t = 1; t <= steps; ++t) w[t - 1] = std::exp(-static_cast<double>(steps - t));
  return w;
}

LossBreakdown joint_loss(Tape& tape, std::span<const Tensor> ce, std::span<const Tensor> cc,
                         StepWeighting weighting) {
  if (ce.empty()) throw ContractError("joint_loss: no timesteps");
  if (ce.size() != cc.size())
    throw ContractError("joint_loss: " + std::to_string(ce.size()) + " ce terms but " +
                        std::to_string(cc.size()) + " cc terms");
  LossBreakdown out;
  out.weights = step_weights(ce.size(), weighting);
  std::vector<Tensor> per_step;
  per_step.reserve(ce.size());
  for (std::size_t t = 0; t < ce.size(); ++t) {
    out.ce.push_back(ce[t].item());
    out.cc.push_back(cc[t].item());
    per_step.push_back(kernel::add(tape, ce[t], cc[t]));
  }
  out.total_tensor = kernel::weighted_sum(tape, per_step, out.weights);
  out.total = out.total_tensor.item();
  return out;
}

double batch_mean(std::span<const LossBreakdown> samples) {
  if (samples.empty()) throw ContractError("batch_mean: no samples");
  double s = 0.0;
  for (const auto& b : samples) s += b.total;
  return s / static_cast<double>(samples.size());
}

}  // namespace cem::loss
