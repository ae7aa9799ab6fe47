#include "cemformer/kernel/tape.hpp"

#include <algorithm>

#include "cemformer/error.hpp"

namespace cem::kernel {

std::vector<Tape::OpRecord> Tape::log() const {
  std::vector<OpRecord> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) {
    OpRecord r{e.op, {}, e.output->id};
    for (const auto& in : e.inputs) r.inputs.push_back(in->id);
    out.push_back(std::move(r));
  }
  return out;
}

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

bool Tape::wants(std::span<const Tensor> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void Tape::record(std::string_view op, std::vector<std::shared_ptr<Node>> inputs, const Tensor& output,
                  BackwardFn backward) {
  output.node()->requires_grad = true;
  entries_.push_back(Entry{op, std::move(inputs), output.node(), std::move(backward)});
}

std::span<double> grad_slot(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void accumulate_grad(Node& node, std::span<const double> g) {
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    node.grad.assign(g.begin(), g.end());
    return;
  }
  auto slot = std::span<double>(node.grad);
  for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  for (auto& e : tape.entries_) e.output->grad.clear();
  if (!loss.requires_grad()) return;
  grad_slot(*loss.node())[0] += 1.0;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
  }
}

}  // namespace cem::kernel
