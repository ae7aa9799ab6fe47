#pragma once

// Reverse-mode differentiation record.
//
// Ops append one record per execution. backward() walks the records in exact
// reverse order and calls each op's backward rule with the gradient of its
// output. Leaf gradients accumulate (+=), so a parameter read at every
// timestep collects the sum of its contributions.
//
// A tape is single-threaded. Distinct tapes may run on distinct threads as
// long as they share no requires_grad leaves.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "cemformer/kernel/tensor.hpp"

namespace cem::kernel {

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_output)>;

  struct OpRecord {
    std::string_view op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
  };

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }
  /// Read-only view of the executed ops in execution order.
  std::vector<OpRecord> log() const;
  void clear() { entries_.clear(); }

  /// True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;
  bool wants(std::span<const Tensor> inputs) const;

  /// Marks `output` as differentiable and appends its backward rule.
  void record(std::string_view op, std::vector<std::shared_ptr<Node>> inputs, const Tensor& output,
              BackwardFn backward);

  friend void backward(const Tensor& loss, Tape& tape);

 private:
  struct Entry {
    std::string_view op;
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

/// Gradient slot of `node`, allocated as zeros on first use.
std::span<double> grad_slot(Node& node);

/// Adds `g` into the gradient slot when the node tracks gradients.
void accumulate_grad(Node& node, std::span<const double> g);

/// Reverse traversal from a scalar loss. Intermediate gradients are reset at
/// the start, so repeated calls on the same tape are reproducible; leaf
/// gradients accumulate.
void backward(const Tensor& loss, Tape& tape);

}  // namespace cem::kernel
