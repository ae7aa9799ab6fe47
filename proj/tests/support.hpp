#pragma once

// Shared helpers for the test binaries.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <random>
#include <vector>

#include "cemformer/kernel/gradcheck.hpp"
#include "cemformer/kernel/ops.hpp"
#include "cemformer/kernel/tensor.hpp"

namespace cem::testing {

using kernel::Tape;
using kernel::Tensor;

inline Tensor random_tensor(kernel::Shape shape, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t = Tensor::zeros(std::move(shape), grad);
  for (double& v : t.mutable_values()) v = dist(rng);
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// sum(op(...) * R) for a fixed random R, so every output coordinate feeds
/// the loss with a distinct weight.
inline Tensor probe_loss(Tape& tape, const Tensor& out, const Tensor& weights) {
  return kernel::sum(tape, kernel::mul(tape, out, weights));
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  return true;
}

}  // namespace cem::testing
