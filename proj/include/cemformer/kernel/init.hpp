#pragma once

#include <cmath>
#include <random>

#include "cemformer/kernel/tensor.hpp"

namespace cem::kernel {

/// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), requires_grad set.
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::zeros({fan_in, fan_out}, true);
  for (double& v : t.mutable_values()) v = dist(rng);
  return t;
}

inline Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.mutable_values()) v = dist(rng);
  return t;
}

inline Tensor filled(Shape shape, double value) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.mutable_values()) v = value;
  return t;
}

}  // namespace cem::kernel
