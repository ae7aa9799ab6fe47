#include "cemformer/kernel/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cemformer/error.hpp"
#include "cemformer/kernel/gemm.hpp"

namespace cem::kernel {
namespace {

void require_matrix(const Tensor& t, std::string_view op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

}  // namespace

void check_finite(const Tensor& t, std::string_view what) {
  // v * 0 is 0 for finite v and NaN otherwise; eight independent lanes let
  // the loop vectorize without reassociating a single sum.
  constexpr std::size_t kLanes = 8;
  auto v = t.values();
  double lanes[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= v.size(); i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) lanes[l] += v[i + l] * 0.0;
  for (; i < v.size(); ++i) lanes[0] += v[i] * 0.0;
  double total = 0.0;
  for (double l : lanes) total += l;
  if (total != 0.0) throw NumericError(std::string(what) + " produced a non-finite value");
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  gemm::nn(m, n, k, a.data(), b.data(), out.mutable_values().data());
  check_finite(out, "matmul");
  if (tape.wants({&a, &b})) {
    auto an = a.node(), bn = b.node();
    tape.record("matmul", {an, bn}, out, [an, bn, m, n, k](std::span<const double> g) {
      if (an->requires_grad) gemm::nt(m, k, n, g.data(), bn->value.data(), grad_slot(*an).data());
      if (bn->requires_grad) gemm::tn(m, n, k, an->value.data(), g.data(), grad_slot(*bn).data());
    });
  }
  return out;
}

Tensor transpose(Tape& tape, const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({c, r});
  auto dst = out.mutable_values();
  auto src = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  if (tape.wants({&x})) {
    auto xn = x.node();
    tape.record("transpose", {xn}, out, [xn, r, c](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) slot[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), std::vector<double>(a.values().begin(), a.values().end()));
  auto dst = out.mutable_values();
  auto src = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  check_finite(out, "add");
  if (tape.wants({&a, &b})) {
    auto an = a.node(), bn = b.node();
    tape.record("add", {an, bn}, out, [an, bn](std::span<const double> g) {
      accumulate_grad(*an, g);
      accumulate_grad(*bn, g);
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto dst = out.mutable_values();
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = av[i] * bv[i];
  check_finite(out, "mul");
  if (tape.wants({&a, &b})) {
    auto an = a.node(), bn = b.node();
    tape.record("mul", {an, bn}, out, [an, bn](std::span<const double> g) {
      if (an->requires_grad) {
        auto slot = grad_slot(*an);
        for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto slot = grad_slot(*bn);
        for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape());
  auto dst = out.mutable_values();
  auto src = x.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i] * factor;
  check_finite(out, "scale");
  if (tape.wants({&x})) {
    auto xn = x.node();
    tape.record("scale", {xn}, out, [xn, factor](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t n = x.rows(), d = x.cols();
  if (bias.rank() != 1 || bias.size() != d)
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not fit rows of " +
                         to_string(x.shape()));
  Tensor out(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  auto dst = out.mutable_values();
  auto b = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) dst[i * d + j] += b[j];
  check_finite(out, "add_bias");
  if (tape.wants({&x, &bias})) {
    auto xn = x.node(), bn = bias.node();
    tape.record("add_bias", {xn, bn}, out, [xn, bn, n, d](std::span<const double> g) {
      accumulate_grad(*xn, g);
      if (bn->requires_grad) {
        auto slot = grad_slot(*bn);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) slot[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum");
  if (tape.wants({&x})) {
    auto xn = x.node();
    tape.record("sum", {xn}, out, [xn](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (double& v : slot) v += g[0];
    });
  }
  return out;
}

Tensor mean_rows(Tape& tape, const Tensor& x) {
  require_matrix(x, "mean_rows");
  const std::size_t n = x.rows(), d = x.cols();
  if (n == 0) throw ContractError("mean_rows: no rows to average");
  Tensor out = Tensor::zeros({1, d});
  auto dst = out.mutable_values();
  auto src = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[i * d + j];
  const double inv = 1.0 / static_cast<double>(n);
  for (double& v : dst) v *= inv;
  check_finite(out, "mean_rows");
  if (tape.wants({&x})) {
    auto xn = x.node();
    tape.record("mean_rows", {xn}, out, [xn, n, d, inv](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) slot[i * d + j] += g[j] * inv;
    });
  }
  return out;
}

Tensor weighted_sum(Tape& tape, std::span<const Tensor> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size())
    throw DimensionError("weighted_sum: " + std::to_string(scalars.size()) + " terms but " +
                         std::to_string(weights.size()) + " weights");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) s += weights[i] * scalars[i].item();
  Tensor out = Tensor::scalar(s);
  check_finite(out, "weighted_sum");
  if (tape.wants(scalars)) {
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& t : scalars) nodes.push_back(t.node());
    std::vector<double> w(weights.begin(), weights.end());
    tape.record("weighted_sum", nodes, out, [nodes, w](std::span<const double> g) {
      for (std::size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i]->requires_grad) grad_slot(*nodes[i])[0] += w[i] * g[0];
    });
  }
  return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  auto dst = out.mutable_values();
  auto src = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = src.data() + i * c;
    double* o = dst.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(row[j] - mx));
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  check_finite(out, "softmax_rows");
  if (tape.wants({&x})) {
    auto xn = x.node();
    auto yn = out.node();
    tape.record("softmax_rows", {xn}, out, [xn, yn, r, c](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      const auto& y = yn->value;
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) slot[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.rank() != 1 || gamma.size() != d || beta.rank() != 1 || beta.size() != d)
    throw DimensionError("layer_norm: gamma " + to_string(gamma.shape()) + " / beta " +
                         to_string(beta.shape()) + " do not match " + to_string(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(n * d), inv_std(n);
  auto src = x.values();
  auto dst = out.mutable_values();
  auto gv = gamma.values(), bv = beta.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = src.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * inv_std[i];
      dst[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
    }
  }
  check_finite(out, "layer_norm");
  if (tape.wants({&x, &gamma, &beta})) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    tape.record("layer_norm", {xn, gn, bn}, out,
                [xn, gn, bn, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    std::span<const double> g) {
                  if (gn->requires_grad) {
                    auto slot = grad_slot(*gn);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) slot[j] += g[i * d + j] * xhat[i * d + j];
                  }
                  if (bn->requires_grad) {
                    auto slot = grad_slot(*bn);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) slot[j] += g[i * d + j];
                  }
                  if (!xn->requires_grad) return;
                  auto slot = grad_slot(*xn);
                  const auto& gam = gn->value;
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t i = 0; i < n; ++i) {
                    double mean_dh = 0.0, mean_dh_xh = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = g[i * d + j] * gam[j];
                      mean_dh += dh;
                      mean_dh_xh += dh * xhat[i * d + j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_xh *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                      const double dh = g[i * d + j] * gam[j];
                      slot[i * d + j] += inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_xh);
                    }
                  }
                });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto dst = out.mutable_values();
  auto src = x.values();
  const bool record = tape.wants({&x});
  // d/dx x*Phi(x) = Phi(x) + x*phi(x), kept from the forward pass.
  std::vector<double> slope(record ? src.size() : 0);
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double v = src[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 * 0.5));
    dst[i] = v * cdf;
    if (record) slope[i] = cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  }
  check_finite(out, "gelu");
  if (record) {
    auto xn = x.node();
    tape.record("gelu", {xn}, out, [xn, slope = std::move(slope)](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i] * slope[i];
    });
  }
  return out;
}

Tensor multi_head_attention(Tape& tape, const Tensor& qkv, std::size_t heads,
                            std::vector<std::vector<double>>* weights) {
  require_matrix(qkv, "multi_head_attention");
  const std::size_t n = qkv.rows(), width = qkv.cols();
  if (heads == 0 || width % (3 * heads) != 0)
    throw DimensionError("multi_head_attention: " + to_string(qkv.shape()) + " cannot split into 3 x " +
                         std::to_string(heads) + " heads");
  const std::size_t d = width / 3, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool record = tape.wants({&qkv});

  // Per head: contiguous Q, K, V blocks [n x dh] and the softmax P [n x n].
  struct Head {
    std::vector<double> q, k, v, p;
  };
  std::vector<Head> saved(heads);
  Tensor out = Tensor::zeros({n, d});
  auto src = qkv.values();
  auto dst = out.mutable_values();
  std::vector<double> o(n * dh);
  for (std::size_t h = 0; h < heads; ++h) {
    Head& hd = saved[h];
    hd.q.resize(n * dh);
    hd.k.resize(n * dh);
    hd.v.resize(n * dh);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) {
        hd.q[i * dh + j] = src[i * width + h * dh + j];
        hd.k[i * dh + j] = src[i * width + d + h * dh + j];
        hd.v[i * dh + j] = src[i * width + 2 * d + h * dh + j];
      }
    hd.p.assign(n * n, 0.0);
    gemm::nt(n, n, dh, hd.q.data(), hd.k.data(), hd.p.data());
    for (std::size_t i = 0; i < n; ++i) {
      double* row = hd.p.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] *= scale;
      const double mx = *std::max_element(row, row + n);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += (row[j] = std::exp(row[j] - mx));
      const double inv = 1.0 / z;
      for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
    }
    std::fill(o.begin(), o.end(), 0.0);
    gemm::nn(n, dh, n, hd.p.data(), hd.v.data(), o.data());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) dst[i * d + h * dh + j] = o[i * dh + j];
    if (weights) weights->push_back(hd.p);
  }
  check_finite(out, "multi_head_attention");
  if (record) {
    auto xn = qkv.node();
    tape.record("multi_head_attention", {xn}, out,
                [xn, n, d, dh, width, scale, saved = std::move(saved)](std::span<const double> g) {
                  auto slot = grad_slot(*xn);
                  std::vector<double> go(n * dh), dp(n * n), dq(n * dh), dk(n * dh), dv(n * dh);
                  for (std::size_t h = 0; h < saved.size(); ++h) {
                    const Head& hd = saved[h];
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < dh; ++j) go[i * dh + j] = g[i * d + h * dh + j];
                    std::fill(dp.begin(), dp.end(), 0.0);
                    std::fill(dv.begin(), dv.end(), 0.0);
                    gemm::nt(n, n, dh, go.data(), hd.v.data(), dp.data());
                    gemm::tn(n, dh, n, hd.p.data(), go.data(), dv.data());
                    // Softmax backward, then the 1/sqrt(dh) factor.
                    for (std::size_t i = 0; i < n; ++i) {
                      const double* pr = hd.p.data() + i * n;
                      double* gr = dp.data() + i * n;
                      double dot = 0.0;
                      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * pr[j];
                      for (std::size_t j = 0; j < n; ++j) gr[j] = pr[j] * (gr[j] - dot) * scale;
                    }
                    std::fill(dq.begin(), dq.end(), 0.0);
                    std::fill(dk.begin(), dk.end(), 0.0);
                    gemm::nn(n, dh, n, dp.data(), hd.k.data(), dq.data());
                    gemm::tn(n, dh, n, dp.data(), hd.q.data(), dk.data());
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < dh; ++j) {
                        slot[i * width + h * dh + j] += dq[i * dh + j];
                        slot[i * width + d + h * dh + j] += dk[i * dh + j];
                        slot[i * width + 2 * d + h * dh + j] += dv[i * dh + j];
                      }
                  }
                });
  }
  return out;
}

Tensor concat_tokens(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_tokens: no parts");
  const std::size_t d = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_tokens");
    if (p.cols() != d)
      throw DimensionError("concat_tokens: width mismatch " + to_string(parts.front().shape()) +
                           " vs " + to_string(p.shape()));
    rows += p.rows();
  }
  std::vector<double> values;
  values.reserve(rows * d);
  for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
  Tensor out({rows, d}, std::move(values));
  if (tape.wants(parts)) {
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape.record("concat_tokens", nodes, out, [nodes](std::span<const double> g) {
      std::size_t offset = 0;
      for (const auto& nd : nodes) {
        const std::size_t len = nd->value.size();
        accumulate_grad(*nd, g.subspan(offset, len));
        offset += len;
      }
    });
  }
  return out;
}

Tensor slice_tokens(Tape& tape, const Tensor& x, std::size_t lo, std::size_t hi) {
  require_matrix(x, "slice_tokens");
  const std::size_t n = x.rows(), d = x.cols();
  if (lo > hi || hi > n)
    throw IndexError("slice_tokens: range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                     ") outside " + std::to_string(n) + " rows");
  auto src = x.values();
  Tensor out({hi - lo, d}, std::vector<double>(src.begin() + static_cast<long>(lo * d),
                                              src.begin() + static_cast<long>(hi * d)));
  if (tape.wants({&x})) {
    auto xn = x.node();
    tape.record("slice_tokens", {xn}, out, [xn, lo, d](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (std::size_t i = 0; i < g.size(); ++i) slot[lo * d + i] += g[i];
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != n)
      throw DimensionError("concat_cols: row mismatch " + to_string(parts.front().shape()) + " vs " +
                           to_string(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out = Tensor::zeros({n, total});
  auto dst = out.mutable_values();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].values();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(src.data() + i * widths[k], widths[k], dst.data() + i * total + offset);
    offset += widths[k];
  }
  if (tape.wants(parts)) {
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape.record("concat_cols", nodes, out, [nodes, widths, n, total](std::span<const double> g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k]->requires_grad) {
          auto slot = grad_slot(*nodes[k]);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) slot[i * widths[k] + j] += g[i * total + off + j];
        }
        off += widths[k];
      }
    });
  }
  return out;
}

Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t lo, std::size_t hi) {
  require_matrix(x, "slice_cols");
  const std::size_t n = x.rows(), d = x.cols();
  if (lo > hi || hi > d)
    throw IndexError("slice_cols: range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                     ") outside " + std::to_string(d) + " columns");
  const std::size_t w = hi - lo;
  Tensor out = Tensor::zeros({n, w});
  auto dst = out.mutable_values();
  auto src = x.values();
  for (std::size_t i = 0; i < n; ++i) std::copy_n(src.data() + i * d + lo, w, dst.data() + i * w);
  if (tape.wants({&x})) {
    auto xn = x.node();
    tape.record("slice_cols", {xn}, out, [xn, n, d, lo, w](std::span<const double> g) {
      auto slot = grad_slot(*xn);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) slot[i * d + lo + j] += g[i * w + j];
    });
  }
  return out;
}

}  // namespace cem::kernel
