#pragma once

// Differentiable ops. Each op computes its output eagerly and, when the tape
// is recording and some input requires a gradient, appends a backward rule.
// Every forward output is checked for NaN/Inf and raises NumericError.
//
// Broadcasting is limited to add_bias (row vector over matrix rows); any
// other shape mismatch is a DimensionError.

#include <span>
#include <vector>

#include "cemformer/kernel/tape.hpp"
#include "cemformer/kernel/tensor.hpp"

namespace cem::kernel {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
/// x[n x d] + bias[d] applied to every row.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);

/// Sum of all entries, as a scalar.
Tensor sum(Tape& tape, const Tensor& x);
/// Column means of x[n x d] as a [1 x d] matrix. Requires n >= 1.
Tensor mean_rows(Tape& tape, const Tensor& x);
/// sum_i weights[i] * scalars[i]
Tensor weighted_sum(Tape& tape, std::span<const Tensor> scalars, std::span<const double> weights);

/// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
/// Exact x * Phi(x) with the error function.
Tensor gelu(Tape& tape, const Tensor& x);

/// Scaled dot-product self-attention over packed projections
/// qkv[n x 3d] = [Q | K | V], split into `heads` column blocks of width
/// d / heads. Returns the head outputs joined along columns, [n x d]. When
/// `weights` is given, one row-major n x n softmax matrix per head is
/// appended to it.
Tensor multi_head_attention(Tape& tape, const Tensor& qkv, std::size_t heads,
                            std::vector<std::vector<double>>* weights = nullptr);

/// Stacks [n_i x d] parts along rows.
Tensor concat_tokens(Tape& tape, std::span<const Tensor> parts);
/// Rows [lo, hi) of x.
Tensor slice_tokens(Tape& tape, const Tensor& x, std::size_t lo, std::size_t hi);
/// Joins [n x d_i] parts along columns.
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
/// Columns [lo, hi) of x.
Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t lo, std::size_t hi);

/// Throws NumericError naming `what` when any value is NaN or Inf.
void check_finite(const Tensor& t, std::string_view what);

}  // namespace cem::kernel
