#pragma once

// Differentiable primitives on the tape. All ops take and return Var; shapes
// are checked eagerly and mismatches throw std::invalid_argument.

#include <vector>

#include "s3vos/autograd.hpp"
#include "s3vos/raw_kernels.hpp"

namespace s3vos::ops {

Var matmul(const Var& a, const Var& b);     // a * b
Var matmul_nt(const Var& a, const Var& b);  // a * b^T

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var div(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);

/// a (L,C) + row (1,C) broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a (L,C) * row (1,C) broadcast over rows.
Var mul_row(const Var& a, const Var& row);
/// a (L,C) * col (L,1) broadcast over columns.
Var mul_col(const Var& a, const Var& col);
/// row (1,C) repeated `n` times.
Var broadcast_row(const Var& row, std::size_t n);

Var sum(const Var& a);                             // (1,1)
Var weighted_sum(const Var& a, const Tensor& w);  // (1,1), sum_i w_i a_i
Var mean_rows(const Var& a);                       // (1,C)
Var sum_cols(const Var& a);                        // (L,1)

/// Row softmax. Where `mask` is given (same shape, 0/1), zero entries are
/// excluded (logit -inf). A row with no admissible entry falls back to the
/// unmasked softmax over that row.
Var softmax_rows(const Var& a, const Tensor* mask = nullptr);

Var gelu(const Var& a);  // tanh approximation
Var sigmoid(const Var& a);
Var tanh(const Var& a);

/// Per-row standardization without affine (eps inside sqrt).
Var layer_norm_rows(const Var& a, double eps = 1e-5);
/// Each row divided by its L2 norm; all-zero rows map to zero.
Var row_normalize(const Var& a);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, std::size_t start, std::size_t count);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
Var gather_rows(const Var& a, const std::vector<std::size_t>& index);

/// Row-wise maximum over columns -> (L,1). Gradient flows to the first
/// maximal column of each row.
Var max_cols(const Var& a);

/// Clamp to [lo, hi]; zero gradient where clamped.
Var clamp(const Var& a, double lo, double hi);
Var log(const Var& a);

/// Channels-last dense convolution, see raw::conv2d.
Var conv2d(const Var& x, int height, int width, const Var& weight, const Var& bias,
           int kernel, int stride, int pad);

/// Per-level depthwise 3x3 convolution with zero padding.
Var depthwise3x3(const Var& x, const std::vector<raw::LevelGeom>& levels, const Var& weight,
                 const Var& bias);

/// Bilinear resize (align-corners false, border clamp) of a (h*w, C) map.
Var resize_bilinear(const Var& x, int height, int width, int out_height, int out_width);

/// Bilinear sample of a (h*w, C) map at normalized (P,2) points; zero
/// padding; differentiable in map and points.
Var bilinear_sample(const Var& map, int height, int width, const Var& points);

/// Deformable gather over stacked levels, differentiable in value, offsets
/// and weights (see raw::deform_gather).
Var deform_gather(const Var& value, const std::vector<raw::LevelGeom>& levels,
                  const Tensor& ref, const Var& offsets, const Var& weights, int heads,
                  int points);

/// Multi-object soft aggregation: (L,K) object probabilities -> (L,K+1) label
/// distribution, column 0 is background. Probabilities clamp to
/// [eps, 1-eps].
Var soft_aggregate(const Var& probs, double eps = 1e-7);

}  // namespace s3vos::ops
