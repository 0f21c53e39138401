#pragma once

// Differentiable building blocks shared by the backbone, query transformer,
// memory and decoder: attention variants, grid sampling, multi-scale
// deformable attention and the convolutional feed-forward.

#include <cstdint>
#include <vector>

#include "s3vos/autograd.hpp"
#include "s3vos/ops.hpp"

namespace s3vos {

/// Binary token mask, one byte per token (0 or 1).
using TokenMask = std::vector<std::uint8_t>;

struct Level {
  int stride = 0;
  int height = 0;
  int width = 0;
  std::size_t area() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Level&) const = default;
};

/// Flattened multi-level token map. Rows of `data` are the tokens of every
/// level in order, each level row-major; `ref_points` holds the normalized
/// center of each token.
struct TokenTensor {
  Var data;
  std::vector<Level> levels;
  Tensor ref_points;

  static TokenTensor from_levels(Var data, std::vector<Level> levels);

  std::size_t token_count() const { return data.rows(); }
  std::size_t channels() const { return data.cols(); }
  std::size_t level_offset(std::size_t level) const;
  std::vector<raw::LevelGeom> geoms() const;
  /// Same levels and reference points, new data.
  TokenTensor with_data(Var new_data) const;
};

/// Normalized token centers ((x+0.5)/w, (y+0.5)/h) for stacked levels.
Tensor reference_points(const std::vector<Level>& levels);

/// Row-wise softmax of a plain tensor. Throws on non-finite input.
Tensor softmax(const Tensor& x);

/// Weight initialization helper: N(0, stddev) parameter.
Var init_param(Rng& rng, std::size_t rows, std::size_t cols, double stddev);
Var zero_param(std::size_t rows, std::size_t cols);

/// out[i] = sum_j softmax_j((q_i Wq).(k_j Wk) / sqrt(d)) (v_j Wv).
/// Row-vector convention: Wq, Wk are (C, d), Wv is (C, Cv).
Var cross_attention(const Var& query, const Var& key, const Var& value, const Var& wq,
                    const Var& wk, const Var& wv, std::size_t d);

/// Cross-attention where tokens with mask 0 are not attended. An all-zero
/// mask attends over every token.
Var masked_cross_attention(const Var& query, const Var& feat, const TokenMask& mask,
                           const Var& wq, const Var& wk, const Var& wv, std::size_t d);

struct DeformableParams {
  Var w_offset;  // (C, heads*levels*points*2)
  Var b_offset;
  Var w_weight;  // (C, heads*levels*points)
  Var b_weight;
  Var w_value;   // (C, C)
  Var w_out;     // (C, C)
  int heads = 4;
  int levels = 4;
  int points = 4;

  /// Zero offset/weight projections (uniform start), random value/out.
  static DeformableParams init(Rng& rng, std::size_t channels, int heads, int levels, int points);
};

/// Multi-scale deformable attention. For each query token the sampling
/// locations are ref_point + offset/level_size, weights are a softmax over
/// all heads x levels x points, and the result is projected by w_out.
TokenTensor deformable_attention(const TokenTensor& query, const TokenTensor& value,
                                 const DeformableParams& p);

struct ConvFfnParams {
  Var w_in;   // (C, hidden)
  Var b_in;
  Var w_dw;   // (9, hidden)
  Var b_dw;
  Var w_out;  // (hidden, C)
  Var b_out;

  static ConvFfnParams init(Rng& rng, std::size_t channels, std::size_t hidden);
};

/// Pointwise expand -> per-level depthwise 3x3 -> GELU -> pointwise project.
TokenTensor conv_ffn(const TokenTensor& x, const ConvFfnParams& p);

}  // namespace s3vos
