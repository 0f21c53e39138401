#pragma once

// Discriminative query transformer: per-object queries refined by masked
// cross-attention, self-attention and an FFN, then refreshed from the single
// most similar masked feature and propagated with a scaled correspondence.

#include <vector>

#include "s3vos/config.hpp"
#include "s3vos/kernels.hpp"
#include "s3vos/params.hpp"

namespace s3vos {

struct QuerySet {
  Var q;  // (N, C)
  int object_id = 0;
};

struct PropagationParams {
  Var alpha;  // (1, C) per-channel scale, starts at 0
  Var w_out;  // (C, C)
};

struct QueryBlockParams {
  Var ca_wq, ca_wk, ca_wv;  // masked cross-attention
  Var sa_wq, sa_wk, sa_wv;  // self-attention among queries
  Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  PropagationParams prop;

  static QueryBlockParams init(Rng& rng, std::size_t channels);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct ReadoutParams {
  Var w_feat, b_feat;    // (C, C), (1, C)
  Var w_query, b_query;  // (C, C), (1, C)

  static ReadoutParams init(Rng& rng, std::size_t channels);
};

struct QueryParams {
  Var init_queries;  // (N, C) learnable starting queries
  std::vector<QueryBlockParams> blocks;
  ReadoutParams readout;

  static QueryParams init(Rng& rng, const ModelConfig& cfg);
  void collect(ParamList& out) const;
};

/// Indices i*[n] = argmax over masked rows i of scores(i, n); ties resolve to
/// the lowest index. Empty when the mask has no active position.
std::vector<std::size_t> select_indices(const Tensor& scores, const TokenMask& mask);

/// Rows of `feat` most similar (dot product) to each query within the mask.
/// An all-zero mask returns `q` unchanged.
Var discriminative_select(const Var& feat, const Var& q, const TokenMask& mask);

/// Q_out = (alpha . A / ||A||_row + q_s) W_out + q_in with A = q . q_s
/// (elementwise); zero rows of A normalize to zero.
Var propagate_query(const Var& q_in, const Var& q, const Var& q_s, const PropagationParams& p);

/// Masked cross-attention -> self-attention -> FFN (pre-norm residuals),
/// then discriminative selection and propagation unless disabled.
Var query_block(const Var& feat, const Var& q_in, const TokenMask& mask,
                const QueryBlockParams& p, bool discriminative = true);

/// Runs every block in order.
Var query_transformer(const Var& feat, const Var& q_in, const TokenMask& mask,
                      const QueryParams& p, bool discriminative = true);

/// Per-pixel logit max_n (feat W_f + b_f).(q_n W_q + b_q) / sqrt(C), (L, 1).
Var query_readout(const Var& feat, const Var& q, const ReadoutParams& p);

}  // namespace s3vos
