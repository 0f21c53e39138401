#include "s3vos/query.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace s3vos {

namespace {
double inv_sqrt(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }
}  // namespace

QueryBlockParams QueryBlockParams::init(Rng& rng, std::size_t c) {
  QueryBlockParams b;
  b.ca_wq = init_param(rng, c, c, inv_sqrt(c));
  b.ca_wk = init_param(rng, c, c, inv_sqrt(c));
  b.ca_wv = init_param(rng, c, c, 0.5 * inv_sqrt(c));
  b.sa_wq = init_param(rng, c, c, inv_sqrt(c));
  b.sa_wk = init_param(rng, c, c, inv_sqrt(c));
  b.sa_wv = init_param(rng, c, c, 0.5 * inv_sqrt(c));
  b.ffn_w1 = init_param(rng, c, 2 * c, inv_sqrt(c));
  b.ffn_b1 = zero_param(1, 2 * c);
  b.ffn_w2 = init_param(rng, 2 * c, c, 0.5 * inv_sqrt(2 * c));
  b.ffn_b2 = zero_param(1, c);
  b.prop.alpha = zero_param(1, c);
  b.prop.w_out = init_param(rng, c, c, 0.5 * inv_sqrt(c));
  return b;
}

void QueryBlockParams::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + "ca.wq", ca_wq);
  out.add(prefix + "ca.wk", ca_wk);
  out.add(prefix + "ca.wv", ca_wv);
  out.add(prefix + "sa.wq", sa_wq);
  out.add(prefix + "sa.wk", sa_wk);
  out.add(prefix + "sa.wv", sa_wv);
  out.add(prefix + "ffn.w1", ffn_w1);
  out.add(prefix + "ffn.b1", ffn_b1);
  out.add(prefix + "ffn.w2", ffn_w2);
  out.add(prefix + "ffn.b2", ffn_b2);
  out.add(prefix + "prop.alpha", prop.alpha);
  out.add(prefix + "prop.w_out", prop.w_out);
}

ReadoutParams ReadoutParams::init(Rng& rng, std::size_t c) {
  ReadoutParams r;
  r.w_feat = init_param(rng, c, c, inv_sqrt(c));
  r.b_feat = zero_param(1, c);
  r.w_query = init_param(rng, c, c, 0.5 * inv_sqrt(c));
  r.b_query = zero_param(1, c);
  return r;
}

QueryParams QueryParams::init(Rng& rng, const ModelConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.channels);
  QueryParams p;
  p.init_queries = init_param(rng, static_cast<std::size_t>(cfg.num_queries), c, 0.5);
  for (int i = 0; i < cfg.query_depth; ++i) p.blocks.push_back(QueryBlockParams::init(rng, c));
  p.readout = ReadoutParams::init(rng, c);
  return p;
}

void QueryParams::collect(ParamList& out) const {
  out.add("query.init", init_queries);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect("query.block" + std::to_string(i) + ".", out);
  }
  out.add("query.readout.w_feat", readout.w_feat);
  out.add("query.readout.b_feat", readout.b_feat);
  out.add("query.readout.w_query", readout.w_query);
  out.add("query.readout.b_query", readout.b_query);
}

std::vector<std::size_t> select_indices(const Tensor& scores, const TokenMask& mask) {
  if (mask.size() != scores.rows()) {
    throw std::invalid_argument("select_indices: mask length does not match token count");
  }
  std::vector<std::size_t> idx;
  bool any = false;
  for (auto m : mask) any = any || m != 0;
  if (!any) return idx;
  idx.assign(scores.cols(), 0);
  for (std::size_t n = 0; n < scores.cols(); ++n) {
    bool found = false;
    double best = 0.0;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      if (!mask[i]) continue;
      if (!found || scores(i, n) > best) {
        best = scores(i, n);
        idx[n] = i;
        found = true;
      }
    }
  }
  return idx;
}

Var discriminative_select(const Var& feat, const Var& q, const TokenMask& mask) {
  if (mask.size() != feat.rows()) {
    throw std::invalid_argument("discriminative_select: mask length " +
                                std::to_string(mask.size()) + " != token count " +
                                std::to_string(feat.rows()));
  }
  if (feat.cols() != q.cols()) {
    throw std::invalid_argument("discriminative_select: feature and query widths differ");
  }
  Tensor scores;
  raw::gemm(false, true, feat.value(), q.value(), scores, false);
  const auto idx = select_indices(scores, mask);
  if (idx.empty()) return q;
  return ops::gather_rows(feat, idx);
}

Var propagate_query(const Var& q_in, const Var& q, const Var& q_s, const PropagationParams& p) {
  if (!q_in.value().same_shape(q.value()) || !q.value().same_shape(q_s.value())) {
    throw std::invalid_argument("propagate_query: query shapes disagree");
  }
  const Var a = ops::mul(q, q_s);
  const Var scaled = ops::mul_row(ops::row_normalize(a), p.alpha);
  return ops::add(ops::matmul(ops::add(scaled, q_s), p.w_out), q_in);
}

Var query_block(const Var& feat, const Var& q_in, const TokenMask& mask,
                const QueryBlockParams& p, bool discriminative) {
  const std::size_t c = q_in.cols();
  Var q = ops::add(q_in, masked_cross_attention(ops::layer_norm_rows(q_in), feat, mask, p.ca_wq,
                                                p.ca_wk, p.ca_wv, c));
  const Var n1 = ops::layer_norm_rows(q);
  q = ops::add(q, cross_attention(n1, n1, n1, p.sa_wq, p.sa_wk, p.sa_wv, c));
  const Var n2 = ops::layer_norm_rows(q);
  const Var hidden = ops::gelu(ops::add_row(ops::matmul(n2, p.ffn_w1), p.ffn_b1));
  q = ops::add(q, ops::add_row(ops::matmul(hidden, p.ffn_w2), p.ffn_b2));
  if (!discriminative) return q;
  const Var q_s = discriminative_select(feat, q, mask);
  return propagate_query(q, q, q_s, p.prop);
}

Var query_transformer(const Var& feat, const Var& q_in, const TokenMask& mask,
                      const QueryParams& p, bool discriminative) {
  Var q = q_in;
  for (const auto& b : p.blocks) q = query_block(feat, q, mask, b, discriminative);
  return q;
}

Var query_readout(const Var& feat, const Var& q, const ReadoutParams& p) {
  const Var pf = ops::add_row(ops::matmul(ops::layer_norm_rows(feat), p.w_feat), p.b_feat);
  const Var pq = ops::add_row(ops::matmul(ops::layer_norm_rows(q), p.w_query), p.b_query);
  const Var scores = ops::scale(ops::matmul_nt(pf, pq), inv_sqrt(feat.cols()));
  return ops::max_cols(scores);
}

}  // namespace s3vos
