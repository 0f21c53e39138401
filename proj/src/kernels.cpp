#include "s3vos/kernels.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace s3vos {

TokenTensor TokenTensor::from_levels(Var data, std::vector<Level> levels) {
  std::size_t total = 0;
  for (const auto& l : levels) total += l.area();
  if (total != data.rows()) {
    throw std::invalid_argument("TokenTensor: level areas sum to " + std::to_string(total) +
                                " but data has " + std::to_string(data.rows()) + " rows");
  }
  TokenTensor t;
  t.ref_points = reference_points(levels);
  t.data = std::move(data);
  t.levels = std::move(levels);
  return t;
}

std::size_t TokenTensor::level_offset(std::size_t level) const {
  std::size_t off = 0;
  for (std::size_t i = 0; i < level; ++i) off += levels[i].area();
  return off;
}

std::vector<raw::LevelGeom> TokenTensor::geoms() const {
  std::vector<raw::LevelGeom> g;
  std::size_t off = 0;
  for (const auto& l : levels) {
    g.push_back({l.height, l.width, off});
    off += l.area();
  }
  return g;
}

TokenTensor TokenTensor::with_data(Var new_data) const {
  if (new_data.rows() != token_count()) {
    throw std::invalid_argument("TokenTensor::with_data: token count changed");
  }
  TokenTensor t = *this;
  t.data = std::move(new_data);
  return t;
}

Tensor reference_points(const std::vector<Level>& levels) {
  std::size_t total = 0;
  for (const auto& l : levels) total += l.area();
  Tensor ref(total, 2);
  std::size_t r = 0;
  for (const auto& l : levels) {
    for (int y = 0; y < l.height; ++y) {
      for (int x = 0; x < l.width; ++x, ++r) {
        ref(r, 0) = (x + 0.5) / l.width;
        ref(r, 1) = (y + 0.5) / l.height;
      }
    }
  }
  return ref;
}

Tensor softmax(const Tensor& x) {
  for (double v : x.flat()) {
    if (!std::isfinite(v)) throw std::invalid_argument("softmax: non-finite input");
  }
  return ops::softmax_rows(constant(x)).value();
}

Var init_param(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  return parameter(random_normal(rows, cols, rng, stddev));
}

Var zero_param(std::size_t rows, std::size_t cols) { return parameter(Tensor(rows, cols)); }

Var cross_attention(const Var& query, const Var& key, const Var& value, const Var& wq,
                    const Var& wk, const Var& wv, std::size_t d) {
  if (query.cols() != wq.rows() || key.cols() != wk.rows() || value.cols() != wv.rows() ||
      key.rows() != value.rows()) {
    throw std::invalid_argument("cross_attention: input/projection shape mismatch");
  }
  if (d == 0 || wq.cols() != d || wk.cols() != d) {
    throw std::invalid_argument("cross_attention: d must equal the projected key width");
  }
  const Var q = ops::matmul(query, wq);
  const Var k = ops::matmul(key, wk);
  const Var v = ops::matmul(value, wv);
  const Var scores = ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  return ops::matmul(ops::softmax_rows(scores), v);
}

Var masked_cross_attention(const Var& query, const Var& feat, const TokenMask& mask,
                           const Var& wq, const Var& wk, const Var& wv, std::size_t d) {
  if (mask.size() != feat.rows()) {
    throw std::invalid_argument("masked_cross_attention: mask length " +
                                std::to_string(mask.size()) + " != token count " +
                                std::to_string(feat.rows()));
  }
  if (d == 0 || wq.cols() != d || wk.cols() != d) {
    throw std::invalid_argument("masked_cross_attention: d must equal the projected key width");
  }
  const Var q = ops::matmul(query, wq);
  const Var k = ops::matmul(feat, wk);
  const Var v = ops::matmul(feat, wv);
  const Var scores = ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor m(query.rows(), feat.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = mask[j] ? 1.0 : 0.0;
  return ops::matmul(ops::softmax_rows(scores, &m), v);
}

DeformableParams DeformableParams::init(Rng& rng, std::size_t channels, int heads, int levels,
                                        int points) {
  const std::size_t slots = static_cast<std::size_t>(heads) * levels * points;
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  DeformableParams p;
  p.w_offset = zero_param(channels, 2 * slots);
  p.b_offset = zero_param(1, 2 * slots);
  // Spread the initial sampling points on a small ring around the reference,
  // one direction per head, growing with the point index.
  for (int h = 0; h < heads; ++h) {
    const double ang = 2.0 * M_PI * h / heads;
    for (int l = 0; l < levels; ++l) {
      for (int k = 0; k < points; ++k) {
        const std::size_t slot = (static_cast<std::size_t>(h) * levels + l) * points + k;
        p.b_offset.mutable_value()(0, 2 * slot) = std::cos(ang) * k;
        p.b_offset.mutable_value()(0, 2 * slot + 1) = std::sin(ang) * k;
      }
    }
  }
  p.w_weight = zero_param(channels, slots);
  p.b_weight = zero_param(1, slots);
  p.w_value = init_param(rng, channels, channels, s);
  p.w_out = init_param(rng, channels, channels, s);
  p.heads = heads;
  p.levels = levels;
  p.points = points;
  return p;
}

TokenTensor deformable_attention(const TokenTensor& query, const TokenTensor& value,
                                 const DeformableParams& p) {
  if (value.levels.empty()) throw std::invalid_argument("deformable_attention: zero levels");
  if (static_cast<int>(value.levels.size()) != p.levels) {
    throw std::invalid_argument("deformable_attention: value has " +
                                std::to_string(value.levels.size()) + " levels, configured " +
                                std::to_string(p.levels));
  }
  if (query.ref_points.rows() != query.token_count()) {
    throw std::invalid_argument("deformable_attention: query ref_points missing");
  }
  const Var offsets = ops::add_row(ops::matmul(query.data, p.w_offset), p.b_offset);
  const Var weights = ops::softmax_rows(ops::add_row(ops::matmul(query.data, p.w_weight), p.b_weight));
  const Var v = ops::matmul(value.data, p.w_value);
  const Var sampled =
      ops::deform_gather(v, value.geoms(), query.ref_points, offsets, weights, p.heads, p.points);
  return query.with_data(ops::matmul(sampled, p.w_out));
}

ConvFfnParams ConvFfnParams::init(Rng& rng, std::size_t channels, std::size_t hidden) {
  ConvFfnParams p;
  p.w_in = init_param(rng, channels, hidden, 1.0 / std::sqrt(static_cast<double>(channels)));
  p.b_in = zero_param(1, hidden);
  p.w_dw = init_param(rng, 9, hidden, 1.0 / 3.0);
  p.b_dw = zero_param(1, hidden);
  // Small output projection keeps the residual branch near identity at start.
  p.w_out = init_param(rng, hidden, channels, 0.1 / std::sqrt(static_cast<double>(hidden)));
  p.b_out = zero_param(1, channels);
  return p;
}

TokenTensor conv_ffn(const TokenTensor& x, const ConvFfnParams& p) {
  const Var h = ops::add_row(ops::matmul(x.data, p.w_in), p.b_in);
  const Var d = ops::gelu(ops::depthwise3x3(h, x.geoms(), p.w_dw, p.b_dw));
  return x.with_data(ops::add_row(ops::matmul(d, p.w_out), p.b_out));
}

}  // namespace s3vos
