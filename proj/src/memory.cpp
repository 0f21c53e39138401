#include "s3vos/memory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace s3vos {

PixelMemory::PixelMemory(int capacity, bool pin_first) : capacity_(capacity), pin_first_(pin_first) {
  if (capacity < 1) throw std::invalid_argument("PixelMemory: capacity must be >= 1");
  if (pin_first && capacity < 2) {
    throw std::invalid_argument("PixelMemory: a pinned first frame needs capacity >= 2");
  }
}

void PixelMemory::write(int frame_index, const Var& key, const std::map<int, Var>& values) {
  if (!entries_.empty()) {
    const auto& ref = entries_.front();
    if (key.rows() != ref.key.rows() || key.cols() != ref.key.cols()) {
      throw std::invalid_argument("memory_write: key shape " + key.value().shape_str() +
                                  " differs from stored " + ref.key.value().shape_str());
    }
    const Var& v0 = ref.values.begin()->second;
    for (const auto& [id, v] : values) {
      if (v.rows() != v0.rows() || v.cols() != v0.cols()) {
        throw std::invalid_argument("memory_write: value shape mismatch for object " +
                                    std::to_string(id));
      }
    }
  }
  for (const auto& [id, v] : values) {
    if (v.rows() != key.rows()) {
      throw std::invalid_argument("memory_write: value rows != key rows");
    }
  }
  if (values.empty()) throw std::invalid_argument("memory_write: no values");
  entries_.push_back({frame_index, key, values});
  if (static_cast<int>(entries_.size()) > capacity_) {
    entries_.erase(entries_.begin() + (pin_first_ ? 1 : 0));
  }
}

PixelMemory memory_write(PixelMemory mem, int frame_index, const Var& key,
                         const std::map<int, Var>& values) {
  mem.write(frame_index, key, values);
  return mem;
}

Tensor topk_mask(const Tensor& logits, int top_k) {
  Tensor keep(logits.rows(), logits.cols());
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(top_k), logits.cols());
  std::vector<std::size_t> order(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (logits(r, a) != logits(r, b)) return logits(r, a) > logits(r, b);
                        return a < b;
                      });
    for (std::size_t i = 0; i < k; ++i) keep(r, order[i]) = 1.0;
  }
  return keep;
}

Var topk_attention(const Var& query_key, const Var& keys, const Var& values, int top_k) {
  if (query_key.cols() != keys.cols() || keys.rows() != values.rows()) {
    throw std::invalid_argument("topk_attention: key/value shape mismatch");
  }
  if (top_k < 1) throw std::invalid_argument("topk_attention: top_k must be >= 1");
  const Var logits = ops::scale(ops::matmul_nt(query_key, keys),
                                1.0 / std::sqrt(static_cast<double>(keys.cols())));
  const Tensor keep = topk_mask(logits.value(), top_k);
  return ops::matmul(ops::softmax_rows(logits, &keep), values);
}

Var memory_read(const Var& query_key, const PixelMemory& mem, int object_id, int top_k) {
  if (mem.empty()) throw std::invalid_argument("memory_read: memory is empty");
  std::vector<Var> keys;
  std::vector<Var> values;
  for (const auto& e : mem.entries()) {
    auto it = e.values.find(object_id);
    if (it == e.values.end()) continue;
    keys.push_back(e.key);
    values.push_back(it->second);
  }
  if (keys.empty()) {
    throw std::invalid_argument("memory_read: no entry holds object " + std::to_string(object_id));
  }
  return topk_attention(query_key, ops::concat_rows(keys), ops::concat_rows(values), top_k);
}

ObjectMemoryEntry object_memory_update(const ObjectMemoryEntry& om, const Var& q_new) {
  ObjectMemoryEntry out;
  out.count = om.count + 1;
  if (om.count == 0) {
    out.mean = q_new;
    return out;
  }
  if (!om.mean.value().same_shape(q_new.value())) {
    throw std::invalid_argument("object_memory_update: query shape mismatch");
  }
  const double n = static_cast<double>(om.count);
  out.mean = ops::add(ops::scale(om.mean, n / (n + 1.0)), ops::scale(q_new, 1.0 / (n + 1.0)));
  return out;
}

MemoryParams MemoryParams::init(Rng& rng, const ModelConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.channels);
  const auto ck = static_cast<std::size_t>(cfg.key_dim);
  const auto cv = static_cast<std::size_t>(cfg.value_dim);
  const std::size_t h = c / 2;
  auto s = [](std::size_t fan) { return 1.0 / std::sqrt(static_cast<double>(fan)); };
  MemoryParams p;
  p.w_key = init_param(rng, c, ck, s(c));
  p.w1 = init_param(rng, 9 * 5, h, s(9 * 5));
  p.b1 = zero_param(1, h);
  p.w2 = init_param(rng, 9 * h, c, s(9 * h));
  p.b2 = zero_param(1, c);
  p.w3 = init_param(rng, 9 * c, c, s(9 * c));
  p.b3 = zero_param(1, c);
  p.w4 = init_param(rng, 9 * c, cv, s(9 * c));
  p.b4 = zero_param(1, cv);
  p.w_fuse = init_param(rng, c, cv, s(c));
  p.b_fuse = zero_param(1, cv);
  return p;
}

void MemoryParams::collect(ParamList& out) const {
  out.add("memory.w_key", w_key);
  out.add("memory.enc1.w", w1);
  out.add("memory.enc1.b", b1);
  out.add("memory.enc2.w", w2);
  out.add("memory.enc2.b", b2);
  out.add("memory.enc3.w", w3);
  out.add("memory.enc3.b", b3);
  out.add("memory.enc4.w", w4);
  out.add("memory.enc4.b", b4);
  out.add("memory.fuse.w", w_fuse);
  out.add("memory.fuse.b", b_fuse);
}

Var encode_key(const Var& level16, const MemoryParams& p) { return ops::matmul(level16, p.w_key); }

Var encode_value(const Image& frame, const Var& own_mask, const Var& others_mask,
                 const Var& level16, const MemoryParams& p) {
  const int h = frame.height;
  const int w = frame.width;
  const std::size_t npix = static_cast<std::size_t>(h) * w;
  if (own_mask.rows() != npix || others_mask.rows() != npix || own_mask.cols() != 1 ||
      others_mask.cols() != 1) {
    throw std::invalid_argument("encode_value: masks must be (H*W,1) at frame resolution");
  }
  if (level16.rows() != npix / 256) {
    throw std::invalid_argument("encode_value: stride-16 level does not match frame size");
  }
  Tensor centered = frame.rgb;
  for (auto& v : centered.flat()) v -= 0.5;
  const Var x = ops::concat_cols({constant(std::move(centered)), own_mask, others_mask});
  const Var e1 = ops::gelu(ops::conv2d(x, h, w, p.w1, p.b1, 3, 2, 1));
  const Var e2 = ops::gelu(ops::conv2d(e1, h / 2, w / 2, p.w2, p.b2, 3, 2, 1));
  const Var e3 = ops::gelu(ops::conv2d(e2, h / 4, w / 4, p.w3, p.b3, 3, 2, 1));
  const Var e4 = ops::conv2d(e3, h / 8, w / 8, p.w4, p.b4, 3, 2, 1);
  return ops::add(e4, ops::add_row(ops::matmul(level16, p.w_fuse), p.b_fuse));
}

}  // namespace s3vos
