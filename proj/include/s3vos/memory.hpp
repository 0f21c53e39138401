#pragma once

// Dual-level memory: a pixel-level key/value bank read with top-K filtered
// attention, and an object-level streaming average of propagated queries.

#include <map>
#include <vector>

#include "s3vos/backbone.hpp"
#include "s3vos/config.hpp"
#include "s3vos/kernels.hpp"
#include "s3vos/params.hpp"

namespace s3vos {

struct MemoryEntry {
  int frame_index = 0;
  Var key;                     // (Lm, Ck)
  std::map<int, Var> values;   // object id -> (Lm, Cv)
};

/// Bounded bank of past-frame keys and per-object values. The first entry
/// written is pinned and never evicted; beyond capacity the oldest unpinned
/// entry goes.
class PixelMemory {
 public:
  explicit PixelMemory(int capacity = 8, bool pin_first = true);

  void write(int frame_index, const Var& key, const std::map<int, Var>& values);

  const std::vector<MemoryEntry>& entries() const { return entries_; }
  int capacity() const { return capacity_; }
  bool pinned_first() const { return pin_first_; }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

 private:
  int capacity_;
  bool pin_first_;
  std::vector<MemoryEntry> entries_;
};

/// Functional form of PixelMemory::write.
PixelMemory memory_write(PixelMemory mem, int frame_index, const Var& key,
                         const std::map<int, Var>& values);

/// Scaled dot-product readout over every stored position holding a value for
/// `object_id`; per query row only the top_k largest affinities survive the
/// softmax. Throws when no entry holds the object.
Var memory_read(const Var& query_key, const PixelMemory& mem, int object_id, int top_k);

/// Readout against explicit stacked keys/values.
Var topk_attention(const Var& query_key, const Var& keys, const Var& values, int top_k);

/// Keep-mask (Lq, M) of the top_k largest logits per row; ties go to the
/// lower column index.
Tensor topk_mask(const Tensor& logits, int top_k);

struct ObjectMemoryEntry {
  Var mean;  // (N, C)
  int count = 0;
};

/// Streaming average: mean <- (count*mean + q)/(count+1).
ObjectMemoryEntry object_memory_update(const ObjectMemoryEntry& om, const Var& q_new);

using ObjectMemory = std::map<int, ObjectMemoryEntry>;

struct MemoryParams {
  Var w_key;  // (C, Ck) key projection of the stride-16 level
  Var w1, b1, w2, b2, w3, b3, w4, b4;  // value encoder convs, stride 2 each
  Var w_fuse, b_fuse;  // (C, Cv) stride-16 feature fusion

  static MemoryParams init(Rng& rng, const ModelConfig& cfg);
  void collect(ParamList& out) const;
};

Var encode_key(const Var& level16, const MemoryParams& p);

/// Value features from [frame RGB | own mask | others mask] at frame
/// resolution, downsampled to stride 16 and fused with the stride-16
/// backbone level. Masks are (H*W, 1) in [0,1].
Var encode_value(const Image& frame, const Var& own_mask, const Var& others_mask,
                 const Var& level16, const MemoryParams& p);

}  // namespace s3vos
