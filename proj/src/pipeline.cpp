#include "s3vos/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace s3vos {

// ------------------------------------------------------------------ model

DecoderParams DecoderParams::init(Rng& rng, const ModelConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.channels);
  const auto cv = static_cast<std::size_t>(cfg.value_dim);
  auto s = [](std::size_t fan) { return 1.0 / std::sqrt(static_cast<double>(fan)); };
  DecoderParams p;
  p.w_read = init_param(rng, cv, c, s(cv));
  p.b_read = zero_param(1, c);
  p.w8 = init_param(rng, 9 * c, c, s(9 * c));
  p.b8 = zero_param(1, c);
  p.w4 = init_param(rng, 9 * c, c, s(9 * c));
  p.b4 = zero_param(1, c);
  p.w_head = init_param(rng, c, 1, s(c));
  p.b_head = zero_param(1, 1);
  return p;
}

void DecoderParams::collect(ParamList& out) const {
  out.add("decoder.read.w", w_read);
  out.add("decoder.read.b", b_read);
  out.add("decoder.refine8.w", w8);
  out.add("decoder.refine8.b", b8);
  out.add("decoder.refine4.w", w4);
  out.add("decoder.refine4.b", b4);
  out.add("decoder.head.w", w_head);
  out.add("decoder.head.b", b_head);
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Model m;
  m.cfg = cfg;
  m.backbone = BackboneParams::init(rng, cfg);
  m.query = QueryParams::init(rng, cfg);
  m.memory = MemoryParams::init(rng, cfg);
  m.decoder = DecoderParams::init(rng, cfg);
  return m;
}

ParamList Model::params() const {
  ParamList out;
  backbone.collect(out);
  query.collect(out);
  memory.collect(out);
  decoder.collect(out);
  return out;
}

// ---------------------------------------------------------------- padding

int round_up_32(int v) { return (v + 31) / 32 * 32; }

LabelMask pad_mask(const LabelMask& mask, int height, int width) {
  LabelMask out(height, width);
  out.palette = mask.palette;
  for (int y = 0; y < mask.height && y < height; ++y)
    for (int x = 0; x < mask.width && x < width; ++x) out.at(y, x) = mask.at(y, x);
  return out;
}

PaddedInput pad_to_32(const Image& frame, const std::vector<LabelMask>& masks) {
  PaddedInput p;
  p.crop = {frame.height, frame.width};
  const int h = round_up_32(frame.height);
  const int w = round_up_32(frame.width);
  p.frame.height = h;
  p.frame.width = w;
  p.frame.rgb = Tensor(static_cast<std::size_t>(h) * w, 3);
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < frame.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        p.frame.rgb(static_cast<std::size_t>(y) * w + x, c) =
            frame.rgb(static_cast<std::size_t>(y) * frame.width + x, c);
      }
    }
  }
  for (const auto& m : masks) {
    if (m.height != frame.height || m.width != frame.width) {
      throw std::invalid_argument("pad_to_32: mask size differs from frame size");
    }
    p.masks.push_back(pad_mask(m, h, w));
  }
  return p;
}

Image crop_image(const Image& padded, const CropRecord& crop) {
  Image out;
  out.height = crop.height;
  out.width = crop.width;
  out.rgb = Tensor(static_cast<std::size_t>(crop.height) * crop.width, 3);
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.rgb(static_cast<std::size_t>(y) * crop.width + x, c) =
            padded.rgb(static_cast<std::size_t>(y) * padded.width + x, c);
  return out;
}

LabelMask crop_mask(const LabelMask& padded, const CropRecord& crop) {
  return pad_mask(padded, crop.height, crop.width);
}

TokenMask downsample_mask(const std::vector<std::uint8_t>& mask, int height, int width,
                          int stride) {
  if (height % stride != 0 || width % stride != 0) {
    throw std::invalid_argument("downsample_mask: sides must be divisible by the stride");
  }
  const int h = height / stride;
  const int w = width / stride;
  TokenMask out(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x] != 0)
        out[static_cast<std::size_t>(y / stride) * w + x / stride] = 1;
  return out;
}

// ---------------------------------------------------------------- decoder

Var fuse_readout(const Var& level16, const Var& readout, const DecoderParams& p) {
  return ops::add(level16, ops::add_row(ops::matmul(readout, p.w_read), p.b_read));
}

Var decode(const FeaturePyramid& pyr, const Var& fused16, const Var& queries, const Model& m) {
  const DecoderParams& p = m.decoder;
  const Level& l16 = pyr.level_at_stride(16);
  const Level& l8 = pyr.level_at_stride(8);
  const Level& l4 = pyr.level_at_stride(4);
  const Var up8 = ops::resize_bilinear(fused16, l16.height, l16.width, l8.height, l8.width);
  const Var x8 = ops::gelu(ops::conv2d(ops::add(up8, pyr.at_stride(8)), l8.height, l8.width, p.w8,
                                       p.b8, 3, 1, 1));
  const Var up4 = ops::resize_bilinear(x8, l8.height, l8.width, l4.height, l4.width);
  const Var& level4 = pyr.at_stride(4);
  const Var x4 = ops::gelu(
      ops::conv2d(ops::add(up4, level4), l4.height, l4.width, p.w4, p.b4, 3, 1, 1));
  Var logit4 = ops::add_row(ops::matmul(x4, p.w_head), p.b_head);
  logit4 = ops::add(logit4, query_readout(level4, queries, m.query.readout));
  return ops::resize_bilinear(logit4, l4.height, l4.width, l4.height * 4, l4.width * 4);
}

ObjectPrediction predict_object(const Model& m, const FeaturePyramid& pyr, const Var& readout,
                                const Var& q_in, const TokenMask& mask16) {
  const Var fused16 = fuse_readout(pyr.at_stride(16), readout, m.decoder);
  ObjectPrediction out;
  out.queries = query_transformer(fused16, q_in, mask16, m.query,
                                  !m.cfg.ablation.disable_discriminative_query);
  out.logits = decode(pyr, fused16, out.queries, m);
  return out;
}

Var logits_to_field(const std::vector<Var>& object_logits) {
  if (object_logits.empty()) throw std::invalid_argument("logits_to_field: no objects");
  return ops::soft_aggregate(ops::sigmoid(ops::concat_cols(object_logits)));
}

std::vector<std::uint8_t> field_argmax(const Tensor& field, const std::vector<int>& ids) {
  if (field.cols() != ids.size() + 1) {
    throw std::invalid_argument("field_argmax: field width does not match object count");
  }
  std::vector<std::uint8_t> out(field.rows(), 0);
  for (std::size_t r = 0; r < field.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < field.cols(); ++c)
      if (field(r, c) > field(r, best)) best = c;
    out[r] = best == 0 ? 0 : static_cast<std::uint8_t>(ids[best - 1]);
  }
  return out;
}

// ---------------------------------------------------------------- session

namespace {

Var binary_column(const std::vector<std::uint8_t>& labels, int id, bool others) {
  Tensor t(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool own = labels[i] == id;
    t[i] = others ? (labels[i] != 0 && !own ? 1.0 : 0.0) : (own ? 1.0 : 0.0);
  }
  return constant(std::move(t));
}

std::vector<std::uint8_t> binary_of(const std::vector<std::uint8_t>& labels, int id) {
  std::vector<std::uint8_t> b(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) b[i] = labels[i] == id ? 1 : 0;
  return b;
}

}  // namespace

SequenceSession::SequenceSession(const Model& model)
    : model_(model), memory_(model.cfg.memory_capacity, true) {}

void SequenceSession::write_memory(int frame_index, const Image& padded, const FeaturePyramid& pyr,
                                   const Var& key, const std::vector<std::uint8_t>& labels,
                                   const std::map<int, Var>& queries) {
  std::map<int, Var> values;
  for (int id : ids_) {
    if (std::find(labels.begin(), labels.end(), id) == labels.end()) continue;
    values[id] = encode_value(padded, binary_column(labels, id, false),
                              binary_column(labels, id, true), pyr.at_stride(16), model_.memory);
  }
  if (values.empty()) return;
  memory_.write(frame_index, key, values);
  write_log_.push_back(frame_index);
  for (const auto& [id, q] : queries) {
    if (values.count(id)) objects_[id] = object_memory_update(objects_[id], q);
  }
}

LabelMask SequenceSession::initialize(const Image& frame, const LabelMask& init) {
  NoGradGuard no_grad;
  const PaddedInput in = pad_to_32(frame, {init});
  crop_ = in.crop;
  const std::set<int> ids = init.ids();
  ids_.assign(ids.begin(), ids.end());
  initialized_ = true;
  frame_index_ = 1;
  if (ids_.empty()) return init;

  const int h = in.frame.height;
  const int w = in.frame.width;
  const auto& labels = in.masks[0].labels;
  const FeaturePyramid pyr = backbone_forward(in.frame, model_.backbone);
  const Var key = encode_key(pyr.at_stride(16), model_.memory);
  write_memory(0, in.frame, pyr, key, labels, {});
  std::map<int, Var> queries;
  for (int id : ids_) {
    const TokenMask m16 = downsample_mask(binary_of(labels, id), h, w, 16);
    const Var readout = memory_read(key, memory_, id, model_.cfg.top_k);
    const ObjectPrediction pred =
        predict_object(model_, pyr, readout, model_.query.init_queries, m16);
    objects_[id] = object_memory_update(ObjectMemoryEntry{}, pred.queries);
    prev_mask16_[id] = m16;
  }
  return init;
}

LabelMask SequenceSession::infer_frame(const Image& frame) {
  if (!initialized_) throw std::logic_error("infer_frame: session not initialized");
  if (frame.height != crop_.height || frame.width != crop_.width) {
    throw std::invalid_argument("infer_frame: frame size differs from the initial frame");
  }
  NoGradGuard no_grad;
  const int t = frame_index_++;
  const PaddedInput in = pad_to_32(frame);
  const int h = in.frame.height;
  const int w = in.frame.width;
  LabelMask out(h, w);
  out.palette = default_palette();
  if (ids_.empty()) return crop_mask(out, crop_);

  const FeaturePyramid pyr = backbone_forward(in.frame, model_.backbone);
  const Var key = encode_key(pyr.at_stride(16), model_.memory);
  std::vector<Var> logits;
  std::map<int, Var> queries;
  for (int id : ids_) {
    const Var readout = memory_read(key, memory_, id, model_.cfg.top_k);
    const ObjectPrediction pred =
        predict_object(model_, pyr, readout, objects_.at(id).mean, prev_mask16_.at(id));
    logits.push_back(pred.logits);
    queries[id] = pred.queries;
  }
  const Var field = logits_to_field(logits);
  out.labels = field_argmax(field.value(), ids_);
  // Padding carries no prediction.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (y >= crop_.height || x >= crop_.width) out.at(y, x) = 0;
  for (int id : ids_) prev_mask16_[id] = downsample_mask(binary_of(out.labels, id), h, w, 16);
  if (t % model_.cfg.update_interval == 0) write_memory(t, in.frame, pyr, key, out.labels, queries);
  return crop_mask(out, crop_);
}

std::vector<LabelMask> infer_sequence(const Model& model, const std::vector<Image>& frames,
                                      const LabelMask& init) {
  if (frames.empty()) throw std::invalid_argument("infer_sequence: no frames");
  SequenceSession session(model);
  std::vector<LabelMask> out;
  out.push_back(session.initialize(frames[0], init));
  for (std::size_t t = 1; t < frames.size(); ++t) out.push_back(session.infer_frame(frames[t]));
  for (auto& m : out)
    if (m.palette.empty()) m.palette = init.palette.empty() ? default_palette() : init.palette;
  return out;
}

// --------------------------------------------------------------- training

Clip sample_training_clip(const Dataset& ds, int iteration, const TrainConfig& cfg, Rng& rng) {
  const int t_len = cfg.num_frames;
  const int skip = cfg.max_skip_at(iteration);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i)
    if (static_cast<int>(ds.sequences[i].frames.size()) >= t_len) eligible.push_back(i);
  if (eligible.empty()) {
    throw std::runtime_error("sample_training_clip: no sequence has " + std::to_string(t_len) +
                             " frames");
  }
  constexpr int kAttempts = 1000;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const Sequence& seq = ds.sequences[eligible[std::uniform_int_distribution<std::size_t>(
        0, eligible.size() - 1)(rng)]];
    const int n = static_cast<int>(seq.frames.size());
    std::vector<int> seeds;
    for (int t = 0; t < n; ++t)
      if (!seq.masks[static_cast<std::size_t>(t)].ids().empty()) seeds.push_back(t);
    if (seeds.empty()) continue;
    const int seed = seeds[std::uniform_int_distribution<std::size_t>(0, seeds.size() - 1)(rng)];
    const int dir = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? 1 : -1;
    std::vector<int> window;
    for (int k = 1; k <= (t_len - 1) * skip; ++k) {
      const int idx = seed + dir * k;
      if (idx < 0 || idx >= n) break;
      window.push_back(idx);
    }
    if (static_cast<int>(window.size()) < t_len - 1) continue;
    std::shuffle(window.begin(), window.end(), rng);
    std::vector<int> chosen(window.begin(), window.begin() + (t_len - 1));
    std::sort(chosen.begin(), chosen.end(), [&](int a, int b) { return dir * a < dir * b; });
    bool ok = true;
    int prev = seed;
    for (int idx : chosen) {
      if (std::abs(idx - prev) > skip) ok = false;
      prev = idx;
    }
    if (!ok) continue;

    const std::set<int> present = seq.masks[static_cast<std::size_t>(seed)].ids();
    std::vector<int> ids(present.begin(), present.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    if (static_cast<int>(ids.size()) > cfg.max_objects) ids.resize(static_cast<std::size_t>(cfg.max_objects));
    std::sort(ids.begin(), ids.end());

    Clip clip;
    clip.sequence = seq.name;
    clip.object_ids = ids;
    clip.frame_indices.push_back(seed);
    clip.frame_indices.insert(clip.frame_indices.end(), chosen.begin(), chosen.end());
    const Image& f0 = seq.frames[static_cast<std::size_t>(seed)];
    int y0 = 0, x0 = 0;
    clip.height = f0.height;
    clip.width = f0.width;
    if (cfg.crop > 0 && cfg.crop < f0.height && cfg.crop < f0.width) {
      y0 = std::uniform_int_distribution<int>(0, f0.height - cfg.crop)(rng);
      x0 = std::uniform_int_distribution<int>(0, f0.width - cfg.crop)(rng);
      clip.height = clip.width = cfg.crop;
    }
    for (int idx : clip.frame_indices) {
      const Image& src = seq.frames[static_cast<std::size_t>(idx)];
      const LabelMask& msk = seq.masks[static_cast<std::size_t>(idx)];
      Image img;
      img.height = clip.height;
      img.width = clip.width;
      img.rgb = Tensor(static_cast<std::size_t>(clip.height) * clip.width, 3);
      std::vector<std::uint8_t> lab(static_cast<std::size_t>(clip.height) * clip.width, 0);
      for (int y = 0; y < clip.height; ++y) {
        for (int x = 0; x < clip.width; ++x) {
          const std::size_t d = static_cast<std::size_t>(y) * clip.width + x;
          const std::size_t s = static_cast<std::size_t>(y + y0) * src.width + (x + x0);
          for (std::size_t c = 0; c < 3; ++c) img.rgb(d, c) = src.rgb(s, c);
          const int v = msk.labels[s];
          for (std::size_t k = 0; k < ids.size(); ++k)
            if (ids[k] == v) lab[d] = static_cast<std::uint8_t>(k + 1);
        }
      }
      clip.frames.push_back(std::move(img));
      clip.labels.push_back(std::move(lab));
    }
    return clip;
  }
  throw std::runtime_error("sample_training_clip: no valid clip after " +
                           std::to_string(kAttempts) + " attempts (max-skip " +
                           std::to_string(skip) + ")");
}

void augment_clip(Clip& clip, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool flip = u(rng) < 0.5;
  const double brightness = 0.8 + 0.4 * u(rng);
  const double contrast = 0.8 + 0.4 * u(rng);
  const double saturation = 0.8 + 0.4 * u(rng);
  const bool gray = u(rng) < 0.1;
  const int h = clip.height;
  const int w = clip.width;
  for (std::size_t f = 0; f < clip.frames.size(); ++f) {
    Tensor& rgb = clip.frames[f].rgb;
    auto& lab = clip.labels[f];
    if (flip) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w / 2; ++x) {
          const std::size_t a = static_cast<std::size_t>(y) * w + x;
          const std::size_t b = static_cast<std::size_t>(y) * w + (w - 1 - x);
          for (std::size_t c = 0; c < 3; ++c) std::swap(rgb(a, c), rgb(b, c));
          std::swap(lab[a], lab[b]);
        }
      }
    }
    for (std::size_t i = 0; i < rgb.rows(); ++i) {
      double* px = rgb.row(i);
      const double luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
      for (int c = 0; c < 3; ++c) {
        double v = gray ? luma : luma + saturation * (px[c] - luma);
        v = ((v - 0.5) * contrast + 0.5) * brightness;
        px[c] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

std::vector<Var> forward_clip(const Model& m, const Clip& clip, int num_ref_frames, Rng& rng) {
  const std::size_t t_len = clip.frames.size();
  const int k_obj = static_cast<int>(clip.object_ids.size());
  if (t_len < 2) throw std::invalid_argument("forward_clip: need at least 2 frames");
  if (k_obj < 1) throw std::invalid_argument("forward_clip: clip has no objects");

  std::vector<int> ids(static_cast<std::size_t>(k_obj));
  std::iota(ids.begin(), ids.end(), 1);

  struct Stored {
    Var key;
    std::vector<Var> values;
  };
  std::vector<Stored> stored;
  std::vector<ObjectMemoryEntry> obj_mem(static_cast<std::size_t>(k_obj));
  std::vector<TokenMask> prev16(static_cast<std::size_t>(k_obj));

  // Annotated frame: values from ground truth, queries refined against it.
  const PaddedInput in0 = pad_to_32(clip.frames[0]);
  const int h = in0.frame.height;
  const int w = in0.frame.width;
  auto pad_labels = [&](const std::vector<std::uint8_t>& lab) {
    LabelMask lm(clip.height, clip.width);
    lm.labels = lab;
    return pad_mask(lm, h, w).labels;
  };
  {
    const auto lab0 = pad_labels(clip.labels[0]);
    const FeaturePyramid pyr = backbone_forward(in0.frame, m.backbone);
    const Var key = encode_key(pyr.at_stride(16), m.memory);
    Stored s{key, {}};
    for (int k = 1; k <= k_obj; ++k) {
      s.values.push_back(encode_value(in0.frame, binary_column(lab0, k, false),
                                      binary_column(lab0, k, true), pyr.at_stride(16), m.memory));
    }
    stored.push_back(s);
    for (int k = 1; k <= k_obj; ++k) {
      const auto ku = static_cast<std::size_t>(k - 1);
      prev16[ku] = downsample_mask(binary_of(lab0, k), h, w, 16);
      const Var readout = topk_attention(key, key, s.values[ku], m.cfg.top_k);
      const ObjectPrediction pred =
          predict_object(m, pyr, readout, m.query.init_queries, prev16[ku]);
      obj_mem[ku] = object_memory_update(obj_mem[ku], pred.queries);
    }
  }

  std::vector<Var> fields;
  for (std::size_t t = 1; t < t_len; ++t) {
    const PaddedInput in = pad_to_32(clip.frames[t]);
    const FeaturePyramid pyr = backbone_forward(in.frame, m.backbone);
    const Var key = encode_key(pyr.at_stride(16), m.memory);

    std::vector<std::size_t> refs;
    if (static_cast<int>(stored.size()) <= num_ref_frames) {
      refs.resize(stored.size());
      std::iota(refs.begin(), refs.end(), 0);
    } else {
      std::vector<std::size_t> pool(stored.size() - 1);
      std::iota(pool.begin(), pool.end(), 1);
      std::shuffle(pool.begin(), pool.end(), rng);
      refs.push_back(0);
      refs.insert(refs.end(), pool.begin(), pool.begin() + (num_ref_frames - 1));
      std::sort(refs.begin(), refs.end());
    }
    std::vector<Var> ref_keys;
    for (auto r : refs) ref_keys.push_back(stored[r].key);
    const Var keys = ops::concat_rows(ref_keys);

    std::vector<Var> logits;
    std::vector<Var> queries;
    for (int k = 0; k < k_obj; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      std::vector<Var> ref_values;
      for (auto r : refs) ref_values.push_back(stored[r].values[ku]);
      const Var readout = topk_attention(key, keys, ops::concat_rows(ref_values), m.cfg.top_k);
      const ObjectPrediction pred = predict_object(m, pyr, readout, obj_mem[ku].mean, prev16[ku]);
      logits.push_back(pred.logits);
      queries.push_back(pred.queries);
    }
    const Var field = logits_to_field(logits);
    fields.push_back(field);

    const auto hard = field_argmax(field.value(), ids);
    for (int k = 1; k <= k_obj; ++k) {
      prev16[static_cast<std::size_t>(k - 1)] = downsample_mask(binary_of(hard, k), h, w, 16);
    }
    if (t + 1 < t_len) {
      const Var objects = ops::sum_cols(ops::slice_cols(field, 1, static_cast<std::size_t>(k_obj)));
      Stored s{key, {}};
      for (int k = 1; k <= k_obj; ++k) {
        const Var own = ops::slice_cols(field, static_cast<std::size_t>(k), 1);
        s.values.push_back(encode_value(in.frame, own, ops::sub(objects, own), pyr.at_stride(16),
                                        m.memory));
        obj_mem[static_cast<std::size_t>(k - 1)] =
            object_memory_update(obj_mem[static_cast<std::size_t>(k - 1)],
                                 queries[static_cast<std::size_t>(k - 1)]);
      }
      stored.push_back(std::move(s));
    }
  }
  return fields;
}

Var train_loss(const std::vector<Var>& fields,
               const std::vector<std::vector<std::uint8_t>>& labels, double point_fraction,
               Rng& rng) {
  if (fields.empty() || fields.size() != labels.size()) {
    throw std::invalid_argument("train_loss: need one label map per supervised frame");
  }
  if (!(point_fraction > 0.0 && point_fraction <= 1.0)) {
    throw std::invalid_argument("train_loss: point_fraction must be in (0,1]");
  }
  std::vector<Var> frame_losses;
  for (std::size_t f = 0; f < fields.size(); ++f) {
    const Var& field = fields[f];
    const std::size_t n_pix = field.rows();
    const std::size_t n_lab = field.cols();
    if (labels[f].size() != n_pix) {
      throw std::invalid_argument("train_loss: label map size differs from prediction");
    }
    std::vector<std::size_t> idx(n_pix);
    std::iota(idx.begin(), idx.end(), 0);
    Var sub = field;
    if (point_fraction < 1.0) {
      const auto n = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(point_fraction * static_cast<double>(n_pix))));
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n_pix - 1)(rng);
        std::swap(idx[i], idx[j]);
      }
      idx.resize(n);
      std::sort(idx.begin(), idx.end());
      sub = ops::gather_rows(field, idx);
    }
    const std::size_t n = idx.size();
    Tensor onehot(n, n_lab);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t lab = labels[f][idx[i]];
      if (lab >= n_lab) throw std::invalid_argument("train_loss: label outside the field");
      onehot(i, lab) = 1.0 / static_cast<double>(n);
    }
    Var loss = ops::scale(ops::weighted_sum(ops::log(ops::clamp(sub, 1e-12, 1.0)), onehot), -1.0);
    const Var one = constant(Tensor(1, 1, 1.0));
    Var dice_total;
    for (std::size_t k = 1; k < n_lab; ++k) {
      Tensor g(n, 1);
      double sg = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = labels[f][idx[i]] == k ? 1.0 : 0.0;
        sg += g[i];
      }
      const Var p = ops::slice_cols(sub, k, 1);
      const Var num = ops::add(ops::scale(ops::weighted_sum(p, g), 2.0), one);
      const Var den = ops::add(ops::sum(p), constant(Tensor(1, 1, sg + 1.0)));
      const Var dice = ops::sub(one, ops::div(num, den));
      dice_total = dice_total.valid() ? ops::add(dice_total, dice) : dice;
    }
    if (dice_total.valid()) {
      loss = ops::add(loss, ops::scale(dice_total, 1.0 / static_cast<double>(n_lab - 1)));
    }
    frame_losses.push_back(loss);
  }
  return ops::scale(ops::sum(ops::concat_rows(frame_losses)),
                    1.0 / static_cast<double>(frame_losses.size()));
}

double smoothed(const std::vector<LossRecord>& log, std::size_t begin, std::size_t count) {
  if (begin >= log.size()) throw std::invalid_argument("smoothed: window outside the log");
  const std::size_t end = std::min(log.size(), begin + count);
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += log[i].loss;
  return s / static_cast<double>(end - begin);
}

TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::function<void(const LossRecord&)>& on_log) {
  cfg.validate();
  if (ds.sequences.empty()) throw std::invalid_argument("train: empty dataset");
  ParamList params = model.params();
  std::vector<NamedParam*> trainable;
  for (auto& p : params.items())
    if (p.trainable) trainable.push_back(&p);
  std::vector<Tensor> m1, m2;
  for (auto* p : trainable) {
    m1.emplace_back(p->var.rows(), p->var.cols());
    m2.emplace_back(p->var.rows(), p->var.cols());
  }
  Rng rng(cfg.seed);
  TrainResult result;
  for (int it = 0; it < cfg.iterations; ++it) {
    params.zero_grad();
    double total = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Clip clip = sample_training_clip(ds, it, cfg, rng);
      if (cfg.augment) augment_clip(clip, rng);
      const auto fields = forward_clip(model, clip, cfg.num_ref_frames, rng);
      std::vector<std::vector<std::uint8_t>> labels;
      for (std::size_t t = 1; t < clip.frames.size(); ++t) {
        LabelMask lm(clip.height, clip.width);
        lm.labels = clip.labels[t];
        labels.push_back(pad_mask(lm, round_up_32(clip.height), round_up_32(clip.width)).labels);
      }
      const Var loss =
          ops::scale(train_loss(fields, labels, cfg.point_fraction, rng), 1.0 / cfg.batch_size);
      total += loss.value()[0];
      if (!std::isfinite(total)) {
        throw TrainingDiverged("training diverged at iteration " + std::to_string(it) +
                                 ": loss is " + std::to_string(total) + " on clip '" +
                                 clip.sequence + "'");
      }
      backward(loss);
    }

    double norm2 = 0.0;
    for (auto* p : trainable) {
      const Tensor& g = p->var.grad();
      for (std::size_t i = 0; i < g.size(); ++i) norm2 += g[i] * g[i];
    }
    const double norm = std::sqrt(norm2);
    const double clip_scale =
        (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
    const double lr = cfg.lr_at(it);
    const double bc1 = 1.0 - std::pow(cfg.beta1, it + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, it + 1);
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      Tensor& w = trainable[i]->var.mutable_value();
      const Tensor& g = trainable[i]->var.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g.empty() ? 0.0 : g[j] * clip_scale;
        m1[i][j] = cfg.beta1 * m1[i][j] + (1.0 - cfg.beta1) * gj;
        m2[i][j] = cfg.beta2 * m2[i][j] + (1.0 - cfg.beta2) * gj * gj;
        const double step = (m1[i][j] / bc1) / (std::sqrt(m2[i][j] / bc2) + cfg.adam_eps);
        w[j] -= lr * (step + cfg.weight_decay * w[j]);
      }
    }
    const LossRecord rec{it, total, lr};
    result.log.push_back(rec);
    if (on_log && (it % std::max(1, cfg.log_every) == 0 || it + 1 == cfg.iterations)) on_log(rec);
  }
  params.zero_grad();
  return result;
}

// ------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'S', '3', 'V', 'O', 'S', 'C', 'K', '1'};
constexpr int kFormatVersion = 1;
static_assert(std::endian::native == std::endian::little,
              "checkpoint arrays are written in host order, which must be little-endian");

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const RunConfig& run) {
  RunConfig snapshot = run;
  snapshot.model = model.cfg;
  nlohmann::json manifest;
  manifest["format"] = "s3vos-checkpoint";
  manifest["version"] = kFormatVersion;
  manifest["config"] = snapshot.to_map();
  nlohmann::json plist = nlohmann::json::array();
  std::uint64_t offset = 0;
  const ParamList params = model.params();
  for (const auto& p : params.items()) {
    if (!p.trainable) continue;
    plist.push_back({{"name", p.name},
                     {"shape", {p.var.rows(), p.var.cols()}},
                     {"dtype", "float64"},
                     {"offset", offset}});
    offset += p.var.value().size() * sizeof(double);
  }
  manifest["params"] = plist;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params.items()) {
    if (!p.trainable) continue;
    const Tensor& v = p.var.value();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, RunConfig* run) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + " is not an s3vos checkpoint");
  }
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw std::runtime_error(path.string() + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": corrupt manifest: " + e.what());
  }
  if (manifest.value("format", "") != "s3vos-checkpoint" ||
      manifest.value("version", 0) != kFormatVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint format or version");
  }
  RunConfig cfg;
  for (const auto& [k, v] : manifest.at("config").items()) cfg.set(k, v.get<std::string>());
  Model model = Model::init(cfg.model, 0);

  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : manifest.at("params")) entries[e.at("name").get<std::string>()] = e;
  const std::streamoff data_start = in.tellg();
  ParamList params = model.params();
  std::size_t matched = 0;
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    auto it = entries.find(p.name);
    if (it == entries.end()) {
      throw std::runtime_error(path.string() + ": parameter '" + p.name + "' missing");
    }
    const auto& e = it->second;
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != p.var.rows() || shape[1] != p.var.cols()) {
      throw std::runtime_error(path.string() + ": parameter '" + p.name + "' has shape (" +
                               std::to_string(shape.at(0)) + "," +
                               std::to_string(shape.size() > 1 ? shape[1] : 0) +
                               ") but the model expects " + p.var.value().shape_str());
    }
    if (e.at("dtype").get<std::string>() != "float64") {
      throw std::runtime_error(path.string() + ": parameter '" + p.name + "' is not float64");
    }
    in.seekg(data_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    Tensor& v = p.var.mutable_value();
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path.string() + ": truncated data for '" + p.name + "'");
    ++matched;
  }
  if (matched != entries.size()) {
    throw std::runtime_error(path.string() + ": manifest lists parameters the model lacks");
  }
  if (run != nullptr) *run = cfg;
  return model;
}

}  // namespace s3vos
