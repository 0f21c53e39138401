#include "s3vos/backbone.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace s3vos {

namespace {

Var frozen_normal(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  return constant(random_normal(rows, cols, rng, stddev));
}

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

Var vit_layer(const Var& x, const VitLayerParams& l, int heads) {
  const std::size_t width = x.cols();
  const std::size_t dh = width / static_cast<std::size_t>(heads);
  const Var y = ops::layer_norm_rows(x);
  const Var qkv = ops::add_row(ops::matmul(y, l.w_qkv), l.b_qkv);
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * dh;
    const Var q = ops::slice_cols(qkv, c0, dh);
    const Var k = ops::slice_cols(qkv, width + c0, dh);
    const Var v = ops::slice_cols(qkv, 2 * width + c0, dh);
    const Var att = ops::softmax_rows(
        ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh))));
    outs.push_back(ops::matmul(att, v));
  }
  const Var attn = ops::add_row(ops::matmul(ops::concat_cols(outs), l.w_proj), l.b_proj);
  const Var x1 = ops::add(x, attn);
  const Var y1 = ops::layer_norm_rows(x1);
  const Var mlp = ops::add_row(
      ops::matmul(ops::gelu(ops::add_row(ops::matmul(y1, l.w_fc1), l.b_fc1)), l.w_fc2), l.b_fc2);
  return ops::add(x1, mlp);
}

}  // namespace

VitParams VitParams::init(const ModelConfig& cfg) {
  Rng rng(cfg.vit_seed);
  const auto w = static_cast<std::size_t>(cfg.vit_width);
  VitParams p;
  p.width = cfg.vit_width;
  p.heads = cfg.vit_heads;
  p.patch = cfg.patch;
  const std::size_t pin = static_cast<std::size_t>(cfg.patch) * cfg.patch * 3;
  p.w_patch = frozen_normal(rng, pin, w, fan_in_std(pin));
  p.b_patch = constant(Tensor(1, w));
  p.cls = frozen_normal(rng, 1, w, 1.0);
  for (int i = 0; i < cfg.vit_depth; ++i) {
    VitLayerParams l;
    l.w_qkv = frozen_normal(rng, w, 3 * w, fan_in_std(w));
    l.b_qkv = constant(Tensor(1, 3 * w));
    // Residual branches are scaled down so the random trunk keeps a usable
    // signal-to-residual ratio through depth.
    l.w_proj = frozen_normal(rng, w, w, 0.5 * fan_in_std(w));
    l.b_proj = constant(Tensor(1, w));
    l.w_fc1 = frozen_normal(rng, w, 4 * w, fan_in_std(w));
    l.b_fc1 = constant(Tensor(1, 4 * w));
    l.w_fc2 = frozen_normal(rng, 4 * w, w, 0.5 * fan_in_std(4 * w));
    l.b_fc2 = constant(Tensor(1, w));
    p.layers.push_back(std::move(l));
  }
  return p;
}

void VitParams::collect(ParamList& out) const {
  out.add("vit.patch.w", w_patch, false);
  out.add("vit.patch.b", b_patch, false);
  out.add("vit.cls", cls, false);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string pre = "vit.layer" + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.add(pre + "qkv.w", l.w_qkv, false);
    out.add(pre + "qkv.b", l.b_qkv, false);
    out.add(pre + "proj.w", l.w_proj, false);
    out.add(pre + "proj.b", l.b_proj, false);
    out.add(pre + "fc1.w", l.w_fc1, false);
    out.add(pre + "fc1.b", l.b_fc1, false);
    out.add(pre + "fc2.w", l.w_fc2, false);
    out.add(pre + "fc2.b", l.b_fc2, false);
  }
}

Tensor patch_position_code(int grid_height, int grid_width, int width) {
  Tensor code(static_cast<std::size_t>(grid_height) * grid_width, static_cast<std::size_t>(width));
  const int quarter = width / 4;
  for (int y = 0; y < grid_height; ++y) {
    for (int x = 0; x < grid_width; ++x) {
      double* row = code.row(static_cast<std::size_t>(y) * grid_width + x);
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(100.0, -static_cast<double>(i) / quarter);
        row[i] = std::sin(x * freq);
        row[quarter + i] = std::cos(x * freq);
        row[2 * quarter + i] = std::sin(y * freq);
        row[3 * quarter + i] = std::cos(y * freq);
      }
    }
  }
  return code;
}

VitState vit_forward(const Image& frame, const VitParams& p, const std::vector<int>& taps) {
  if (frame.height % 32 != 0 || frame.width % 32 != 0) {
    throw std::invalid_argument("vit_forward: frame " + std::to_string(frame.height) + "x" +
                                std::to_string(frame.width) +
                                " is not padded to multiples of 32");
  }
  if (frame.rgb.rows() != static_cast<std::size_t>(frame.height) * frame.width ||
      frame.rgb.cols() != 3) {
    throw std::invalid_argument("vit_forward: frame tensor must be (H*W, 3)");
  }
  VitState st;
  st.grid_height = frame.height / p.patch;
  st.grid_width = frame.width / p.patch;
  st.tapped = taps;
  Tensor centered = frame.rgb;
  for (auto& v : centered.flat()) v -= 0.5;
  Var patches = ops::conv2d(constant(std::move(centered)), frame.height, frame.width, p.w_patch,
                            p.b_patch, p.patch, p.patch, 0);
  patches = ops::add(patches,
                     constant(patch_position_code(st.grid_height, st.grid_width, p.width)));
  Var x = ops::concat_rows({p.cls, patches});
  std::size_t next_tap = 0;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    x = vit_layer(x, p.layers[i], p.heads);
    while (next_tap < taps.size() && taps[next_tap] == static_cast<int>(i) + 1) {
      // Taps pass through a final (affine-free) norm, as a ViT head would.
      const Tensor v = ops::layer_norm_rows(x).value();
      Tensor cls(1, v.cols());
      std::copy(v.row(0), v.row(1), cls.data());
      Tensor pt(v.rows() - 1, v.cols());
      std::copy(v.row(1), v.row(0) + v.size(), pt.data());
      st.cls_tokens.push_back(std::move(cls));
      st.patch_tokens.push_back(std::move(pt));
      ++next_tap;
    }
  }
  if (next_tap != taps.size()) throw std::invalid_argument("vit_forward: tap beyond depth");
  return st;
}

Var global_token(const Var& patch_tokens) {
  if (patch_tokens.rows() == 0) throw std::invalid_argument("global_token: no tokens");
  return ops::mean_rows(patch_tokens);
}

BlockParams BlockParams::init(Rng& rng, const ModelConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.channels);
  const auto cv = static_cast<std::size_t>(cfg.vit_width);
  BlockParams b;
  b.sem.w_cls = init_param(rng, cv, c, fan_in_std(cv));
  b.sem.wq = init_param(rng, c, c, fan_in_std(c));
  b.sem.wk = init_param(rng, c, c, fan_in_std(c));
  b.sem.wv = init_param(rng, c, c, 0.5 * fan_in_std(c));
  b.sem.d = c;
  b.spatial.w_vit = init_param(rng, cv, c, 0.5 * fan_in_std(cv));
  b.spatial.deform = DeformableParams::init(rng, c, cfg.deform_heads, 4, cfg.deform_points);
  b.ffn = ConvFfnParams::init(rng, c, static_cast<std::size_t>(cfg.ffn_hidden));
  return b;
}

void BlockParams::collect(const std::string& prefix, ParamList& out) const {
  out.add(prefix + "sem.w_cls", sem.w_cls);
  out.add(prefix + "sem.wq", sem.wq);
  out.add(prefix + "sem.wk", sem.wk);
  out.add(prefix + "sem.wv", sem.wv);
  out.add(prefix + "spa.w_vit", spatial.w_vit);
  out.add(prefix + "spa.w_offset", spatial.deform.w_offset);
  out.add(prefix + "spa.b_offset", spatial.deform.b_offset);
  out.add(prefix + "spa.w_weight", spatial.deform.w_weight);
  out.add(prefix + "spa.b_weight", spatial.deform.b_weight);
  out.add(prefix + "spa.w_value", spatial.deform.w_value);
  out.add(prefix + "spa.w_out", spatial.deform.w_out);
  out.add(prefix + "ffn.w_in", ffn.w_in);
  out.add(prefix + "ffn.b_in", ffn.b_in);
  out.add(prefix + "ffn.w_dw", ffn.w_dw);
  out.add(prefix + "ffn.b_dw", ffn.b_dw);
  out.add(prefix + "ffn.w_out", ffn.w_out);
  out.add(prefix + "ffn.b_out", ffn.b_out);
}

StemParams StemParams::init(Rng& rng, const ModelConfig& cfg) {
  const auto c = static_cast<std::size_t>(cfg.channels);
  const std::size_t h = c / 2;
  StemParams s;
  const double gain = std::sqrt(2.0);  // GELU between convolutions
  s.w1 = init_param(rng, 9 * 3, h, gain * fan_in_std(9 * 3));
  s.b1 = zero_param(1, h);
  s.w2 = init_param(rng, 9 * h, c, gain * fan_in_std(9 * h));
  s.b2 = zero_param(1, c);
  s.w3 = init_param(rng, 9 * c, c, gain * fan_in_std(9 * c));
  s.b3 = zero_param(1, c);
  s.w4 = init_param(rng, 9 * c, c, gain * fan_in_std(9 * c));
  s.b4 = zero_param(1, c);
  s.w5 = init_param(rng, 9 * c, c, gain * fan_in_std(9 * c));
  s.b5 = zero_param(1, c);
  return s;
}

void StemParams::collect(const std::string& prefix, ParamList& out) const {
  const Var* ws[] = {&w1, &w2, &w3, &w4, &w5};
  const Var* bs[] = {&b1, &b2, &b3, &b4, &b5};
  for (int i = 0; i < 5; ++i) {
    out.add(prefix + "conv" + std::to_string(i + 1) + ".w", *ws[i]);
    out.add(prefix + "conv" + std::to_string(i + 1) + ".b", *bs[i]);
  }
}

BackboneParams BackboneParams::init(Rng& rng, const ModelConfig& cfg) {
  BackboneParams p;
  p.stem = StemParams::init(rng, cfg);
  for (int i = 0; i < cfg.num_blocks; ++i) p.blocks.push_back(BlockParams::init(rng, cfg));
  p.vit = VitParams::init(cfg);
  p.ablation = cfg.ablation;
  return p;
}

void BackboneParams::collect(ParamList& out) const {
  stem.collect("backbone.stem.", out);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect("backbone.block" + std::to_string(i) + ".", out);
  }
  vit.collect(out);
}

TokenTensor FeaturePyramid::to_tokens() const {
  return TokenTensor::from_levels(ops::concat_rows(maps), levels);
}

FeaturePyramid FeaturePyramid::from_tokens(const TokenTensor& t) {
  FeaturePyramid p;
  p.levels = t.levels;
  std::size_t off = 0;
  for (const auto& l : t.levels) {
    p.maps.push_back(ops::slice_rows(t.data, off, l.area()));
    off += l.area();
  }
  return p;
}

const Var& FeaturePyramid::at_stride(int stride) const {
  for (std::size_t i = 0; i < levels.size(); ++i)
    if (levels[i].stride == stride) return maps[i];
  throw std::invalid_argument("FeaturePyramid: no level at stride " + std::to_string(stride));
}

const Level& FeaturePyramid::level_at_stride(int stride) const {
  for (const auto& l : levels)
    if (l.stride == stride) return l;
  throw std::invalid_argument("FeaturePyramid: no level at stride " + std::to_string(stride));
}

TokenTensor semantic_embed(const TokenTensor& prev, const Var& cls, const Var& global,
                           const SemanticEmbedParams& p) {
  if (cls.cols() != p.w_cls.rows() || global.cols() != p.w_cls.rows()) {
    throw std::invalid_argument("semantic_embed: CLS/global width does not match projection");
  }
  if (prev.channels() != p.wq.rows()) {
    throw std::invalid_argument("semantic_embed: token width does not match query projection");
  }
  const Var kv = ops::matmul(ops::concat_rows({cls, global}), p.w_cls);
  const Var att = cross_attention(prev.data, kv, kv, p.wq, p.wk, p.wv, p.d);
  return prev.with_data(ops::add(prev.data, att));
}

TokenTensor spatial_modeling(const TokenTensor& sem, const Tensor& vit_patches, int grid_height,
                             int grid_width, const SpatialParams& p) {
  if (sem.ref_points.rows() != sem.token_count()) {
    throw std::invalid_argument("spatial_modeling: ref_points missing");
  }
  const Var vp = ops::matmul(constant(vit_patches), p.w_vit);
  std::vector<Var> per_level;
  for (const auto& l : sem.levels) {
    per_level.push_back(ops::resize_bilinear(vp, grid_height, grid_width, l.height, l.width));
  }
  const TokenTensor query = sem.with_data(ops::add(sem.data, ops::concat_rows(per_level)));
  const TokenTensor att = deformable_attention(query, sem, p.deform);
  return sem.with_data(ops::add(sem.data, att.data));
}

TokenTensor block_forward(const TokenTensor& prev, const VitState& vit, std::size_t tap_index,
                          const BlockParams& p, const AblationFlags& ablation) {
  if (tap_index >= vit.patch_tokens.size()) {
    throw std::invalid_argument("block_forward: no ViT tap " + std::to_string(tap_index));
  }
  const Tensor& patches = vit.patch_tokens[tap_index];
  TokenTensor sem = prev;
  if (!ablation.disable_semantic_embed) {
    const Var patch_var = constant(patches);
    sem = semantic_embed(prev, constant(vit.cls_tokens[tap_index]), global_token(patch_var), p.sem);
  }
  TokenTensor spa = sem;
  if (!ablation.disable_spatial_modeling) {
    spa = spatial_modeling(sem, patches, vit.grid_height, vit.grid_width, p.spatial);
  }
  const TokenTensor ffn = conv_ffn(spa.with_data(ops::add(spa.data, prev.data)), p.ffn);
  return spa.with_data(ops::add(spa.data, ffn.data));
}

FeaturePyramid stem_forward(const Image& frame, const StemParams& p) {
  const int h = frame.height;
  const int w = frame.width;
  if (h % 32 != 0 || w % 32 != 0) {
    throw std::invalid_argument("stem_forward: frame is not padded to multiples of 32");
  }
  Tensor centered = frame.rgb;
  for (auto& v : centered.flat()) v -= 0.5;
  const Var x0 = constant(std::move(centered));
  const Var x1 = ops::gelu(ops::conv2d(x0, h, w, p.w1, p.b1, 3, 2, 1));
  const Var l4 = ops::conv2d(x1, h / 2, w / 2, p.w2, p.b2, 3, 2, 1);
  const Var l8 = ops::conv2d(ops::gelu(l4), h / 4, w / 4, p.w3, p.b3, 3, 2, 1);
  const Var l16 = ops::conv2d(ops::gelu(l8), h / 8, w / 8, p.w4, p.b4, 3, 2, 1);
  const Var l32 = ops::conv2d(ops::gelu(l16), h / 16, w / 16, p.w5, p.b5, 3, 2, 1);
  FeaturePyramid fp;
  fp.levels = {{4, h / 4, w / 4}, {8, h / 8, w / 8}, {16, h / 16, w / 16}, {32, h / 32, w / 32}};
  // Per-token normalization puts every level on the same scale as the
  // normalized ViT features the blocks mix in.
  fp.maps = {ops::layer_norm_rows(l4), ops::layer_norm_rows(l8), ops::layer_norm_rows(l16),
             ops::layer_norm_rows(l32)};
  return fp;
}

FeaturePyramid backbone_forward(const Image& frame, const BackboneParams& p) {
  FeaturePyramid stem = stem_forward(frame, p.stem);
  if (p.blocks.empty()) return stem;
  const int depth = static_cast<int>(p.vit.layers.size());
  const int n = static_cast<int>(p.blocks.size());
  std::vector<int> taps;
  for (int i = 1; i <= n; ++i) taps.push_back(i * depth / n);
  const VitState vit = vit_forward(frame, p.vit, taps);
  TokenTensor tokens = stem.to_tokens();
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    tokens = block_forward(tokens, vit, i, p.blocks[i], p.ablation);
  }
  return FeaturePyramid::from_tokens(tokens);
}

}  // namespace s3vos
