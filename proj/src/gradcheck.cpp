#include "s3vos/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "s3vos/backbone.hpp"
#include "s3vos/data.hpp"
#include "s3vos/kernels.hpp"
#include "s3vos/memory.hpp"
#include "s3vos/ops.hpp"
#include "s3vos/pipeline.hpp"
#include "s3vos/query.hpp"

namespace s3vos {

namespace {

constexpr double kStep = 1e-5;
constexpr std::size_t kMaxCoords = 8;

Var leaf(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  return parameter(random_uniform(r, c, rng, lo, hi));
}

// Reduces an output to a scalar with fixed weights in [0.5, 1.5]. A plain sum
// would make every softmax-like gradient identically zero.
std::function<Var(const Var&)> reducer(Rng& rng, std::size_t r, std::size_t c) {
  Tensor w = random_uniform(r, c, rng, 0.5, 1.5);
  return [w](const Var& out) { return ops::weighted_sum(out, w); };
}

std::vector<Var> trainable_leaves(const ParamList& pl) {
  std::vector<Var> out;
  for (const auto& p : pl.items())
    if (p.trainable && p.var.requires_grad()) out.push_back(p.var);
  return out;
}

// Moves every parameter off special values (zero-initialized projections,
// integer offsets) so checks do not sit on kinks of piecewise-linear ops.
void jitter(const std::vector<Var>& leaves, Rng& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Var v : leaves)
    for (auto& x : v.mutable_value().flat()) x += n(rng);
}

TokenMask random_mask(Rng& rng, std::size_t n) {
  TokenMask m(n);
  for (auto& v : m) v = std::uniform_int_distribution<int>(0, 1)(rng);
  m[0] = 1;
  return m;
}

// Deliberately wrong backward (derivative of x^2 reported as 3x): the
// negative control for the harness itself.
Var faulty_square(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.flat()) v *= v;
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& x = *n.inputs[0];
    Tensor& g = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * 3.0 * x.value[i];
  });
}

using Builder = std::function<GradCheckCase(Rng&)>;

GradCheckCase unary(Rng& rng, std::size_t r, std::size_t c, double lo, double hi,
                    const std::function<Var(const Var&)>& f) {
  Var x = leaf(rng, r, c, lo, hi);
  NoGradGuard probe;
  const Var shape = f(x);
  auto red = reducer(rng, shape.rows(), shape.cols());
  return {{x}, [=] { return red(f(x)); }};
}

GradCheckCase binary(Rng& rng, std::size_t r1, std::size_t c1, std::size_t r2, std::size_t c2,
                     const std::function<Var(const Var&, const Var&)>& f) {
  Var a = leaf(rng, r1, c1);
  Var b = leaf(rng, r2, c2);
  NoGradGuard probe;
  const Var shape = f(a, b);
  auto red = reducer(rng, shape.rows(), shape.cols());
  return {{a, b}, [=] { return red(f(a, b)); }};
}

std::vector<Level> two_levels() { return {{8, 2, 2}, {16, 1, 2}}; }

std::vector<Level> pyramid_levels(int h, int w) {
  return {{4, h / 4, w / 4}, {8, h / 8, w / 8}, {16, h / 16, w / 16}, {32, h / 32, w / 32}};
}

Image random_image(Rng& rng, int h, int w) {
  Image img;
  img.height = h;
  img.width = w;
  img.rgb = random_uniform(static_cast<std::size_t>(h) * w, 3, rng, 0.0, 1.0);
  return img;
}

GradCheckCase composed_two_frame(Rng& rng) {
  const ModelConfig cfg = tiny_model_config();
  auto model = std::make_shared<Model>(Model::init(cfg, rng()));
  const auto leaves = trainable_leaves(model->params());
  jitter(leaves, rng, 0.05);
  SyntheticSpec spec;
  spec.num_sequences = 1;
  spec.frames_per_seq = 2;
  spec.height = 32;
  spec.width = 32;
  spec.num_objects = 2;
  spec.seed = rng();
  const Dataset ds = generate_sequences(spec);
  auto clip = std::make_shared<Clip>();
  const Sequence& s = ds.sequences[0];
  clip->sequence = s.name;
  clip->height = clip->width = 32;
  clip->object_ids = {1, 2};
  for (int t = 0; t < 2; ++t) {
    clip->frame_indices.push_back(t);
    clip->frames.push_back(s.frames[static_cast<std::size_t>(t)]);
    clip->labels.push_back(s.masks[static_cast<std::size_t>(t)].labels);
  }
  return {leaves, [model, clip] {
            Rng r(0);
            const auto fields = forward_clip(*model, *clip, 3, r);
            return train_loss(fields, {clip->labels[1]}, 1.0, r);
          }};
}

std::vector<std::pair<std::string, Builder>> op_builders() {
  std::vector<std::pair<std::string, Builder>> b;
  // Tape primitives.
  b.emplace_back("matmul", [](Rng& r) {
    return binary(r, 3, 4, 4, 5, [](const Var& a, const Var& c) { return ops::matmul(a, c); });
  });
  b.emplace_back("matmul_nt", [](Rng& r) {
    return binary(r, 3, 4, 5, 4, [](const Var& a, const Var& c) { return ops::matmul_nt(a, c); });
  });
  b.emplace_back("add", [](Rng& r) {
    return binary(r, 3, 4, 3, 4, [](const Var& a, const Var& c) { return ops::add(a, c); });
  });
  b.emplace_back("sub", [](Rng& r) {
    return binary(r, 3, 4, 3, 4, [](const Var& a, const Var& c) { return ops::sub(a, c); });
  });
  b.emplace_back("mul", [](Rng& r) {
    return binary(r, 3, 4, 3, 4, [](const Var& a, const Var& c) { return ops::mul(a, c); });
  });
  b.emplace_back("div", [](Rng& r) {
    Var a = leaf(r, 3, 4);
    Var d = leaf(r, 3, 4, 0.5, 2.0);
    auto red = reducer(r, 3, 4);
    return GradCheckCase{{a, d}, [=] { return red(ops::div(a, d)); }};
  });
  b.emplace_back("scale", [](Rng& r) {
    return unary(r, 3, 4, -1, 1, [](const Var& a) { return ops::scale(a, -1.7); });
  });
  b.emplace_back("add_row", [](Rng& r) {
    return binary(r, 3, 4, 1, 4, [](const Var& a, const Var& c) { return ops::add_row(a, c); });
  });
  b.emplace_back("mul_row", [](Rng& r) {
    return binary(r, 3, 4, 1, 4, [](const Var& a, const Var& c) { return ops::mul_row(a, c); });
  });
  b.emplace_back("mul_col", [](Rng& r) {
    return binary(r, 3, 4, 3, 1, [](const Var& a, const Var& c) { return ops::mul_col(a, c); });
  });
  b.emplace_back("broadcast_row", [](Rng& r) {
    return unary(r, 1, 4, -1, 1, [](const Var& a) { return ops::broadcast_row(a, 3); });
  });
  b.emplace_back("sum", [](Rng& r) {
    return unary(r, 3, 4, -1, 1, [](const Var& a) { return ops::sum(ops::mul(a, a)); });
  });
  b.emplace_back("mean_rows", [](Rng& r) {
    return unary(r, 5, 3, -1, 1, [](const Var& a) { return ops::mean_rows(a); });
  });
  b.emplace_back("sum_cols", [](Rng& r) {
    return unary(r, 5, 3, -1, 1, [](const Var& a) { return ops::sum_cols(a); });
  });
  b.emplace_back("softmax", [](Rng& r) {
    return unary(r, 1, 8, -2, 2, [](const Var& a) { return ops::softmax_rows(a); });
  });
  b.emplace_back("softmax_masked", [](Rng& r) {
    auto mask = std::make_shared<Tensor>(4, 6);
    for (auto& v : mask->flat()) v = std::uniform_int_distribution<int>(0, 1)(r);
    for (std::size_t c = 0; c < 6; ++c) (*mask)(3, c) = 0.0;  // fully masked row falls back
    (*mask)(0, 0) = 1.0;
    return unary(r, 4, 6, -2, 2, [mask](const Var& a) { return ops::softmax_rows(a, mask.get()); });
  });
  b.emplace_back("gelu", [](Rng& r) {
    return unary(r, 3, 5, -3, 3, [](const Var& a) { return ops::gelu(a); });
  });
  b.emplace_back("sigmoid", [](Rng& r) {
    return unary(r, 3, 5, -3, 3, [](const Var& a) { return ops::sigmoid(a); });
  });
  b.emplace_back("tanh", [](Rng& r) {
    return unary(r, 3, 5, -2, 2, [](const Var& a) { return ops::tanh(a); });
  });
  b.emplace_back("layer_norm_rows", [](Rng& r) {
    return unary(r, 3, 6, -2, 2, [](const Var& a) { return ops::layer_norm_rows(a); });
  });
  b.emplace_back("row_normalize", [](Rng& r) {
    return unary(r, 4, 5, -2, 2, [](const Var& a) { return ops::row_normalize(a); });
  });
  b.emplace_back("concat_rows", [](Rng& r) {
    return binary(r, 2, 3, 4, 3,
                  [](const Var& a, const Var& c) { return ops::concat_rows({a, c, a}); });
  });
  b.emplace_back("concat_cols", [](Rng& r) {
    return binary(r, 3, 2, 3, 4, [](const Var& a, const Var& c) { return ops::concat_cols({a, c}); });
  });
  b.emplace_back("slice_rows", [](Rng& r) {
    return unary(r, 6, 3, -1, 1, [](const Var& a) { return ops::slice_rows(a, 2, 3); });
  });
  b.emplace_back("slice_cols", [](Rng& r) {
    return unary(r, 3, 6, -1, 1, [](const Var& a) { return ops::slice_cols(a, 1, 4); });
  });
  b.emplace_back("gather_rows", [](Rng& r) {
    return unary(r, 5, 3, -1, 1, [](const Var& a) { return ops::gather_rows(a, {4, 0, 4, 2}); });
  });
  b.emplace_back("max_cols", [](Rng& r) {
    return unary(r, 4, 5, -1, 1, [](const Var& a) { return ops::max_cols(a); });
  });
  b.emplace_back("clamp", [](Rng& r) {
    return unary(r, 4, 5, -1, 1, [](const Var& a) { return ops::clamp(a, -0.5, 0.6); });
  });
  b.emplace_back("log", [](Rng& r) {
    return unary(r, 4, 5, 0.2, 2.0, [](const Var& a) { return ops::log(a); });
  });
  b.emplace_back("conv2d", [](Rng& r) {
    Var x = leaf(r, 5 * 6, 3);
    Var w = leaf(r, 9 * 3, 4);
    Var bias = leaf(r, 1, 4);
    auto red = reducer(r, 3 * 3, 4);
    return GradCheckCase{{x, w, bias}, [=] { return red(ops::conv2d(x, 5, 6, w, bias, 3, 2, 1)); }};
  });
  b.emplace_back("conv2d_stride1", [](Rng& r) {
    Var x = leaf(r, 4 * 5, 2);
    Var w = leaf(r, 9 * 2, 3);
    Var bias = leaf(r, 1, 3);
    auto red = reducer(r, 4 * 5, 3);
    return GradCheckCase{{x, w, bias}, [=] { return red(ops::conv2d(x, 4, 5, w, bias, 3, 1, 1)); }};
  });
  b.emplace_back("depthwise3x3", [](Rng& r) {
    const std::vector<raw::LevelGeom> geoms = {{3, 4, 0}, {2, 2, 12}};
    Var x = leaf(r, 16, 3);
    Var w = leaf(r, 9, 3);
    Var bias = leaf(r, 1, 3);
    auto red = reducer(r, 16, 3);
    return GradCheckCase{{x, w, bias}, [=] { return red(ops::depthwise3x3(x, geoms, w, bias)); }};
  });
  b.emplace_back("resize_bilinear", [](Rng& r) {
    return unary(r, 3 * 4, 2, -1, 1, [](const Var& a) { return ops::resize_bilinear(a, 3, 4, 7, 5); });
  });
  b.emplace_back("bilinear_sample", [](Rng& r) {
    Var map = leaf(r, 5 * 7, 3);
    Var pts = leaf(r, 9, 2, -0.1, 1.1);
    auto red = reducer(r, 9, 3);
    return GradCheckCase{{map, pts}, [=] { return red(ops::bilinear_sample(map, 5, 7, pts)); }};
  });
  b.emplace_back("deform_gather", [](Rng& r) {
    const std::vector<Level> levels = two_levels();
    const Tensor ref = reference_points(levels);
    std::vector<raw::LevelGeom> geoms = {{2, 2, 0}, {1, 2, 4}};
    const int heads = 2, points = 2;
    const std::size_t slots = heads * levels.size() * points;
    Var value = leaf(r, 6, 3);
    Var off = leaf(r, 6, 2 * slots, -0.7, 0.7);
    Var wts = leaf(r, 6, slots, 0.1, 1.0);
    auto red = reducer(r, 6, 3);
    return GradCheckCase{{value, off, wts}, [=] {
                           return red(ops::deform_gather(value, geoms, ref, off, wts, heads, points));
                         }};
  });
  b.emplace_back("soft_aggregate", [](Rng& r) {
    return unary(r, 6, 3, 0.05, 0.95, [](const Var& a) { return ops::soft_aggregate(a); });
  });

  // Attention kernels.
  b.emplace_back("cross_attention", [](Rng& r) {
    Var q = leaf(r, 3, 4), k = leaf(r, 5, 4), v = leaf(r, 5, 4);
    Var wq = leaf(r, 4, 3), wk = leaf(r, 4, 3), wv = leaf(r, 4, 4);
    auto red = reducer(r, 3, 4);
    return GradCheckCase{{q, k, v, wq, wk, wv},
                         [=] { return red(cross_attention(q, k, v, wq, wk, wv, 3)); }};
  });
  b.emplace_back("masked_cross_attention", [](Rng& r) {
    Var q = leaf(r, 3, 4), f = leaf(r, 7, 4);
    Var wq = leaf(r, 4, 4), wk = leaf(r, 4, 4), wv = leaf(r, 4, 4);
    const TokenMask mask = random_mask(r, 7);
    auto red = reducer(r, 3, 4);
    return GradCheckCase{{q, f, wq, wk, wv},
                         [=] { return red(masked_cross_attention(q, f, mask, wq, wk, wv, 4)); }};
  });
  b.emplace_back("deformable_attention", [](Rng& r) {
    const std::size_t c = 4;
    DeformableParams p = DeformableParams::init(r, c, 2, 2, 2);
    Var query = leaf(r, 6, c);
    Var value = leaf(r, 6, c);
    std::vector<Var> leaves = {query, value, p.w_offset, p.b_offset, p.w_weight,
                               p.b_weight, p.w_value, p.w_out};
    jitter({p.w_offset, p.b_offset, p.w_weight, p.b_weight}, r, 0.3);
    auto red = reducer(r, 6, c);
    return GradCheckCase{leaves, [=] {
                           const auto qt = TokenTensor::from_levels(query, two_levels());
                           const auto vt = TokenTensor::from_levels(value, two_levels());
                           return red(deformable_attention(qt, vt, p).data);
                         }};
  });
  b.emplace_back("conv_ffn", [](Rng& r) {
    ConvFfnParams p = ConvFfnParams::init(r, 3, 5);
    Var x = leaf(r, 6, 3);
    jitter({p.b_in, p.b_dw, p.b_out}, r, 0.2);
    auto red = reducer(r, 6, 3);
    return GradCheckCase{{x, p.w_in, p.b_in, p.w_dw, p.b_dw, p.w_out, p.b_out}, [=] {
                           return red(conv_ffn(TokenTensor::from_levels(x, two_levels()), p).data);
                         }};
  });
  b.emplace_back("conv_ffn_zero", [](Rng& r) {
    ConvFfnParams p;
    p.w_in = parameter(Tensor(3, 5));
    p.b_in = parameter(Tensor(1, 5));
    p.w_dw = parameter(Tensor(9, 5));
    p.b_dw = parameter(Tensor(1, 5));
    p.w_out = parameter(Tensor(5, 3));
    p.b_out = parameter(Tensor(1, 3));
    Var x = leaf(r, 6, 3);
    auto red = reducer(r, 6, 3);
    return GradCheckCase{{x}, [=] {
                           return red(conv_ffn(TokenTensor::from_levels(x, two_levels()), p).data);
                         }};
  });

  // Backbone.
  b.emplace_back("semantic_embed", [](Rng& r) {
    const ModelConfig cfg = tiny_model_config();
    BlockParams bp = BlockParams::init(r, cfg);
    const auto c = static_cast<std::size_t>(cfg.channels);
    const auto cv = static_cast<std::size_t>(cfg.vit_width);
    Var prev = leaf(r, 6, c), cls = leaf(r, 1, cv), g = leaf(r, 1, cv);
    const SemanticEmbedParams p = bp.sem;
    auto red = reducer(r, 6, c);
    return GradCheckCase{{prev, cls, g, p.w_cls, p.wq, p.wk, p.wv}, [=] {
                           const auto t = TokenTensor::from_levels(prev, two_levels());
                           return red(semantic_embed(t, cls, g, p).data);
                         }};
  });
  b.emplace_back("spatial_modeling", [](Rng& r) {
    const ModelConfig cfg = tiny_model_config();
    BlockParams bp = BlockParams::init(r, cfg);
    const auto c = static_cast<std::size_t>(cfg.channels);
    const auto cv = static_cast<std::size_t>(cfg.vit_width);
    const std::vector<Level> levels = pyramid_levels(32, 32);
    std::size_t total = 0;
    for (const auto& l : levels) total += l.area();
    Var sem = leaf(r, total, c);
    const Tensor vit = random_uniform(4, cv, r);
    SpatialParams p = bp.spatial;
    jitter({p.deform.w_offset, p.deform.b_offset, p.deform.w_weight, p.deform.b_weight}, r, 0.2);
    auto red = reducer(r, total, c);
    return GradCheckCase{{sem, p.w_vit, p.deform.w_offset, p.deform.b_offset, p.deform.w_weight,
                          p.deform.b_weight, p.deform.w_value, p.deform.w_out},
                         [=] {
                           const auto t = TokenTensor::from_levels(sem, levels);
                           return red(spatial_modeling(t, vit, 2, 2, p).data);
                         }};
  });
  b.emplace_back("backbone_forward", [](Rng& r) {
    const ModelConfig cfg = tiny_model_config();
    auto bp = std::make_shared<BackboneParams>(BackboneParams::init(r, cfg));
    ParamList pl;
    bp->collect(pl);
    const auto leaves = trainable_leaves(pl);
    jitter(leaves, r, 0.05);
    const Image img = random_image(r, 32, 32);
    std::vector<Tensor> weights;
    for (const auto& l : pyramid_levels(32, 32))
      weights.push_back(random_uniform(l.area(), static_cast<std::size_t>(cfg.channels), r, 0.5, 1.5));
    return GradCheckCase{leaves, [=] {
                           const FeaturePyramid pyr = backbone_forward(img, *bp);
                           std::vector<Var> parts;
                           for (std::size_t i = 0; i < pyr.maps.size(); ++i)
                             parts.push_back(ops::weighted_sum(pyr.maps[i], weights[i]));
                           return ops::sum(ops::concat_rows(parts));
                         }};
  });

  // Query transformer.
  b.emplace_back("discriminative_select", [](Rng& r) {
    Var feat = leaf(r, 9, 4), q = leaf(r, 3, 4);
    const TokenMask mask = random_mask(r, 9);
    auto red = reducer(r, 3, 4);
    return GradCheckCase{{feat, q}, [=] { return red(discriminative_select(feat, q, mask)); }};
  });
  b.emplace_back("propagate_query", [](Rng& r) {
    Var qin = leaf(r, 3, 4), q = leaf(r, 3, 4), qs = leaf(r, 3, 4);
    PropagationParams p{leaf(r, 1, 4), leaf(r, 4, 4)};
    auto red = reducer(r, 3, 4);
    return GradCheckCase{{qin, q, qs, p.alpha, p.w_out},
                         [=] { return red(propagate_query(qin, q, qs, p)); }};
  });
  b.emplace_back("query_block", [](Rng& r) {
    QueryBlockParams p = QueryBlockParams::init(r, 4);
    ParamList pl;
    p.collect("q.", pl);
    auto leaves = trainable_leaves(pl);
    jitter(leaves, r, 0.1);
    Var feat = leaf(r, 8, 4), qin = leaf(r, 3, 4);
    leaves.push_back(feat);
    leaves.push_back(qin);
    const TokenMask mask = random_mask(r, 8);
    auto red = reducer(r, 3, 4);
    return GradCheckCase{leaves, [=] { return red(query_block(feat, qin, mask, p, true)); }};
  });
  b.emplace_back("query_readout", [](Rng& r) {
    ReadoutParams p = ReadoutParams::init(r, 4);
    Var feat = leaf(r, 10, 4), q = leaf(r, 3, 4);
    auto red = reducer(r, 10, 1);
    return GradCheckCase{{feat, q, p.w_feat, p.b_feat, p.w_query, p.b_query},
                         [=] { return red(query_readout(feat, q, p)); }};
  });

  // Memory.
  b.emplace_back("topk_attention", [](Rng& r) {
    Var qk = leaf(r, 4, 3), keys = leaf(r, 9, 3), vals = leaf(r, 9, 5);
    auto red = reducer(r, 4, 5);
    return GradCheckCase{{qk, keys, vals}, [=] { return red(topk_attention(qk, keys, vals, 4)); }};
  });
  b.emplace_back("memory_read", [](Rng& r) {
    Var qk = leaf(r, 4, 3), k0 = leaf(r, 4, 3), k1 = leaf(r, 4, 3);
    Var v0 = leaf(r, 4, 5), v1 = leaf(r, 4, 5);
    auto red = reducer(r, 4, 5);
    return GradCheckCase{{qk, k0, k1, v0, v1}, [=] {
                           PixelMemory mem(4, true);
                           mem.write(0, k0, {{1, v0}});
                           mem.write(5, k1, {{1, v1}});
                           return red(memory_read(qk, mem, 1, 5));
                         }};
  });
  b.emplace_back("encode_value", [](Rng& r) {
    const ModelConfig cfg = tiny_model_config();
    MemoryParams p = MemoryParams::init(r, cfg);
    ParamList pl;
    p.collect(pl);
    auto leaves = trainable_leaves(pl);
    jitter(leaves, r, 0.05);
    const Image img = random_image(r, 32, 32);
    Var own = leaf(r, 32 * 32, 1, 0.0, 1.0), others = leaf(r, 32 * 32, 1, 0.0, 1.0);
    Var lvl = leaf(r, 4, static_cast<std::size_t>(cfg.channels));
    leaves.insert(leaves.end(), {own, others, lvl});
    auto red = reducer(r, 4, static_cast<std::size_t>(cfg.value_dim));
    return GradCheckCase{leaves, [=] { return red(encode_value(img, own, others, lvl, p)); }};
  });
  b.emplace_back("object_memory_update", [](Rng& r) {
    Var a = leaf(r, 3, 4), b2 = leaf(r, 3, 4), c = leaf(r, 3, 4);
    auto red = reducer(r, 3, 4);
    return GradCheckCase{{a, b2, c}, [=] {
                           ObjectMemoryEntry e;
                           e = object_memory_update(e, a);
                           e = object_memory_update(e, b2);
                           e = object_memory_update(e, c);
                           return red(e.mean);
                         }};
  });

  // Pipeline.
  b.emplace_back("decode", [](Rng& r) {
    const ModelConfig cfg = tiny_model_config();
    auto m = std::make_shared<Model>(Model::init(cfg, r()));
    ParamList pl;
    m->decoder.collect(pl);
    auto leaves = trainable_leaves(pl);
    const auto c = static_cast<std::size_t>(cfg.channels);
    FeaturePyramid pyr;
    pyr.levels = pyramid_levels(32, 32);
    for (const auto& l : pyr.levels) {
      pyr.maps.push_back(leaf(r, l.area(), c));
      leaves.push_back(pyr.maps.back());
    }
    Var readout = leaf(r, 4, static_cast<std::size_t>(cfg.value_dim));
    Var q = leaf(r, static_cast<std::size_t>(cfg.num_queries), c);
    leaves.push_back(readout);
    leaves.push_back(q);
    jitter(leaves, r, 0.05);
    auto red = reducer(r, 32 * 32, 1);
    return GradCheckCase{leaves, [=] {
                           const Var fused = fuse_readout(pyr.at_stride(16), readout, m->decoder);
                           return red(decode(pyr, fused, q, *m));
                         }};
  });
  b.emplace_back("train_loss", [](Rng& r) {
    Var logits1 = leaf(r, 20, 2, -2, 2), logits2 = leaf(r, 20, 2, -2, 2);
    std::vector<std::vector<std::uint8_t>> labels(2, std::vector<std::uint8_t>(20));
    for (auto& l : labels)
      for (auto& v : l) v = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 2)(r));
    return GradCheckCase{{logits1, logits2}, [=] {
                           Rng rr(3);
                           const std::vector<Var> fields = {
                               logits_to_field({ops::slice_cols(logits1, 0, 1), ops::slice_cols(logits1, 1, 1)}),
                               logits_to_field({ops::slice_cols(logits2, 0, 1), ops::slice_cols(logits2, 1, 1)})};
                           return train_loss(fields, labels, 0.5, rr);
                         }};
  });
  return b;
}

}  // namespace

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.vit_depth = 4;
  c.vit_width = 16;
  c.vit_heads = 2;
  c.patch = 16;
  c.channels = 8;
  c.num_blocks = 2;
  c.deform_heads = 2;
  c.deform_points = 2;
  c.ffn_hidden = 8;
  c.num_queries = 3;
  c.query_depth = 2;
  c.key_dim = 4;
  c.value_dim = 8;
  c.top_k = 6;
  c.memory_capacity = 4;
  c.update_interval = 5;
  return c;
}

std::vector<GradCheckEntry> gradcheck_registry(bool include_faulty) {
  std::vector<GradCheckEntry> out;
  for (auto& [name, build] : op_builders()) out.push_back({name, 1.0, build});
  out.push_back({"composed_two_frame", 10.0, composed_two_frame});
  if (include_faulty) {
    out.push_back({"faulty_square", 1.0, [](Rng& r) {
                     return unary(r, 3, 3, 0.5, 1.5, [](const Var& a) { return faulty_square(a); });
                   }});
  }
  return out;
}

GradCheckReport run_grad_check(const std::string& name, const GradCheckCase& c, double tol,
                               std::size_t max_coords, Rng& rng) {
  std::vector<Var> leaves = c.leaves;
  for (Var& v : leaves) v.zero_grad();
  {
    const Var loss = c.loss();
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw std::invalid_argument("grad_check '" + name + "': loss is not a scalar");
    }
    backward(loss);
  }
  std::vector<Tensor> analytic;
  for (const Var& v : leaves) {
    analytic.push_back(v.grad().empty() ? Tensor(v.rows(), v.cols()) : v.grad());
  }
  for (Var& v : leaves) v.zero_grad();

  GradCheckReport rep;
  rep.op_name = name;
  rep.tolerance = tol;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& value = leaves[li].mutable_value();
    const Tensor& a = analytic[li];
    std::vector<std::size_t> coords;
    if (value.size() <= max_coords) {
      for (std::size_t i = 0; i < value.size(); ++i) coords.push_back(i);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < a.size(); ++i)
        if (std::abs(a[i]) > std::abs(a[best])) best = i;
      coords.push_back(best);
      std::uniform_int_distribution<std::size_t> pick_initial(0, value.size() - 1);
      while (coords.size() < max_coords) coords.push_back(pick_initial(rng));
    }
    auto central = [&](std::size_t i, double h) {
      const double orig = value[i];
      value[i] = orig + h;
      const double fp = c.loss().value()[0];
      value[i] = orig - h;
      const double fm = c.loss().value()[0];
      value[i] = orig;
      return (fp - fm) / (2.0 * h);
    };
    std::uniform_int_distribution<std::size_t> pick(0, value.size() - 1);
    std::size_t replacements = 0;
    for (std::size_t k = 0; k < coords.size(); ++k) {
      const std::size_t i = coords[k];
      const double fd = central(i, kStep);
      const double denom = std::max({std::abs(a[i]), std::abs(fd), 1e-8});
      const double rel = std::abs(a[i] - fd) / denom;
      if (rel > tol) {
        // A step that straddles a kink of a piecewise-linear op (bilinear
        // taps, top-k membership) makes the difference quotient itself
        // unreliable; it then moves with the step size, while a wrong
        // analytic gradient does not.
        const double fd_fine = central(i, kStep / 10.0);
        if (std::abs(fd - fd_fine) / denom > 0.5 * tol) {
          ++rep.unstable_skipped;
          if (value.size() > max_coords && replacements < max_coords) {
            ++replacements;
            coords.push_back(pick(rng));
          }
          continue;
        }
      }
      if (!(rel <= rep.max_rel_error)) rep.max_rel_error = std::isnan(rel) ? INFINITY : rel;
      ++rep.coordinates;
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

GradCheckReport grad_check(const std::string& op_name, double tol, std::uint64_t seed,
                           bool include_faulty) {
  for (const auto& e : gradcheck_registry(include_faulty)) {
    if (e.name != op_name) continue;
    Rng rng(seed);
    const GradCheckCase c = e.build(rng);
    return run_grad_check(e.name, c, tol * e.tol_scale, kMaxCoords, rng);
  }
  throw std::invalid_argument("grad_check: no registered op named '" + op_name + "'");
}

std::vector<GradCheckReport> grad_check_all(double tol, std::uint64_t seed, bool include_faulty,
                                            const std::string& only) {
  std::vector<GradCheckReport> out;
  bool found = only.empty();
  for (const auto& e : gradcheck_registry(include_faulty)) {
    if (!only.empty() && e.name != only) continue;
    found = true;
    Rng rng(seed);
    const GradCheckCase c = e.build(rng);
    out.push_back(run_grad_check(e.name, c, tol * e.tol_scale, kMaxCoords, rng));
  }
  if (!found) throw std::invalid_argument("grad_check: no registered op named '" + only + "'");
  return out;
}

}  // namespace s3vos
