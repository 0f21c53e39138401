#include <gtest/gtest.h>

#include "oracles.hpp"
#include "s3vos/backbone.hpp"
#include "s3vos/gradcheck.hpp"

namespace s3vos {
namespace {

Image random_image(int h, int w, Rng& rng) {
  return {random_uniform(static_cast<std::size_t>(h) * w, 3, rng, 0.0, 1.0), h, w};
}

double total_abs(const Tensor& t) {
  double s = 0.0;
  for (double v : t.flat()) s += std::abs(v);
  return s;
}

TEST(Backbone, PyramidHasFourLevelsAtStrides4To32) {
  Rng rng(1);
  const ModelConfig cfg = tiny_model_config();
  const BackboneParams p = BackboneParams::init(rng, cfg);
  const FeaturePyramid pyr = backbone_forward(random_image(64, 96, rng), p);
  ASSERT_EQ(pyr.levels.size(), 4u);
  const int strides[] = {4, 8, 16, 32};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pyr.levels[i].stride, strides[i]);
    EXPECT_EQ(pyr.levels[i].height, 64 / strides[i]);
    EXPECT_EQ(pyr.levels[i].width, 96 / strides[i]);
    EXPECT_EQ(pyr.maps[i].rows(), pyr.levels[i].area());
    EXPECT_EQ(pyr.maps[i].cols(), static_cast<std::size_t>(cfg.channels));
  }
}

TEST(Backbone, WithoutBlocksItIsTheConvStem) {
  Rng rng(2);
  ModelConfig cfg = tiny_model_config();
  cfg.num_blocks = 0;
  const BackboneParams p = BackboneParams::init(rng, cfg);
  const Image img = random_image(32, 32, rng);
  const FeaturePyramid a = backbone_forward(img, p);
  const FeaturePyramid b = stem_forward(img, p.stem);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.maps[i].value(), b.maps[i].value());
}

TEST(Backbone, RejectsFramesNotPaddedTo32) {
  Rng rng(3);
  const BackboneParams p = BackboneParams::init(rng, tiny_model_config());
  EXPECT_THROW(backbone_forward(random_image(40, 32, rng), p), std::invalid_argument);
}

TEST(Backbone, VitIsFrozenAndReceivesNoGradient) {
  Rng rng(4);
  const BackboneParams p = BackboneParams::init(rng, tiny_model_config());
  ParamList pl;
  p.collect(pl);
  const FeaturePyramid pyr = backbone_forward(random_image(32, 32, rng), p);
  Var loss = ops::sum(ops::mul(pyr.maps[0], pyr.maps[0]));
  for (std::size_t i = 1; i < 4; ++i) loss = ops::add(loss, ops::sum(pyr.maps[i]));
  backward(loss);
  bool saw_vit = false, saw_grad = false;
  for (const auto& item : pl.items()) {
    if (item.name.rfind("vit.", 0) == 0) {
      saw_vit = true;
      EXPECT_FALSE(item.trainable) << item.name;
      EXPECT_FALSE(item.var.requires_grad()) << item.name;
      EXPECT_TRUE(item.var.grad().empty() || total_abs(item.var.grad()) == 0.0) << item.name;
    } else if (!item.var.grad().empty() && total_abs(item.var.grad()) > 0.0) {
      saw_grad = true;
    }
  }
  EXPECT_TRUE(saw_vit);
  EXPECT_TRUE(saw_grad);
}

TEST(Backbone, VitTapsEndAtTheLastLayer) {
  Rng rng(5);
  const ModelConfig cfg = tiny_model_config();
  const VitParams vp = VitParams::init(cfg);
  const auto taps = cfg.tapped_layers();
  ASSERT_EQ(static_cast<int>(taps.size()), cfg.num_blocks);
  EXPECT_EQ(taps.back(), cfg.vit_depth);
  const VitState st = vit_forward(random_image(64, 32, rng), vp, taps);
  EXPECT_EQ(st.grid_height * cfg.patch, 64);
  EXPECT_EQ(st.grid_width * cfg.patch, 32);
  ASSERT_EQ(st.patch_tokens.size(), taps.size());
  EXPECT_EQ(st.patch_tokens[0].rows(), static_cast<std::size_t>(st.grid_height * st.grid_width));
  EXPECT_EQ(st.cls_tokens[0].rows(), 1u);
}

TEST(Backbone, VitWeightsComeFromTheSeedOnly) {
  const ModelConfig cfg = tiny_model_config();
  EXPECT_EQ(VitParams::init(cfg).w_patch.value(), VitParams::init(cfg).w_patch.value());
  ModelConfig other = cfg;
  other.vit_seed += 1;
  EXPECT_NE(VitParams::init(cfg).w_patch.value(), VitParams::init(other).w_patch.value());
}

TEST(SemanticEmbed, IsResidualCrossAttentionOverClsAndGlobal) {
  Rng rng(6);
  const std::vector<Level> levels = {{4, 2, 3}, {8, 1, 2}};
  const Tensor prev = random_normal(8, 4, rng);
  const Tensor cls = random_normal(1, 6, rng), patches = random_normal(5, 6, rng);
  SemanticEmbedParams p;
  p.w_cls = constant(random_normal(6, 4, rng));
  p.wq = constant(random_normal(4, 3, rng));
  p.wk = constant(random_normal(4, 3, rng));
  p.wv = constant(random_normal(4, 4, rng));
  p.d = 3;
  const Var g = global_token(constant(patches));
  Tensor gmean(1, 6);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 6; ++c) gmean(0, c) += patches(r, c) / 5.0;
  EXPECT_LT(max_abs_diff(g.value(), gmean), 1e-14);

  const TokenTensor out =
      semantic_embed(TokenTensor::from_levels(constant(prev), levels), constant(cls), g, p);
  Tensor kv_in(2, 6);
  for (std::size_t c = 0; c < 6; ++c) {
    kv_in(0, c) = cls(0, c);
    kv_in(1, c) = gmean(0, c);
  }
  const Tensor kv = oracle::matmul(kv_in, p.w_cls.value());
  Tensor want = oracle::attention(prev, kv, kv, p.wq.value(), p.wk.value(), p.wv.value(), 3);
  for (std::size_t i = 0; i < want.size(); ++i) want[i] += prev[i];
  EXPECT_LT(max_abs_diff(out.data.value(), want), 1e-12);
}

// An ablated branch must not influence the output at all.
TEST(Backbone, AblationFlagsRemoveTheirBranch) {
  Rng rng(7);
  ModelConfig cfg = tiny_model_config();
  const Image img = random_image(32, 32, rng);
  for (int which = 0; which < 2; ++which) {
    cfg.ablation = {};
    (which == 0 ? cfg.ablation.disable_semantic_embed : cfg.ablation.disable_spatial_modeling) =
        true;
    Rng r1(8);
    BackboneParams p = BackboneParams::init(r1, cfg);
    const Tensor before = backbone_forward(img, p).maps[0].value();
    for (auto& b : p.blocks) {
      Var& w = which == 0 ? b.sem.wv : b.spatial.deform.w_out;
      for (auto& v : w.mutable_value().flat()) v += 1.0;
    }
    EXPECT_EQ(backbone_forward(img, p).maps[0].value(), before) << which;
    // The same perturbation matters when the branch is on.
    cfg.ablation = {};
    Rng r2(8);
    BackboneParams q = BackboneParams::init(r2, cfg);
    const Tensor on_before = backbone_forward(img, q).maps[0].value();
    for (auto& b : q.blocks) {
      Var& w = which == 0 ? b.sem.wv : b.spatial.deform.w_out;
      for (auto& v : w.mutable_value().flat()) v += 1.0;
    }
    EXPECT_NE(backbone_forward(img, q).maps[0].value(), on_before) << which;
  }
}

TEST(Backbone, IsDeterministicForASeed) {
  Rng a(9), b(9);
  const ModelConfig cfg = tiny_model_config();
  Rng ri(10);
  const Image img = random_image(32, 64, ri);
  EXPECT_EQ(backbone_forward(img, BackboneParams::init(a, cfg)).maps[2].value(),
            backbone_forward(img, BackboneParams::init(b, cfg)).maps[2].value());
}

}  // namespace
}  // namespace s3vos
