#pragma once

// Spatial-semantic feature generator: frozen ViT trunk, convolutional stem
// and a stack of spatial-semantic blocks (semantic embedding from the CLS and
// pooled global tokens, deformable spatial modeling, convolutional FFN).

#include <vector>

#include "s3vos/config.hpp"
#include "s3vos/kernels.hpp"
#include "s3vos/params.hpp"

namespace s3vos {

/// RGB frame in [0,1], channels-last (H*W, 3).
struct Image {
  Tensor rgb;
  int height = 0;
  int width = 0;
};

struct VitLayerParams {
  Var w_qkv;  // (Cvit, 3 Cvit)
  Var b_qkv;
  Var w_proj;
  Var b_proj;
  Var w_fc1;  // (Cvit, 4 Cvit)
  Var b_fc1;
  Var w_fc2;
  Var b_fc2;
};

/// Frozen trunk weights. Every tensor is a constant (non-trainable) node, so
/// the trunk receives no gradient by construction.
struct VitParams {
  int width = 0;
  int heads = 0;
  int patch = 0;
  Var w_patch;  // (patch*patch*3, Cvit)
  Var b_patch;
  Var cls;      // (1, Cvit)
  std::vector<VitLayerParams> layers;

  static VitParams init(const ModelConfig& cfg);
  void collect(ParamList& out) const;
};

struct VitState {
  std::vector<Tensor> patch_tokens;  // per tapped layer, (Hv*Wv, Cvit)
  std::vector<Tensor> cls_tokens;    // per tapped layer, (1, Cvit)
  std::vector<int> tapped;
  int grid_height = 0;
  int grid_width = 0;
  bool frozen = true;
};

/// Runs the trunk and records patch/CLS tokens after each layer in `taps`
/// (1-based). Frame sides must be multiples of 32.
VitState vit_forward(const Image& frame, const VitParams& p, const std::vector<int>& taps);

/// Fixed 2-D sinusoidal position code for a (gh x gw) patch grid.
Tensor patch_position_code(int grid_height, int grid_width, int width);

/// Mean over tokens, (1, C).
Var global_token(const Var& patch_tokens);

struct SemanticEmbedParams {
  Var w_cls;  // (Cvit, C): projects CLS and global tokens to fusion width
  Var wq;
  Var wk;
  Var wv;
  std::size_t d = 0;
};

struct SpatialParams {
  Var w_vit;  // (Cvit, C): ViT patch feature -> query augmentation
  DeformableParams deform;
};

struct BlockParams {
  SemanticEmbedParams sem;
  SpatialParams spatial;
  ConvFfnParams ffn;

  static BlockParams init(Rng& rng, const ModelConfig& cfg);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct StemParams {
  Var w1, b1;  // 3 -> C/2, stride 2
  Var w2, b2;  // C/2 -> C, stride 2 (stride-4 level)
  Var w3, b3;  // stride 8
  Var w4, b4;  // stride 16
  Var w5, b5;  // stride 32

  static StemParams init(Rng& rng, const ModelConfig& cfg);
  void collect(const std::string& prefix, ParamList& out) const;
};

struct BackboneParams {
  StemParams stem;
  std::vector<BlockParams> blocks;
  VitParams vit;
  AblationFlags ablation;

  static BackboneParams init(Rng& rng, const ModelConfig& cfg);
  void collect(ParamList& out) const;
};

/// Per-level maps at strides 4/8/16/32, each (h*w, C).
struct FeaturePyramid {
  std::vector<Level> levels;
  std::vector<Var> maps;

  TokenTensor to_tokens() const;
  static FeaturePyramid from_tokens(const TokenTensor& t);
  const Var& at_stride(int stride) const;
  const Level& level_at_stride(int stride) const;
};

/// Semantic embedding: the multi-scale tokens are
/// the query, the (CLS, global) pair is key and value. A residual adds prev.
TokenTensor semantic_embed(const TokenTensor& prev, const Var& cls, const Var& global,
                           const SemanticEmbedParams& p);

/// Deformable attention with the multi-scale tokens as queries, each
/// augmented by the projected ViT patch feature resized to its level, and
/// values sampled from `sem` across levels. Residual adds `sem`.
TokenTensor spatial_modeling(const TokenTensor& sem, const Tensor& vit_patches, int grid_height,
                             int grid_width, const SpatialParams& p);

/// One spatial-semantic block:
/// F_spsem = F_spa + conv_ffn(F_spa + prev), F_spa = spatial(semantic(prev)).
TokenTensor block_forward(const TokenTensor& prev, const VitState& vit, std::size_t tap_index,
                          const BlockParams& p, const AblationFlags& ablation);

/// Conv stem output (the pyramid before any block).
FeaturePyramid stem_forward(const Image& frame, const StemParams& p);

FeaturePyramid backbone_forward(const Image& frame, const BackboneParams& p);

}  // namespace s3vos
