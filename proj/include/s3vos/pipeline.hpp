#pragma once

// End-to-end model: decoder, multi-object soft aggregation, the per-sequence
// inference loop with its memory schedule, the training clip sampler, loss,
// optimizer loop and checkpoint archive.

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "s3vos/backbone.hpp"
#include "s3vos/config.hpp"
#include "s3vos/data.hpp"
#include "s3vos/memory.hpp"
#include "s3vos/query.hpp"

namespace s3vos {

struct DecoderParams {
  Var w_read, b_read;  // (Cv, C): memory readout -> stride-16 fusion
  Var w8, b8;          // 3x3 refine at stride 8
  Var w4, b4;          // 3x3 refine at stride 4
  Var w_head, b_head;  // (C, 1) pixel logit

  static DecoderParams init(Rng& rng, const ModelConfig& cfg);
  void collect(ParamList& out) const;
};

struct Model {
  ModelConfig cfg;
  BackboneParams backbone;
  QueryParams query;
  MemoryParams memory;
  DecoderParams decoder;

  /// Trainable weights from `seed`; the frozen trunk from cfg.vit_seed.
  static Model init(const ModelConfig& cfg, std::uint64_t seed);
  ParamList params() const;
};

struct CropRecord {
  int height = 0;
  int width = 0;
};

struct PaddedInput {
  Image frame;
  std::vector<LabelMask> masks;
  CropRecord crop;
};

int round_up_32(int v);

/// Zero-pads right and bottom to the next multiples of 32.
PaddedInput pad_to_32(const Image& frame, const std::vector<LabelMask>& masks = {});
Image crop_image(const Image& padded, const CropRecord& crop);
LabelMask crop_mask(const LabelMask& padded, const CropRecord& crop);
LabelMask pad_mask(const LabelMask& mask, int height, int width);

/// Max-pool of a 0/1 (H*W) map by `stride` (sides divisible by stride).
TokenMask downsample_mask(const std::vector<std::uint8_t>& mask, int height, int width,
                          int stride);

/// Stride-16 features with the memory readout fused in.
Var fuse_readout(const Var& level16, const Var& readout, const DecoderParams& p);

/// Top-down refinement of the fused stride-16 map through strides 8 and 4,
/// plus the query readout at stride 4, upsampled to the padded frame size.
/// Returns (H*W, 1) logits.
Var decode(const FeaturePyramid& pyr, const Var& fused16, const Var& queries, const Model& m);

/// Per-object mask logits and refined queries for one frame.
struct ObjectPrediction {
  Var logits;   // (H*W, 1)
  Var queries;  // (N, C)
};

ObjectPrediction predict_object(const Model& m, const FeaturePyramid& pyr, const Var& readout,
                                const Var& q_in, const TokenMask& mask16);

/// (L,K) logits -> (L,K+1) label distribution via sigmoid + soft aggregation.
Var logits_to_field(const std::vector<Var>& object_logits);

/// Hard labels from a (L,K+1) field: argmax column mapped through `ids`
/// (column 0 is background, column k is ids[k-1]).
std::vector<std::uint8_t> field_argmax(const Tensor& field, const std::vector<int>& ids);

/// Stateful inference over one sequence. Frame 0 is the annotated anchor.
class SequenceSession {
 public:
  explicit SequenceSession(const Model& model);

  /// Seeds memory with the annotated frame; returns `init` unchanged.
  LabelMask initialize(const Image& frame, const LabelMask& init);
  LabelMask infer_frame(const Image& frame);

  bool initialized() const { return initialized_; }
  int frames_seen() const { return frame_index_; }
  const std::vector<int>& object_ids() const { return ids_; }
  const std::vector<int>& write_log() const { return write_log_; }
  const PixelMemory& pixel_memory() const { return memory_; }
  const ObjectMemory& object_memory() const { return objects_; }

 private:
  void write_memory(int frame_index, const Image& padded, const FeaturePyramid& pyr,
                    const Var& key, const std::vector<std::uint8_t>& labels,
                    const std::map<int, Var>& queries);

  const Model& model_;
  bool initialized_ = false;
  int frame_index_ = 0;
  CropRecord crop_;
  std::vector<int> ids_;
  PixelMemory memory_;
  ObjectMemory objects_;
  std::map<int, TokenMask> prev_mask16_;
  std::vector<int> write_log_;
};

/// Runs a whole sequence; output[0] equals masks[0].
std::vector<LabelMask> infer_sequence(const Model& model, const std::vector<Image>& frames,
                                      const LabelMask& init);

// ---------------------------------------------------------------- training

struct Clip {
  std::string sequence;
  std::vector<int> frame_indices;
  std::vector<Image> frames;
  /// Labels remapped to 0..K over the chosen objects.
  std::vector<std::vector<std::uint8_t>> labels;
  std::vector<int> object_ids;  // original ids, position k -> label k+1
  int height = 0;
  int width = 0;
};

/// Seed frame uniform over frames holding a target, up to max_objects
/// targets, remaining frames from one temporal direction with every
/// consecutive gap at most the active max-skip.
Clip sample_training_clip(const Dataset& ds, int iteration, const TrainConfig& cfg, Rng& rng);

/// Flip, color jitter and grayscale, applied identically to every frame.
void augment_clip(Clip& clip, Rng& rng);

/// Differentiable forward over a clip. Returns the (H*W, K+1) label field of
/// frames 1..T-1; frame 0 is supervised input.
std::vector<Var> forward_clip(const Model& m, const Clip& clip, int num_ref_frames, Rng& rng);

/// Cross-entropy on the label field plus soft Dice per object, averaged over
/// the given frames; with point_fraction < 1 both use a uniform pixel
/// subset per frame drawn from `rng`.
Var train_loss(const std::vector<Var>& fields,
               const std::vector<std::vector<std::uint8_t>>& labels, double point_fraction,
               Rng& rng);

struct LossRecord {
  int iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<LossRecord> log;
};

/// Raised by train() when the loss stops being finite.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// AdamW with decoupled decay, step lr decay and global-norm clipping.
/// Deterministic for a given model, data and config. Throws on a non-finite
/// loss (TrainingDiverged). `on_log` fires every cfg.log_every iterations.
TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const std::function<void(const LossRecord&)>& on_log = {});

/// Mean over a trailing window, used to compare loss levels.
double smoothed(const std::vector<LossRecord>& log, std::size_t begin, std::size_t count);

// -------------------------------------------------------------- checkpoint

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const RunConfig& run);
/// Rebuilds the model from the stored config and validates every parameter
/// shape against the manifest.
Model load_checkpoint(const std::filesystem::path& path, RunConfig* run = nullptr);

}  // namespace s3vos
