#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace s3vos {

struct AblationFlags {
  bool disable_semantic_embed = false;
  bool disable_spatial_modeling = false;
  bool disable_discriminative_query = false;
};

struct ModelConfig {
  // Frozen ViT trunk.
  int vit_depth = 12;
  int vit_width = 64;
  int vit_heads = 4;
  int patch = 16;
  std::uint64_t vit_seed = 1234;

  // Spatial-semantic feature generator.
  int channels = 64;
  int num_blocks = 4;
  int deform_heads = 4;
  int deform_points = 4;
  int ffn_hidden = 128;

  // Query transformer.
  int num_queries = 8;
  int query_depth = 5;

  // Memory.
  int key_dim = 32;
  int value_dim = 64;
  int top_k = 30;
  int memory_capacity = 8;
  int update_interval = 5;

  AblationFlags ablation;

  /// ViT layers (1-based) feeding the spatial-semantic blocks: evenly spaced,
  /// the last one is the final layer.
  std::vector<int> tapped_layers() const;
  void validate() const;
};

struct TrainConfig {
  double lr = 5e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int iterations = 200;
  int batch_size = 1;
  int num_frames = 8;
  int num_ref_frames = 3;
  int max_objects = 3;
  std::vector<int> max_skip = {5, 10, 15, 5};
  std::vector<double> max_skip_milestones = {0.1, 0.3, 0.8, 1.0};
  /// Step decay: lr is multiplied by lr_gamma at each fraction in lr_steps.
  std::vector<double> lr_steps = {0.8};
  double lr_gamma = 0.1;
  double point_fraction = 0.25;
  double grad_clip = 1.0;
  bool augment = true;
  int crop = 0;  ///< square crop side in pixels; 0 keeps the full frame
  int log_every = 10;
  std::uint64_t seed = 42;

  void validate() const;
  /// Max temporal gap allowed at `iteration` of `iterations`.
  int max_skip_at(int iteration) const;
  double lr_at(int iteration) const;
};

struct SyntheticSpec {
  int num_sequences = 4;
  int frames_per_seq = 24;
  int height = 64;
  int width = 64;
  int num_objects = 2;
  std::vector<std::string> shapes = {"disk", "rectangle", "triangle"};
  double min_speed = 0.5;
  double max_speed = 2.5;
  bool allow_overlap = true;
  /// "random", "crossing", "occlusion", "part-split" or "mixed".
  std::string scenario = "random";
  std::uint64_t seed = 7;

  void validate() const;
};

/// Every setting a CLI invocation can touch, with the flat dotted-key view
/// used by config files (`model.num_queries=8`).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec data;

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
  /// Parses `key=value` lines; `[section]` headers prefix following keys;
  /// `#` starts a comment.
  void load_text(const std::string& text);
  void load_file(const std::string& path);
  std::string to_text() const;
};

}  // namespace s3vos
