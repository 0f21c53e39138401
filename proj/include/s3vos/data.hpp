#pragma once

// Label masks, indexed-palette PNG I/O, dataset directories and the
// synthetic moving-shapes sequence generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "s3vos/backbone.hpp"
#include "s3vos/config.hpp"

namespace s3vos {

using Color = std::array<std::uint8_t, 3>;

/// Integer label map, 0 = background, 1..K object ids, with the display
/// palette it was read from (or the default one).
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;
  std::vector<Color> palette;

  LabelMask() = default;
  LabelMask(int h, int w);

  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  /// Nonzero ids present.
  std::set<int> ids() const;
  /// 0/1 slice for one id.
  std::vector<std::uint8_t> binary(int id) const;

  bool operator==(const LabelMask& o) const {
    return height == o.height && width == o.width && labels == o.labels;
  }
};

/// 256-entry bit-interleaved palette used by DAVIS-style annotations;
/// entry 0 is black.
std::vector<Color> default_palette();

/// Writes an 8-bit indexed PNG whose pixel values are the label ids.
void write_mask(const std::filesystem::path& path, const LabelMask& mask);

/// Reads an indexed (or 8-bit grayscale) PNG; pixel value = object id.
/// Truecolor input is rejected with a message explaining the convention.
LabelMask read_mask(const std::filesystem::path& path);

void write_rgb(const std::filesystem::path& path, const Image& image);
Image read_rgb(const std::filesystem::path& path);

struct Sequence {
  std::string name;
  std::vector<Image> frames;
  std::vector<LabelMask> masks;
  /// Scenario family used to generate it ("" for loaded data).
  std::string scenario;
};

struct Dataset {
  std::vector<Sequence> sequences;
};

/// `<root>/JPEGImages/<seq>/%05d.png` and `<root>/Annotations/<seq>/%05d.png`.
std::filesystem::path frame_path(const std::filesystem::path& root, const std::string& seq, int t);
std::filesystem::path annotation_path(const std::filesystem::path& root, const std::string& seq,
                                      int t);
std::string frame_name(int t);

void save_dataset(const std::filesystem::path& root, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& root);

/// In-memory generation; deterministic for a given spec.
Dataset generate_sequences(const SyntheticSpec& spec);

/// generate_sequences + save_dataset. Throws if `root` cannot be written.
void generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root);

/// Area-weighted centroid x of `id`, or -1 when absent.
double centroid_x(const LabelMask& mask, int id);

}  // namespace s3vos
