#pragma once

// Region (J) and boundary (F) accuracy, and the directory-level evaluation
// report in the DAVIS convention.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace s3vos {

/// Intersection over union of two 0/1 masks; both empty scores 1.
double jaccard(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

/// One-pixel boundary: foreground pixels with a 4-neighbour outside the
/// mask (pixels beyond the image count as background).
std::vector<std::uint8_t> mask_boundary(const std::vector<std::uint8_t>& mask, int height,
                                        int width);

/// Tolerance radius ceil(tol_factor * diagonal).
int boundary_radius(int height, int width, double tol_factor = 0.008);

/// Boundary F-measure with a disk tolerance band. Both boundaries empty
/// score 1, exactly one empty scores 0.
double boundary_f(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                  int height, int width, double tol_factor = 0.008);

struct ObjectScore {
  double j = 0.0;
  double f = 0.0;
  double jf = 0.0;
  int frames = 0;
};

struct SequenceScore {
  std::string name;
  std::map<int, ObjectScore> objects;
  double j = 0.0;
  double f = 0.0;
  double jf = 0.0;
};

struct Splits {
  std::vector<std::string> seen;
  std::vector<std::string> unseen;
};

struct EvalReport {
  std::vector<SequenceScore> sequences;  // sorted by name
  double j_mean = 0.0;
  double f_mean = 0.0;
  double jf_mean = 0.0;
  std::optional<double> g;
  double j_seen = 0.0, f_seen = 0.0, j_unseen = 0.0, f_unseen = 0.0;
  std::vector<std::string> missing;  // prediction files absent, scored 0

  nlohmann::json to_json() const;
};

/// Scores a single sequence given ground-truth and predicted label maps
/// (nullptr prediction = missing frame). Frame 0 is excluded.
SequenceScore score_sequence(const std::string& name, const std::vector<std::vector<std::uint8_t>>& gt,
                             const std::vector<const std::vector<std::uint8_t>*>& pred,
                             int height, int width);

/// `gt_dir` and `pred_dir` hold one subdirectory of palette PNGs per
/// sequence (`gt_dir` may also be a dataset root with Annotations/).
EvalReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                    const std::optional<Splits>& splits = std::nullopt, int jobs = 1);

/// Reads {"seen": [...], "unseen": [...]}.
Splits load_splits(const std::filesystem::path& path);

}  // namespace s3vos
