#pragma once

// Hand-computed two-sequence evaluation fixture (8x8 frames, boundary
// tolerance radius ceil(0.008 * sqrt(128)) = 1).
//
// Sequence "a" (object 1, frames 0..2): the ground truth is the 2x2 square
// at rows/cols 2..3 in every frame. Frame 1 is predicted exactly (J = F = 1);
// the frame 2 prediction file is missing (J = F = 0). Object mean: 0.5 / 0.5.
//
// Sequence "b" (objects 1 and 2, frames 0..1): in frame 1 object 1 is row 0,
// cols 0..3 and object 2 is the single pixel (7,7). The prediction labels
// row 0 cols 0..1 as object 1, leaves object 2 out and paints a stray label
// 3 that is not in the ground truth.
//   object 1: J = 2/4. Every pixel of a one-row strip is boundary; both
//   predicted pixels lie on the truth (precision 1), truth pixels at cols
//   0..2 lie within 1 of a prediction, col 3 does not (recall 3/4), so
//   F = 2 * 1 * 0.75 / 1.75 = 6/7.
//   object 2: J = 0, F = 0 (prediction boundary empty, truth not).
//
// Means over the three objects: J = 1/3, F = (1/2 + 6/7) / 3 = 19/42,
// J&F = 11/28. Sequence b: J = 1/4, F = 3/7, J&F = 19/56.
// Splits seen = {a}, unseen = {b}: G = (1/2 + 1/2 + 1/4 + 3/7) / 4 = 47/112.

#include <filesystem>
#include <fstream>

#include "s3vos/data.hpp"

namespace fixture {

struct Expected {
  double j_mean = 1.0 / 3.0;
  double f_mean = 19.0 / 42.0;
  double jf_mean = 11.0 / 28.0;
  double seq_b_j = 0.25;
  double seq_b_f = 3.0 / 7.0;
  double seq_b_jf = 19.0 / 56.0;
  double g = 47.0 / 112.0;
};

inline s3vos::LabelMask blank() { return s3vos::LabelMask(8, 8); }

/// Writes <root>/gt/<seq>/*.png, <root>/pred/<seq>/*.png and
/// <root>/splits.json.
inline void write_eval_fixture(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  using s3vos::frame_name;
  using s3vos::write_mask;
  const fs::path gt = root / "gt", pred = root / "pred";
  for (const char* s : {"a", "b"}) {
    fs::create_directories(gt / s);
    fs::create_directories(pred / s);
  }
  s3vos::LabelMask square = blank();
  for (int y = 2; y <= 3; ++y)
    for (int x = 2; x <= 3; ++x) square.at(y, x) = 1;
  for (int t = 0; t < 3; ++t) write_mask(gt / "a" / frame_name(t), square);
  write_mask(pred / "a" / frame_name(0), square);
  write_mask(pred / "a" / frame_name(1), square);

  s3vos::LabelMask b_gt = blank();
  for (int x = 0; x < 4; ++x) b_gt.at(0, x) = 1;
  b_gt.at(7, 7) = 2;
  write_mask(gt / "b" / frame_name(0), b_gt);
  write_mask(gt / "b" / frame_name(1), b_gt);
  s3vos::LabelMask b_pred = blank();
  b_pred.at(0, 0) = b_pred.at(0, 1) = 1;
  b_pred.at(5, 1) = 3;
  write_mask(pred / "b" / frame_name(0), b_gt);
  write_mask(pred / "b" / frame_name(1), b_pred);

  std::ofstream(root / "splits.json") << R"({"seen": ["a"], "unseen": ["b"]})";
}

}  // namespace fixture
