#include <gtest/gtest.h>

#include <filesystem>
#include <functional>

#include "s3vos/data.hpp"

namespace s3vos {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("s3vos_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int components(const LabelMask& m, int id) {
  std::vector<int> seen(m.labels.size(), 0);
  int count = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x) != id || seen[static_cast<std::size_t>(y * m.width + x)]) continue;
      ++count;
      std::vector<std::pair<int, int>> stack = {{y, x}};
      seen[static_cast<std::size_t>(y * m.width + x)] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || nx < 0 || ny >= m.height || nx >= m.width) continue;
          const auto i = static_cast<std::size_t>(ny * m.width + nx);
          if (seen[i] || m.at(ny, nx) != id) continue;
          seen[i] = 1;
          stack.emplace_back(ny, nx);
        }
      }
    }
  return count;
}

int area(const LabelMask& m, int id) {
  int a = 0;
  for (auto v : m.labels) a += v == id ? 1 : 0;
  return a;
}

TEST(LabelMask, IdsAndBinarySlices) {
  LabelMask m(2, 3);
  m.at(0, 1) = 2;
  m.at(1, 2) = 5;
  EXPECT_EQ(m.ids(), (std::set<int>{2, 5}));
  EXPECT_EQ(m.binary(5), (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1}));
}

TEST(Palette, FollowsTheBitInterleavedConvention) {
  const auto p = default_palette();
  ASSERT_EQ(p.size(), 256u);
  EXPECT_EQ(p[0], (Color{0, 0, 0}));
  EXPECT_EQ(p[1], (Color{128, 0, 0}));
  EXPECT_EQ(p[2], (Color{0, 128, 0}));
  EXPECT_EQ(p[3], (Color{128, 128, 0}));
  EXPECT_EQ(p[4], (Color{0, 0, 128}));
  EXPECT_EQ(p[8], (Color{64, 0, 0}));
}

TEST(PngIo, IndexedMaskRoundTripKeepsIdsAndPalette) {
  const fs::path dir = temp_dir("png_mask");
  LabelMask m(5, 7);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) m.at(y, x) = static_cast<std::uint8_t>((y * 7 + x) % 6);
  m.at(4, 6) = 255;
  write_mask(dir / "m.png", m);
  const LabelMask r = read_mask(dir / "m.png");
  EXPECT_EQ(r, m);
  ASSERT_GE(r.palette.size(), 6u);
  EXPECT_EQ(r.palette[1], default_palette()[1]);
}

TEST(PngIo, TruecolorAnnotationIsRejected) {
  const fs::path dir = temp_dir("png_truecolor");
  Rng rng(1);
  write_rgb(dir / "rgb.png", {random_uniform(12, 3, rng, 0.0, 1.0), 3, 4});
  try {
    read_mask(dir / "rgb.png");
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("truecolor"), std::string::npos);
  }
  EXPECT_THROW(read_mask(dir / "missing.png"), std::runtime_error);
}

TEST(PngIo, RgbRoundTripIsWithinQuantization) {
  const fs::path dir = temp_dir("png_rgb");
  Rng rng(2);
  const Image img{random_uniform(30, 3, rng, 0.0, 1.0), 5, 6};
  write_rgb(dir / "i.png", img);
  const Image r = read_rgb(dir / "i.png");
  ASSERT_EQ(r.height, 5);
  ASSERT_EQ(r.width, 6);
  EXPECT_LE(max_abs_diff(r.rgb, img.rgb), 0.5 / 255.0 + 1e-12);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const fs::path dir = temp_dir("dataset");
  SyntheticSpec spec;
  spec.num_sequences = 3;
  spec.frames_per_seq = 4;
  spec.height = spec.width = 32;
  spec.scenario = "mixed";
  const Dataset ds = generate_sequences(spec);
  save_dataset(dir, ds);
  EXPECT_TRUE(fs::exists(frame_path(dir, ds.sequences[0].name, 3)));
  EXPECT_TRUE(fs::exists(annotation_path(dir, ds.sequences[0].name, 3)));
  EXPECT_EQ(frame_path(dir, "s", 12).filename(), "00012.png");
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.sequences.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.sequences[i].name, ds.sequences[i].name);
    ASSERT_EQ(back.sequences[i].frames.size(), 4u);
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_EQ(back.sequences[i].masks[t], ds.sequences[i].masks[t]);
      EXPECT_LE(max_abs_diff(back.sequences[i].frames[t].rgb, ds.sequences[i].frames[t].rgb),
                0.5 / 255.0 + 1e-12);
    }
  }
  EXPECT_THROW(load_dataset(dir / "JPEGImages"), std::runtime_error);
}

TEST(Generator, IsDeterministicForASeedAndVariesAcrossSeeds) {
  SyntheticSpec spec;
  spec.num_sequences = 2;
  spec.frames_per_seq = 5;
  spec.height = spec.width = 32;
  const Dataset a = generate_sequences(spec), b = generate_sequences(spec);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t t = 0; t < 5; ++t) {
      EXPECT_EQ(a.sequences[i].frames[t].rgb, b.sequences[i].frames[t].rgb);
      EXPECT_EQ(a.sequences[i].masks[t], b.sequences[i].masks[t]);
    }
  spec.seed += 1;
  EXPECT_NE(generate_sequences(spec).sequences[0].frames[0].rgb, a.sequences[0].frames[0].rgb);
}

TEST(Generator, ValidatesItsSpec) {
  SyntheticSpec spec;
  spec.scenario = "crossing";
  spec.num_objects = 1;
  EXPECT_THROW(generate_sequences(spec), std::invalid_argument);
  spec.scenario = "spiral";
  spec.num_objects = 2;
  EXPECT_THROW(generate_sequences(spec), std::invalid_argument);
  spec.scenario = "random";
  spec.height = 0;
  EXPECT_THROW(generate_sequences(spec), std::invalid_argument);
}

SyntheticSpec scenario_spec(const std::string& scenario, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_sequences = 1;
  spec.frames_per_seq = 12;
  spec.height = spec.width = 64;
  spec.scenario = scenario;
  spec.seed = seed;
  return spec;
}

TEST(Generator, CrossingObjectsSwapSides) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Sequence s = generate_sequences(scenario_spec("crossing", seed)).sequences[0];
    EXPECT_EQ(s.name, "seq000_crossing");
    const LabelMask& first = s.masks.front();
    const LabelMask& last = s.masks.back();
    EXPECT_LT(centroid_x(first, 1), centroid_x(first, 2));
    EXPECT_GT(centroid_x(last, 1), centroid_x(last, 2));
  }
}

TEST(Generator, OcclusionHidesPartOfObjectOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Sequence s = generate_sequences(scenario_spec("occlusion", seed)).sequences[0];
    int lo = area(s.masks[0], 1), hi = lo;
    for (const auto& m : s.masks) {
      lo = std::min(lo, area(m, 1));
      hi = std::max(hi, area(m, 1));
    }
    EXPECT_LT(lo, hi) << "seed " << seed;
    for (const auto& m : s.masks) EXPECT_GT(area(m, 2), 0);
  }
}

TEST(Generator, PartSplitCutsObjectOneInTwo) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Sequence s = generate_sequences(scenario_spec("part-split", seed)).sequences[0];
    int most = 0;
    for (const auto& m : s.masks) most = std::max(most, components(m, 1));
    EXPECT_GE(most, 2) << "seed " << seed;
  }
}

TEST(Generator, CentroidOfAbsentObjectIsNegative) {
  EXPECT_EQ(centroid_x(LabelMask(4, 4), 1), -1.0);
}

}  // namespace
}  // namespace s3vos
