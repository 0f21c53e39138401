#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "s3vos/gradcheck.hpp"
#include "s3vos/pipeline.hpp"

namespace s3vos {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("s3vos_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Dataset tiny_dataset(int sequences = 3, int frames = 6, std::uint64_t seed = 3) {
  SyntheticSpec spec;
  spec.num_sequences = sequences;
  spec.frames_per_seq = frames;
  spec.height = spec.width = 32;
  spec.scenario = "mixed";
  spec.seed = seed;
  return generate_sequences(spec);
}

TrainConfig tiny_train(int iterations) {
  TrainConfig t;
  t.iterations = iterations;
  t.num_frames = 3;
  t.num_ref_frames = 2;
  t.max_skip = {2};
  t.max_skip_milestones = {1.0};
  t.lr = 1e-3;
  t.log_every = 1;
  return t;
}

TEST(Padding, PadAndCropRoundTrip) {
  Rng rng(1);
  for (auto [h, w] : {std::pair{30, 45}, std::pair{32, 32}, std::pair{1, 70}}) {
    const Image img{random_uniform(static_cast<std::size_t>(h * w), 3, rng, 0.0, 1.0), h, w};
    LabelMask m(h, w);
    for (auto& v : m.labels) v = static_cast<std::uint8_t>(rng() % 3);
    const PaddedInput p = pad_to_32(img, {m});
    EXPECT_EQ(p.frame.height, round_up_32(h));
    EXPECT_EQ(p.frame.width, round_up_32(w));
    EXPECT_EQ(p.frame.height % 32, 0);
    EXPECT_EQ(crop_image(p.frame, p.crop).rgb, img.rgb);
    EXPECT_EQ(crop_mask(p.masks[0], p.crop), m);
    // Padding is zero.
    if (p.frame.width > w) {
      EXPECT_EQ(p.frame.rgb(static_cast<std::size_t>(w), 0), 0.0);
    }
    EXPECT_EQ(pad_mask(m, p.frame.height, p.frame.width), p.masks[0]);
  }
  EXPECT_EQ(round_up_32(33), 64);
  EXPECT_EQ(round_up_32(64), 64);
}

TEST(DownsampleMask, IsAMaxPool) {
  std::vector<std::uint8_t> m(32 * 32, 0);
  m[17 * 32 + 3] = 1;  // block (1, 0)
  const TokenMask d = downsample_mask(m, 32, 32, 16);
  EXPECT_EQ(d, (TokenMask{0, 0, 1, 0}));
}

TEST(FieldArgmax, ExhaustiveAgreementWithLowestIndexTieBreak) {
  const std::vector<int> ids = {3, 7};
  const double levels[] = {0.0, 0.25, 0.5};
  Tensor field(27, 3);
  std::vector<std::uint8_t> want;
  std::size_t r = 0;
  for (double a : levels)
    for (double b : levels)
      for (double c : levels) {
        field(r, 0) = a;
        field(r, 1) = b;
        field(r, 2) = c;
        std::size_t best = 0;
        const double v[] = {a, b, c};
        for (std::size_t k = 0; k < 3; ++k)
          if (v[k] > v[best]) best = k;
        want.push_back(best == 0 ? 0 : static_cast<std::uint8_t>(ids[best - 1]));
        ++r;
      }
  EXPECT_EQ(field_argmax(field, ids), want);
  EXPECT_THROW(field_argmax(field, {1}), std::invalid_argument);
}

TEST(LogitsToField, RowsAreDistributions) {
  Rng rng(2);
  const Var field =
      logits_to_field({constant(random_normal(10, 1, rng, 3.0)), constant(random_normal(10, 1, rng, 3.0))});
  ASSERT_EQ(field.cols(), 3u);
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_GT(field.value()(i, c), 0.0);
      s += field.value()(i, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Session, RequiresInitializationAndMatchingSizes) {
  const Model m = Model::init(tiny_model_config(), 1);
  SequenceSession s(m);
  Rng rng(3);
  const Image img{random_uniform(32 * 32, 3, rng, 0.0, 1.0), 32, 32};
  EXPECT_THROW(s.infer_frame(img), std::logic_error);
  LabelMask init(32, 32);
  init.at(5, 5) = 1;
  s.initialize(img, init);
  EXPECT_THROW(s.infer_frame({Tensor(40 * 32, 3), 40, 32}), std::invalid_argument);
}

TEST(Session, MemoryScheduleAndContracts) {
  ModelConfig cfg = tiny_model_config();
  cfg.update_interval = 2;
  cfg.memory_capacity = 3;
  const Model m = Model::init(cfg, 4);
  const Sequence seq = tiny_dataset(1, 9).sequences[0];
  SequenceSession s(m);
  const LabelMask first = s.initialize(seq.frames[0], seq.masks[0]);
  EXPECT_EQ(first, seq.masks[0]);
  std::vector<int> expected = {0};
  for (int t = 1; t < 9; ++t) {
    const LabelMask out = s.infer_frame(seq.frames[static_cast<std::size_t>(t)]);
    EXPECT_EQ(out.height, 32);
    if (t % 2 == 0 && !out.ids().empty()) expected.push_back(t);
    EXPECT_LE(static_cast<int>(s.pixel_memory().size()), 3);
    EXPECT_EQ(s.pixel_memory().entries().front().frame_index, 0);
  }
  EXPECT_EQ(s.write_log(), expected);
}

TEST(Session, InferSequenceKeepsFirstMaskAndOnlyKnownIds) {
  const Model m = Model::init(tiny_model_config(), 5);
  const Sequence seq = tiny_dataset(1, 4).sequences[0];
  const auto out = infer_sequence(m, seq.frames, seq.masks[0]);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0], seq.masks[0]);
  const auto known = seq.masks[0].ids();
  for (const auto& o : out)
    for (int id : o.ids()) EXPECT_TRUE(known.count(id));
}

TEST(ClipSampler, PropertySweep) {
  const Dataset ds = tiny_dataset(4, 12);
  TrainConfig cfg = tiny_train(100);
  cfg.num_frames = 4;
  cfg.max_objects = 1;
  cfg.max_skip = {1, 3};
  cfg.max_skip_milestones = {0.5, 1.0};
  Rng rng(6);
  for (int it = 0; it < 100; ++it) {
    const Clip c = sample_training_clip(ds, it, cfg, rng);
    ASSERT_EQ(c.frames.size(), 4u);
    ASSERT_EQ(c.labels.size(), 4u);
    EXPECT_EQ(c.object_ids.size(), 1u);
    const int skip = cfg.max_skip_at(it);
    const int dir = c.frame_indices[1] > c.frame_indices[0] ? 1 : -1;
    for (std::size_t k = 1; k < 4; ++k) {
      const int gap = (c.frame_indices[k] - c.frame_indices[k - 1]) * dir;
      EXPECT_GE(gap, 1);
      EXPECT_LE(gap, skip);
    }
    bool has_target = false;
    for (auto v : c.labels[0]) {
      EXPECT_LE(v, 1);
      has_target = has_target || v == 1;
    }
    EXPECT_TRUE(has_target);
  }
  cfg.num_frames = 13;
  EXPECT_THROW(sample_training_clip(ds, 0, cfg, rng), std::runtime_error);
}

TEST(TrainLoss, IsFiniteAndSmallerForTheTruth) {
  std::vector<std::uint8_t> labels = {0, 1, 2, 1};
  Tensor good(4, 3, 0.01), bad(4, 3, 1.0 / 3.0);
  for (std::size_t i = 0; i < 4; ++i) good(i, labels[i]) = 0.98;
  Rng rng(7);
  const double lg = train_loss({constant(good)}, {labels}, 1.0, rng).value()[0];
  const double lb = train_loss({constant(bad)}, {labels}, 1.0, rng).value()[0];
  EXPECT_TRUE(std::isfinite(lg));
  EXPECT_LT(lg, lb);
}

TEST(Train, LossDecreasesAndRunsAreBitIdentical) {
  const Dataset ds = tiny_dataset();
  const TrainConfig t = tiny_train(30);
  Model a = Model::init(tiny_model_config(), 8);
  Model b = Model::init(tiny_model_config(), 8);
  const TrainResult ra = train(a, ds, t);
  const TrainResult rb = train(b, ds, t);
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].loss, rb.log[i].loss);
  const auto pa = a.params().items(), pb = b.params().items();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].var.value(), pb[i].var.value());
  EXPECT_LT(smoothed(ra.log, 20, 10), smoothed(ra.log, 0, 10));
}

TEST(Checkpoint, RoundTripIsExactAndDeterministic) {
  const fs::path dir = temp_dir("ckpt");
  RunConfig run;
  run.model = tiny_model_config();
  run.model.top_k = 5;
  const Model m = Model::init(run.model, 9);
  save_checkpoint(dir / "a.ckpt", m, run);
  save_checkpoint(dir / "b.ckpt", m, run);
  EXPECT_EQ(file_bytes(dir / "a.ckpt"), file_bytes(dir / "b.ckpt"));
  RunConfig back;
  const Model r = load_checkpoint(dir / "a.ckpt", &back);
  EXPECT_EQ(back.model.top_k, 5);
  const auto pa = m.params().items(), pb = r.params().items();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(pa[i].var.value(), pb[i].var.value()) << pa[i].name;
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const fs::path dir = temp_dir("ckpt_bad");
  EXPECT_THROW(load_checkpoint(dir / "none.ckpt"), std::runtime_error);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), std::runtime_error);
  RunConfig run;
  run.model = tiny_model_config();
  save_checkpoint(dir / "ok.ckpt", Model::init(run.model, 1), run);
  std::string bytes = file_bytes(dir / "ok.ckpt");
  bytes.resize(bytes.size() - 16);
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), std::runtime_error);
}

}  // namespace
}  // namespace s3vos
