// Acceptance run: one PASS/FAIL line per criterion, with the measured numbers.
//
//   s3vos_acceptance [--work DIR] [N ...]
//
// Without criterion numbers every criterion runs. Exit status is 0 only when
// every criterion that ran passed.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "s3vos/cli.hpp"
#include "s3vos/eval.hpp"
#include "s3vos/gradcheck.hpp"
#include "s3vos/kernels.hpp"
#include "s3vos/memory.hpp"
#include "s3vos/ops.hpp"
#include "s3vos/pipeline.hpp"
#include "s3vos/query.hpp"

namespace {

using namespace s3vos;
namespace fs = std::filesystem;

struct Outcome {
  bool passed = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// Runs the command-line tool in-process; throws on a nonzero exit.
std::string cli(std::vector<std::string> args) {
  args.insert(args.begin(), "s3vos");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != kExitOk) {
    throw std::runtime_error("s3vos " + args[1] + " exited " + std::to_string(code) + ": " +
                             err.str() + out.str());
  }
  return out.str();
}

// ------------------------------------------------------------------ 1

Outcome gradient_suite() {
  const Clock clock;
  const auto reports = grad_check_all(1e-4, 0);
  const double secs = clock.seconds();
  double worst_op = 0.0, composed = 0.0;
  std::string worst_name;
  std::vector<std::string> failed;
  std::size_t skipped = 0;
  for (const auto& r : reports) {
    if (!r.passed) failed.push_back(r.op_name);
    skipped += r.unstable_skipped;
    if (r.tolerance > 1e-4) {
      composed = std::max(composed, r.max_rel_error);
    } else if (r.max_rel_error >= worst_op) {
      worst_op = r.max_rel_error;
      worst_name = r.op_name;
    }
  }
  Outcome o;
  o.passed = failed.empty() && secs <= 300.0 && reports.size() >= 2;
  o.detail = std::to_string(reports.size()) + " checks, worst op " + sci(worst_op) + " (" +
             worst_name + "), composed " + sci(composed) + ", kink-skipped " +
             std::to_string(skipped) + ", " + fmt(secs) + " s";
  for (const auto& f : failed) o.detail += ", FAILED " + f;
  return o;
}

// ------------------------------------------------------------------ 2

struct OracleTally {
  int instances = 0;
  double worst = 0.0;
  void add(double err) {
    ++instances;
    worst = std::max(worst, err);
  }
};

double deformable_instance(Rng& rng) {
  std::uniform_int_distribution<int> small(1, 3);
  const int heads = small(rng), points = small(rng);
  std::vector<Level> levels = {{4, small(rng) + 1, small(rng) + 2},
                               {8, small(rng), small(rng) + 1},
                               {16, 1, small(rng)}};
  std::size_t n = 0;
  for (const auto& l : levels) n += l.area();
  const std::size_t c = 5;
  const auto query = TokenTensor::from_levels(constant(random_normal(n, c, rng)), levels);
  const auto value = TokenTensor::from_levels(constant(random_normal(n, c, rng)), levels);
  const std::size_t slots = static_cast<std::size_t>(heads) * levels.size() * points;
  DeformableParams p;
  p.heads = heads;
  p.levels = static_cast<int>(levels.size());
  p.points = points;
  p.w_offset = constant(random_normal(c, 2 * slots, rng, 0.8));
  p.b_offset = constant(random_normal(1, 2 * slots, rng, 1.5));
  p.w_weight = constant(random_normal(c, slots, rng));
  p.b_weight = constant(random_normal(1, slots, rng));
  p.w_value = constant(random_normal(c, c, rng));
  p.w_out = constant(random_normal(c, c, rng));
  std::vector<oracle::OracleLevel> ol;
  for (const auto& l : levels) ol.push_back({l.height, l.width});
  const Tensor got = deformable_attention(query, value, p).data.value();
  const Tensor want = oracle::deformable(query.data.value(), query.ref_points, value.data.value(),
                                         ol, p.w_offset.value(), p.b_offset.value(),
                                         p.w_weight.value(), p.b_weight.value(),
                                         p.w_value.value(), p.w_out.value(), heads, points);
  return max_abs_diff(got, want);
}

double bilinear_instance(Rng& rng) {
  std::uniform_int_distribution<int> side(1, 9);
  const int h = side(rng), w = side(rng);
  const Tensor map = random_normal(static_cast<std::size_t>(h * w), 3, rng);
  const Tensor pts = random_uniform(30, 2, rng, -0.3, 1.3);
  const Tensor got = ops::bilinear_sample(constant(map), h, w, constant(pts)).value();
  double err = 0.0;
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    const auto want = oracle::bilinear(map, 0, h, w, pts(i, 0), pts(i, 1));
    for (std::size_t ch = 0; ch < 3; ++ch) err = std::max(err, std::abs(got(i, ch) - want[ch]));
  }
  return err;
}

double masked_attention_instance(Rng& rng, int index) {
  std::uniform_int_distribution<std::size_t> count(1, 16);
  const std::size_t nq = count(rng), nf = count(rng), d = 4;
  const Tensor q = random_normal(nq, 6, rng), f = random_normal(nf, 6, rng);
  const Tensor wq = random_normal(6, d, rng), wk = random_normal(6, d, rng),
               wv = random_normal(6, 5, rng);
  std::bernoulli_distribution on(0.4);
  TokenMask mask(nf);
  for (auto& m : mask) m = (index % 5 != 0 && on(rng)) ? 1 : 0;  // every fifth mask is empty
  const Tensor got = masked_cross_attention(constant(q), constant(f), mask, constant(wq),
                                            constant(wk), constant(wv), d)
                         .value();
  return max_abs_diff(got, oracle::attention(q, f, f, wq, wk, wv, d, &mask));
}

double topk_instance(Rng& rng) {
  std::uniform_int_distribution<std::size_t> count(1, 30);
  const std::size_t nq = count(rng), nm = count(rng);
  const Tensor q = random_normal(nq, 4, rng), k = random_normal(nm, 4, rng),
               v = random_normal(nm, 3, rng);
  const int top = static_cast<int>(count(rng));
  const Tensor got = topk_attention(constant(q), constant(k), constant(v), top).value();
  return max_abs_diff(got, oracle::topk_readout(q, k, v, top));
}

double soft_aggregate_instance(Rng& rng) {
  std::uniform_int_distribution<std::size_t> objects(1, 3);
  Tensor p = random_uniform(40, objects(rng), rng, 0.0, 1.0);
  p(0, 0) = 0.0;
  p(1, 0) = 1.0;
  return max_abs_diff(ops::soft_aggregate(constant(p)).value(), oracle::soft_aggregate(p));
}

Outcome oracle_equivalence() {
  const int instances = 25;
  std::vector<std::pair<std::string, OracleTally>> tallies = {
      {"deformable", {}}, {"bilinear", {}}, {"masked-attn", {}}, {"top-K", {}}, {"soft-agg", {}}};
  for (int i = 0; i < instances; ++i) {
    Rng rng(static_cast<std::uint64_t>(1000 + i));
    tallies[0].second.add(deformable_instance(rng));
    tallies[1].second.add(bilinear_instance(rng));
    tallies[2].second.add(masked_attention_instance(rng, i));
    tallies[3].second.add(topk_instance(rng));
    tallies[4].second.add(soft_aggregate_instance(rng));
  }
  Outcome o;
  o.passed = true;
  for (const auto& [name, t] : tallies) {
    const bool ok = t.instances >= 20 && t.worst <= 1e-9;
    o.passed = o.passed && ok;
    if (!o.detail.empty()) o.detail += ", ";
    o.detail += name + " " + sci(t.worst) + (ok ? "" : " (FAIL)");
  }
  o.detail += " over " + std::to_string(instances) + " instances each";
  return o;
}

// ------------------------------------------------------------------ 3

std::vector<std::uint8_t> bits(std::uint64_t v, int n) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i)] = (v >> i) & 1u;
  return m;
}

Outcome metric_correctness(const fs::path& work) {
  double worst = 0.0;
  long pairs = 0;
  auto compare = [&](const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                     int h, int w) {
    worst = std::max(worst, std::abs(jaccard(a, b) - oracle::jaccard(a, b)));
    worst = std::max(worst, std::abs(boundary_f(a, b, h, w) - oracle::boundary_f(a, b, h, w)));
    ++pairs;
  };
  // Every pair of masks on every grid with at most 9 pixels.
  for (int h = 1; h <= 3; ++h)
    for (int w = 1; w <= 3; ++w) {
      const int n = h * w;
      for (std::uint64_t a = 0; a < (1u << n); ++a)
        for (std::uint64_t b = 0; b < (1u << n); ++b) compare(bits(a, n), bits(b, n), h, w);
    }
  // Every grid shape up to 24x24 with random pairs at three densities.
  Rng rng(3);
  for (int h = 1; h <= 24; ++h)
    for (int w = 1; w <= 24; ++w)
      for (double density : {0.15, 0.5, 0.85}) {
        std::bernoulli_distribution on(density);
        std::vector<std::uint8_t> a(static_cast<std::size_t>(h * w)), b(a.size());
        for (auto& v : a) v = on(rng);
        for (auto& v : b) v = on(rng);
        compare(a, b, h, w);
      }

  const fs::path root = fresh_dir(work / "fixture");
  fixture::write_eval_fixture(root);
  const fixture::Expected want;
  const EvalReport r = evaluate(root / "pred", root / "gt", load_splits(root / "splits.json"));
  double fixture_err = 0.0;
  for (auto [got, expect] : {std::pair{r.j_mean, want.j_mean}, {r.f_mean, want.f_mean},
                             {r.jf_mean, want.jf_mean}, {r.g.value_or(-1.0), want.g},
                             {r.sequences.at(1).j, want.seq_b_j},
                             {r.sequences.at(1).f, want.seq_b_f},
                             {r.sequences.at(1).jf, want.seq_b_jf}})
    fixture_err = std::max(fixture_err, std::abs(got - expect));
  const bool fixture_ok = fixture_err <= 1e-15 && r.missing.size() == 1;

  Outcome o;
  o.passed = worst <= 1e-12 && fixture_ok;
  o.detail = std::to_string(pairs) + " mask pairs, max deviation " + sci(worst) +
             "; fixture max deviation " + sci(fixture_err) + (fixture_ok ? "" : " (FAIL)");
  return o;
}

// ------------------------------------------------------------------ 4

Outcome discriminative_contract() {
  Rng rng(4);
  int violations = 0, empty_masks = 0;
  std::uniform_int_distribution<std::size_t> tokens(1, 40), queries(1, 8), chans(1, 6);
  std::uniform_real_distribution<double> density(0.0, 1.0), scale_exp(-6.0, 6.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t l = tokens(rng), n = queries(rng), c = chans(rng);
    const Tensor f = random_normal(l, c, rng), q = random_normal(n, c, rng);
    std::bernoulli_distribution on(trial % 10 == 0 ? 0.0 : density(rng));
    TokenMask mask(l);
    bool any = false;
    for (auto& m : mask) {
      m = on(rng) ? 1 : 0;
      any = any || m;
    }
    const Tensor scores = oracle::matmul(f, [&] {
      Tensor t(c, n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) t(k, i) = q(i, k);
      return t;
    }());
    const double alpha = std::pow(10.0, scale_exp(rng));
    Tensor scaled = scores;
    for (double& v : scaled.flat()) v *= alpha;
    const auto idx = select_indices(scores, mask);
    const Tensor out = discriminative_select(constant(f), constant(q), mask).value();
    if (!any) {
      ++empty_masks;
      if (!idx.empty() || out != q) ++violations;
      continue;
    }
    if (idx.size() != n || select_indices(scaled, mask) != idx) {
      ++violations;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[idx[i]]) ++violations;
      for (std::size_t k = 0; k < c; ++k)
        if (out(i, k) != f(idx[i], k)) {
          ++violations;
          break;
        }
    }
  }
  Outcome o;
  o.passed = violations == 0;
  o.detail = "1000 trials (" + std::to_string(empty_masks) + " with an empty mask), " +
             std::to_string(violations) + " violations";
  return o;
}

// ------------------------------------------------------------------ 5

std::map<int, Var> values_for(Rng& rng, const std::vector<int>& ids) {
  std::map<int, Var> v;
  for (int id : ids) v[id] = constant(random_normal(4, 2, rng));
  return v;
}

Outcome memory_contracts() {
  Rng rng(5);
  int violations = 0;

  // Pixel bank alone: random capacities and write counts.
  std::uniform_int_distribution<int> cap_dist(2, 8), writes_dist(1, 30);
  for (int s = 0; s < 1000; ++s) {
    const int cap = cap_dist(rng), writes = writes_dist(rng);
    PixelMemory mem(cap);
    for (int t = 0; t < writes; ++t) {
      mem = memory_write(mem, t, constant(random_normal(4, 3, rng)), values_for(rng, {1}));
      const auto& e = mem.entries();
      if (static_cast<int>(e.size()) > cap || e.front().frame_index != 0) ++violations;
      // Survivors are frame 0 and the most recent writes, in order.
      const int keep = std::min(t + 1, cap);
      for (int i = 1; i < keep; ++i)
        if (e[static_cast<std::size_t>(i)].frame_index != t + 1 - keep + i) ++violations;
    }
  }

  // Object bank: the streaming mean against the arithmetic mean.
  double worst_mean = 0.0;
  std::uniform_int_distribution<int> len_dist(1, 60);
  for (int s = 0; s < 1000; ++s) {
    const int len = len_dist(rng);
    ObjectMemoryEntry om;
    Tensor sum(3, 4);
    for (int i = 0; i < len; ++i) {
      const Tensor qn = random_normal(3, 4, rng, 2.0);
      om = object_memory_update(om, constant(qn));
      for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += qn[k];
    }
    Tensor mean = sum;
    for (double& v : mean.flat()) v /= len;
    if (om.count != len) ++violations;
    worst_mean = std::max(worst_mean, max_abs_diff(om.mean.value(), mean));
  }
  if (worst_mean > 1e-12) ++violations;

  // Inference sessions: random interval, capacity and sequence length.
  SyntheticSpec spec;
  spec.num_sequences = 6;
  spec.frames_per_seq = 16;
  spec.height = spec.width = 32;
  spec.scenario = "mixed";
  spec.seed = 5;
  const Dataset ds = generate_sequences(spec);
  std::uniform_int_distribution<int> r_dist(1, 6), c_dist(2, 6), t_dist(1, 16),
      seq_dist(0, spec.num_sequences - 1);
  std::map<int, Model> models;  // one per interval/capacity pair
  int writes_seen = 0;
  for (int s = 0; s < 1000; ++s) {
    const int r = r_dist(rng), cap = c_dist(rng), len = t_dist(rng);
    const int key = r * 16 + cap;
    if (!models.count(key)) {
      ModelConfig cfg = tiny_model_config();
      cfg.update_interval = r;
      cfg.memory_capacity = cap;
      models.emplace(key, Model::init(cfg, static_cast<std::uint64_t>(key)));
    }
    const Sequence& seq = ds.sequences[static_cast<std::size_t>(seq_dist(rng))];
    SequenceSession session(models.at(key));
    session.initialize(seq.frames[0], seq.masks[0]);
    std::vector<int> expected = {0};
    for (int t = 1; t < len; ++t) {
      const LabelMask out = session.infer_frame(seq.frames[static_cast<std::size_t>(t)]);
      if (t % r == 0 && !out.ids().empty()) expected.push_back(t);
      const auto& e = session.pixel_memory().entries();
      if (static_cast<int>(e.size()) > cap || e.front().frame_index != 0) ++violations;
    }
    if (session.write_log() != expected) ++violations;
    for (int f : session.write_log())
      if (f % r != 0) ++violations;
    writes_seen += static_cast<int>(session.write_log().size());
  }

  Outcome o;
  o.passed = violations == 0;
  o.detail = "1000 bank schedules, 1000 mean streams (max deviation " + sci(worst_mean) +
             "), 1000 session schedules (" + std::to_string(writes_seen) + " writes), " +
             std::to_string(violations) + " violations";
  return o;
}

// ------------------------------------------------------------------ 6 and 7

struct DeskRun {
  bool ready = false;
  fs::path root;
  fs::path config;
  double full_train_secs = 0.0;
};

DeskRun& desk(const fs::path& work) {
  static DeskRun run;
  if (run.ready) return run;
  run.root = fresh_dir(work / "desk");
  run.config = fs::path(S3VOS_SOURCE_DIR) / "configs" / "desk.cfg";
  const auto gen = [&](const std::string& out, const std::string& seqs, const std::string& scen,
                       const std::string& seed) {
    cli({"generate", "--out", (run.root / out).string(), "--seqs", seqs, "--frames", "16",
         "--height", "48", "--width", "48", "--scenario", scen, "--seed", seed});
  };
  gen("train", "16", "mixed", "11");
  gen("heldout", "6", "mixed", "99");
  gen("crossing", "8", "crossing", "123");
  const Clock clock;
  cli({"train", "--config", run.config.string(), "--data", (run.root / "train").string(),
       "--out", (run.root / "full.ckpt").string()});
  run.full_train_secs = clock.seconds();
  run.ready = true;
  return run;
}

double jf_of(const fs::path& ckpt, const fs::path& data, const fs::path& pred) {
  fs::remove_all(pred);
  cli({"infer", "--ckpt", ckpt.string(), "--data", data.string(), "--out", pred.string()});
  return evaluate(pred, data).jf_mean;
}

Outcome learnability(const fs::path& work) {
  DeskRun& run = desk(work);
  RunConfig cfg;
  cfg.load_file(run.config.string());
  // Same initialization as the trained model, zero steps.
  save_checkpoint(run.root / "untrained.ckpt", Model::init(cfg.model, cfg.train.seed), cfg);
  const double before = jf_of(run.root / "untrained.ckpt", run.root / "heldout",
                              run.root / "pred_untrained");
  const double after = jf_of(run.root / "full.ckpt", run.root / "heldout", run.root / "pred_full");
  Outcome o;
  o.passed = cfg.train.iterations <= 10000 && after >= 0.60 && after >= before + 0.30 &&
             run.full_train_secs <= 3600.0;
  o.detail = "held-out J&F " + fmt(after) + " trained vs " + fmt(before) + " untrained after " +
             std::to_string(cfg.train.iterations) + " iterations, training " +
             fmt(run.full_train_secs / 60.0) + " min";
  return o;
}

Outcome ablation_echo(const fs::path& work) {
  DeskRun& run = desk(work);
  cli({"train", "--config", run.config.string(), "--data", (run.root / "train").string(), "--out",
       (run.root / "no_disc.ckpt").string(), "--ablate", "disable_discriminative_query"});
  const double full = jf_of(run.root / "full.ckpt", run.root / "crossing", run.root / "pc_full");
  const double ablated =
      jf_of(run.root / "no_disc.ckpt", run.root / "crossing", run.root / "pc_no_disc");
  Outcome o;
  o.passed = full >= ablated;
  o.detail = "crossing suite J&F full " + fmt(full, 4) + " vs disable_discriminative_query " +
             fmt(ablated, 4);
  return o;
}

// ------------------------------------------------------------------ 8

std::map<std::string, std::string> run_pipeline_once(const fs::path& dir) {
  fresh_dir(dir);
  RunConfig cfg;
  cfg.model = tiny_model_config();
  cfg.train.iterations = 12;
  cfg.train.num_frames = 3;
  cfg.train.num_ref_frames = 2;
  cfg.train.max_skip = {2};
  cfg.train.max_skip_milestones = {1.0};
  cfg.train.log_every = 1;
  std::ofstream(dir / "tiny.cfg") << cfg.to_text();
  cli({"generate", "--out", (dir / "data").string(), "--seqs", "3", "--frames", "6", "--height",
       "32", "--width", "48", "--scenario", "mixed", "--seed", "8"});
  cli({"train", "--config", (dir / "tiny.cfg").string(), "--data", (dir / "data").string(),
       "--out", (dir / "model.ckpt").string(), "--seed", "8"});
  cli({"infer", "--ckpt", (dir / "model.ckpt").string(), "--data", (dir / "data").string(),
       "--out", (dir / "pred").string()});
  cli({"eval", "--pred", (dir / "pred").string(), "--gt", (dir / "data").string(), "--report",
       (dir / "report.json").string()});
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = file_bytes(e.path());
  return files;
}

Outcome determinism(const fs::path& work) {
  const auto a = run_pipeline_once(work / "det_a");
  const auto b = run_pipeline_once(work / "det_b");
  int masks = 0, differing = 0;
  for (const auto& [name, bytes] : a) {
    if (name.rfind("pred/", 0) == 0) ++masks;
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++differing;
  }
  const bool key_files = a.count("model.ckpt") && a.count("report.json") &&
                         a.count("model.ckpt.loss.csv");
  Outcome o;
  o.passed = a.size() == b.size() && differing == 0 && key_files && masks > 0;
  o.detail = std::to_string(a.size()) + " files compared (checkpoint, loss log, " +
             std::to_string(masks) + " masks, report), " + std::to_string(differing) + " differ";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "s3vos_acceptance";
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      try {
        wanted.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::cerr << "usage: s3vos_acceptance [--work DIR] [criterion ...]\n";
        return 2;
      }
    }
  }
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_equivalence},
      {"metric correctness", [&] { return metric_correctness(work); }},
      {"discriminative_select contract", discriminative_contract},
      {"memory contracts", memory_contracts},
      {"desk-scale learnability", [&] { return learnability(work); }},
      {"ablation echo", [&] { return ablation_echo(work); }},
      {"determinism", [&] { return determinism(work); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(n)) continue;
    Outcome o;
    const Clock clock;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.passed;
    std::cout << "criterion " << n << " " << (o.passed ? "PASS" : "FAIL") << "  "
              << criteria[i].first << ": " << o.detail << "  [" << fmt(clock.seconds()) << " s]"
              << std::endl;
  }
  return all ? 0 : 1;
}
