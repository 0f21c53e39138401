#include "s3vos/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "s3vos/data.hpp"
#include "s3vos/eval.hpp"
#include "s3vos/gradcheck.hpp"
#include "s3vos/pipeline.hpp"

namespace s3vos {

namespace {

namespace fs = std::filesystem;

/// Usage and I/O problems map to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("S3VOS_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw UsageError(std::string("S3VOS_SEED is not an unsigned integer: '") + s + "'");
  }
}

/// --seed wins, then S3VOS_SEED, then whatever the config holds.
std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return flag;
  return env_seed();
}

void apply_sets(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

void apply_ablations(RunConfig& cfg, const std::vector<std::string>& names) {
  for (std::string n : names) {
    if (n.rfind("disable_", 0) != 0) n = "disable_" + n;
    cfg.set("ablation." + n, "true");
  }
}

void load_config(RunConfig& cfg, const std::string& path) {
  if (path.empty()) return;
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  cfg.load_file(path);
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("frames directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

void write_sequence(const fs::path& dir, const std::vector<LabelMask>& masks,
                    const std::vector<std::string>& names) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
  for (std::size_t t = 0; t < masks.size(); ++t) write_mask(dir / names[t], masks[t]);
}

int cmd_generate(const RunConfig& base, const fs::path& out_dir, std::ostream& out) {
  base.data.validate();
  generate_synthetic(base.data, out_dir);
  out << "wrote " << base.data.num_sequences << " sequences to " << out_dir.string() << "\n";
  return kExitOk;
}

int cmd_train(RunConfig cfg, const fs::path& data, const fs::path& ckpt, fs::path log_path,
              std::ostream& out) {
  if (!fs::is_directory(data)) throw UsageError("data directory not found: " + data.string());
  cfg.model.validate();
  cfg.train.validate();
  const Dataset ds = load_dataset(data);
  if (ds.sequences.empty()) throw UsageError("no sequences under " + data.string());
  Model model = Model::init(cfg.model, cfg.train.seed);
  const TrainResult res = train(model, ds, cfg.train, [&](const LossRecord& r) {
    out << "iter " << r.iteration << " loss " << std::setprecision(6) << r.loss << " lr " << r.lr
        << "\n";
  });
  save_checkpoint(ckpt, model, cfg);
  if (log_path.empty()) log_path = fs::path(ckpt.string() + ".loss.csv");
  std::ofstream csv(log_path);
  if (!csv) throw UsageError("cannot write loss log " + log_path.string());
  csv << "iteration,loss,lr\n" << std::setprecision(17);
  for (const auto& r : res.log) csv << r.iteration << "," << r.loss << "," << r.lr << "\n";
  out << "checkpoint " << ckpt.string() << ", loss log " << log_path.string() << "\n";
  return kExitOk;
}

int cmd_infer_one(const Model& model, const fs::path& frames_dir, const fs::path& init_path,
                  const fs::path& out_dir) {
  const auto files = png_files(frames_dir);
  if (files.empty()) throw UsageError("no .png frames in " + frames_dir.string());
  if (!fs::exists(init_path)) throw UsageError("initial mask not found: " + init_path.string());
  const LabelMask init = read_mask(init_path);
  std::vector<Image> frames;
  std::vector<std::string> names;
  for (const auto& f : files) {
    frames.push_back(read_rgb(f));
    names.push_back(f.filename().string());
  }
  write_sequence(out_dir, infer_sequence(model, frames, init), names);
  return kExitOk;
}

int cmd_infer_dataset(const Model& model, const fs::path& root, const fs::path& out_dir,
                      int jobs) {
  if (!fs::is_directory(root / "JPEGImages")) {
    throw UsageError("dataset root must contain JPEGImages/: " + root.string());
  }
  std::vector<std::string> seqs;
  for (const auto& e : fs::directory_iterator(root / "JPEGImages"))
    if (e.is_directory()) seqs.push_back(e.path().filename().string());
  std::sort(seqs.begin(), seqs.end());
  std::vector<std::string> errors(seqs.size());
  const int n = static_cast<int>(seqs.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, jobs))
  for (int i = 0; i < n; ++i) {
    const auto& s = seqs[static_cast<std::size_t>(i)];
    try {
      cmd_infer_one(model, root / "JPEGImages" / s, annotation_path(root, s, 0), out_dir / s);
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(i)] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw UsageError(e);
  return kExitOk;
}

int cmd_eval(const fs::path& pred, const fs::path& gt, const std::string& splits_path,
             const fs::path& report_path, double min_jf, int jobs, std::ostream& out) {
  if (!fs::is_directory(pred)) throw UsageError("prediction directory not found: " + pred.string());
  if (!fs::is_directory(gt)) throw UsageError("ground-truth directory not found: " + gt.string());
  std::optional<Splits> splits;
  if (!splits_path.empty()) {
    if (!fs::exists(splits_path)) throw UsageError("splits file not found: " + splits_path);
    splits = load_splits(splits_path);
  }
  const EvalReport rep = evaluate(pred, gt, splits, jobs);
  const std::string text = rep.to_json().dump(2);
  if (!report_path.empty()) {
    std::ofstream f(report_path);
    if (!f) throw UsageError("cannot write report " + report_path.string());
    f << text << "\n";
  }
  out << std::setprecision(6) << "J " << rep.j_mean << "  F " << rep.f_mean << "  J&F "
      << rep.jf_mean;
  if (rep.g) out << "  G " << *rep.g;
  out << "\n";
  if (rep.jf_mean < min_jf) {
    out << "J&F " << rep.jf_mean << " is below the required " << min_jf << "\n";
    return kExitCheckFailed;
  }
  return kExitOk;
}

int cmd_gradcheck(double tol, const std::string& op, std::uint64_t seed, bool faulty,
                  std::ostream& out) {
  const auto reports = grad_check_all(tol, seed, faulty, op);
  int failed = 0;
  for (const auto& r : reports) {
    out << (r.passed ? "PASS " : "FAIL ") << std::left << std::setw(24) << r.op_name
        << " max_rel_error " << std::scientific << std::setprecision(3) << r.max_rel_error
        << " tol " << r.tolerance << std::defaultfloat << " coords " << r.coordinates;
    if (r.unstable_skipped > 0) out << " (kink-skipped " << r.unstable_skipped << ")";
    out << "\n";
    if (!r.passed) ++failed;
  }
  if (failed > 0) {
    out << failed << " gradient check(s) failed:";
    for (const auto& r : reports)
      if (!r.passed) out << " " << r.op_name;
    out << "\n";
    return kExitCheckFailed;
  }
  out << "all " << reports.size() << " gradient checks passed\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"s3vos: spatial-semantic video object segmentation at desk scale"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  std::string gen_out, gen_spec;
  std::optional<int> seqs, frames, objects, height, width;
  std::optional<std::string> scenario;
  bool no_overlap = false;
  gen->add_option("--out", gen_out, "Output dataset root")->required();
  gen->add_option("--spec", gen_spec, "Config file with data.* keys");
  gen->add_option("--seqs", seqs, "Number of sequences");
  gen->add_option("--frames", frames, "Frames per sequence");
  gen->add_option("--objects", objects, "Objects per sequence (1..3)");
  gen->add_option("--height", height, "Frame height");
  gen->add_option("--width", width, "Frame width");
  gen->add_option("--scenario", scenario, "random, crossing, occlusion, part-split or mixed");
  gen->add_flag("--no-overlap", no_overlap, "Reject layouts where objects overlap");
  gen->add_option("--seed", seed, "Random seed (falls back to S3VOS_SEED)");
  gen->add_option("--set", sets, "Override a config key, key=value");

  // train
  auto* tr = app.add_subcommand("train", "Train on a dataset directory");
  std::string data_dir, ckpt_out, log_out;
  std::optional<int> iterations;
  std::optional<double> lr;
  std::vector<std::string> ablate;
  tr->add_option("--config", config_path, "Run config file");
  tr->add_option("--data", data_dir, "Dataset root")->required();
  tr->add_option("--out", ckpt_out, "Checkpoint path")->required();
  tr->add_option("--log", log_out, "Loss log CSV (default <out>.loss.csv)");
  tr->add_option("--iterations", iterations, "Training iterations");
  tr->add_option("--lr", lr, "Base learning rate");
  tr->add_option("--ablate", ablate, "Disable a component (e.g. disable_discriminative_query)");
  tr->add_option("--seed", seed, "Random seed (falls back to S3VOS_SEED)");
  tr->add_option("--set", sets, "Override a config key, key=value");

  // infer
  auto* inf = app.add_subcommand("infer", "Segment a sequence from its first-frame mask");
  std::string ckpt_in, frames_dir, init_mask, infer_out, infer_data;
  int jobs = 1;
  inf->add_option("--ckpt", ckpt_in, "Checkpoint")->required();
  inf->add_option("--frames", frames_dir, "Directory of frame PNGs");
  inf->add_option("--init-mask", init_mask, "Palette PNG for frame 0");
  inf->add_option("--data", infer_data, "Dataset root: infer every sequence");
  inf->add_option("--out", infer_out, "Output directory")->required();
  inf->add_option("--jobs", jobs, "Parallel sequences (default 1)");

  // eval
  auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
  std::string pred_dir, gt_dir, splits_path, report_path;
  double min_jf = 0.0;
  ev->add_option("--pred", pred_dir, "Prediction root")->required();
  ev->add_option("--gt", gt_dir, "Ground-truth root")->required();
  ev->add_option("--splits", splits_path, "JSON with seen/unseen sequence lists");
  ev->add_option("--report", report_path, "Report output (JSON)");
  ev->add_option("--min-jf", min_jf, "Exit 1 when J&F falls below this");
  ev->add_option("--jobs", jobs, "Parallel sequences (default 1)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  double tol = 1e-4;
  std::string op;
  bool inject_faulty = false;
  gc->add_option("--tol", tol, "Relative error tolerance for single ops");
  gc->add_option("--op", op, "Run only this registered op");
  gc->add_option("--seed", seed, "Random seed (falls back to S3VOS_SEED)");
  gc->add_flag("--inject-faulty", inject_faulty, "Add a wrong-gradient op as a negative control");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    RunConfig cfg;
    const auto s = resolve_seed(seed);
    if (*gen) {
      load_config(cfg, gen_spec);
      if (seqs) cfg.data.num_sequences = *seqs;
      if (frames) cfg.data.frames_per_seq = *frames;
      if (objects) cfg.data.num_objects = *objects;
      if (height) cfg.data.height = *height;
      if (width) cfg.data.width = *width;
      if (scenario) cfg.data.scenario = *scenario;
      if (no_overlap) cfg.data.allow_overlap = false;
      if (s) cfg.data.seed = *s;
      apply_sets(cfg, sets);
      return cmd_generate(cfg, gen_out, out);
    }
    if (*tr) {
      load_config(cfg, config_path);
      if (iterations) cfg.train.iterations = *iterations;
      if (lr) cfg.train.lr = *lr;
      if (s) cfg.train.seed = *s;
      apply_ablations(cfg, ablate);
      apply_sets(cfg, sets);
      return cmd_train(cfg, data_dir, ckpt_out, log_out, out);
    }
    if (*inf) {
      if (!fs::exists(ckpt_in)) throw UsageError("checkpoint not found: " + ckpt_in);
      const Model model = load_checkpoint(ckpt_in);
      if (!infer_data.empty()) return cmd_infer_dataset(model, infer_data, infer_out, jobs);
      if (frames_dir.empty() || init_mask.empty()) {
        throw UsageError("infer needs --frames and --init-mask, or --data");
      }
      return cmd_infer_one(model, frames_dir, init_mask, infer_out);
    }
    if (*ev) return cmd_eval(pred_dir, gt_dir, splits_path, report_path, min_jf, jobs, out);
    if (*gc) return cmd_gradcheck(tol, op, s.value_or(0), inject_faulty, out);
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    // Invalid specs and configs, unreadable or malformed files.
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace s3vos
