#include "s3vos/eval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include "s3vos/data.hpp"

namespace s3vos {

double jaccard(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("jaccard: mask shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> mask_boundary(const std::vector<std::uint8_t>& mask, int height,
                                        int width) {
  if (mask.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("mask_boundary: size does not match dimensions");
  }
  auto on = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= height || x >= width) return false;
    return mask[static_cast<std::size_t>(y) * width + x] != 0;
  };
  std::vector<std::uint8_t> b(mask.size(), 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!on(y, x)) continue;
      const bool interior = on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1);
      if (!interior) b[static_cast<std::size_t>(y) * width + x] = 1;
    }
  }
  return b;
}

int boundary_radius(int height, int width, double tol_factor) {
  const double diag = std::sqrt(static_cast<double>(height) * height +
                                static_cast<double>(width) * width);
  return static_cast<int>(std::ceil(tol_factor * diag));
}

namespace {

std::vector<std::uint8_t> dilate_disk(const std::vector<std::uint8_t>& m, int height, int width,
                                      int radius) {
  std::vector<std::pair<int, int>> disk;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) disk.emplace_back(dy, dx);
  std::vector<std::uint8_t> out(m.size(), 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (m[static_cast<std::size_t>(y) * width + x] == 0) continue;
      for (const auto& [dy, dx] : disk) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= height || xx >= width) continue;
        out[static_cast<std::size_t>(yy) * width + xx] = 1;
      }
    }
  }
  return out;
}

}  // namespace

double boundary_f(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                  int height, int width, double tol_factor) {
  if (pred.size() != gt.size()) throw std::invalid_argument("boundary_f: mask shapes differ");
  const auto pb = mask_boundary(pred, height, width);
  const auto gb = mask_boundary(gt, height, width);
  const std::size_t np = static_cast<std::size_t>(std::count(pb.begin(), pb.end(), 1));
  const std::size_t ng = static_cast<std::size_t>(std::count(gb.begin(), gb.end(), 1));
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const int r = boundary_radius(height, width, tol_factor);
  const auto gd = dilate_disk(gb, height, width, r);
  const auto pd = dilate_disk(pb, height, width, r);
  std::size_t pm = 0, gm = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    if (pb[i] && gd[i]) ++pm;
    if (gb[i] && pd[i]) ++gm;
  }
  const double precision = static_cast<double>(pm) / static_cast<double>(np);
  const double recall = static_cast<double>(gm) / static_cast<double>(ng);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

SequenceScore score_sequence(const std::string& name,
                             const std::vector<std::vector<std::uint8_t>>& gt,
                             const std::vector<const std::vector<std::uint8_t>*>& pred,
                             int height, int width) {
  if (gt.size() != pred.size()) throw std::invalid_argument("score_sequence: frame count mismatch");
  std::set<int> ids;
  for (const auto& g : gt)
    for (auto v : g)
      if (v != 0) ids.insert(v);
  SequenceScore s;
  s.name = name;
  for (int id : ids) {
    ObjectScore o;
    for (std::size_t t = 1; t < gt.size(); ++t) {
      std::vector<std::uint8_t> gb(gt[t].size());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = gt[t][i] == id ? 1 : 0;
      if (pred[t] == nullptr) {
        ++o.frames;  // missing prediction scores 0
        continue;
      }
      std::vector<std::uint8_t> pb(pred[t]->size());
      for (std::size_t i = 0; i < pb.size(); ++i) pb[i] = (*pred[t])[i] == id ? 1 : 0;
      o.j += jaccard(pb, gb);
      o.f += boundary_f(pb, gb, height, width);
      ++o.frames;
    }
    if (o.frames > 0) {
      o.j /= o.frames;
      o.f /= o.frames;
    }
    o.jf = (o.j + o.f) / 2.0;
    s.objects[id] = o;
  }
  for (const auto& [id, o] : s.objects) {
    s.j += o.j;
    s.f += o.f;
  }
  if (!s.objects.empty()) {
    s.j /= static_cast<double>(s.objects.size());
    s.f /= static_cast<double>(s.objects.size());
  }
  s.jf = (s.j + s.f) / 2.0;
  return s;
}

namespace {

struct SeqResult {
  SequenceScore score;
  std::vector<std::string> missing;
  std::string error;
  bool skipped = false;
};

SeqResult evaluate_one(const std::filesystem::path& gt_seq, const std::filesystem::path& pred_seq,
                       const std::string& name) {
  namespace fs = std::filesystem;
  SeqResult r;
  std::vector<std::vector<std::uint8_t>> gt;
  std::vector<std::vector<std::uint8_t>> pred;
  std::vector<bool> present;
  int height = 0, width = 0;
  for (int t = 0;; ++t) {
    const fs::path gp = gt_seq / frame_name(t);
    if (!fs::exists(gp)) break;
    LabelMask g = read_mask(gp);
    if (t == 0) {
      height = g.height;
      width = g.width;
    } else if (g.height != height || g.width != width) {
      throw std::runtime_error(gp.string() + ": frame size changes within sequence");
    }
    gt.push_back(std::move(g.labels));
    const fs::path pp = pred_seq / frame_name(t);
    if (fs::exists(pp)) {
      LabelMask p = read_mask(pp);
      if (p.height != height || p.width != width) {
        throw std::runtime_error(pp.string() + ": prediction size " + std::to_string(p.height) +
                                 "x" + std::to_string(p.width) + " differs from ground truth");
      }
      pred.push_back(std::move(p.labels));
      present.push_back(true);
    } else {
      pred.emplace_back();
      present.push_back(false);
      if (t > 0) r.missing.push_back(pp.string());
    }
  }
  if (gt.size() < 2) {
    r.skipped = true;
    return r;
  }
  std::vector<const std::vector<std::uint8_t>*> ptrs(pred.size());
  for (std::size_t t = 0; t < pred.size(); ++t) ptrs[t] = present[t] ? &pred[t] : nullptr;
  r.score = score_sequence(name, gt, ptrs, height, width);
  return r;
}

double mean_over(const std::vector<SequenceScore>& seqs, const std::vector<std::string>& names,
                 bool use_j) {
  std::set<std::string> want(names.begin(), names.end());
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : seqs) {
    if (!want.count(s.name)) continue;
    for (const auto& [id, o] : s.objects) {
      total += use_j ? o.j : o.f;
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

Splits load_splits(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open splits file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("splits file " + path.string() + " is not valid JSON: " + e.what());
  }
  Splits s;
  s.seen = j.value("seen", std::vector<std::string>{});
  s.unseen = j.value("unseen", std::vector<std::string>{});
  return s;
}

EvalReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                    const std::optional<Splits>& splits, int jobs) {
  namespace fs = std::filesystem;
  fs::path gt_root = gt_dir;
  if (fs::is_directory(gt_dir / "Annotations")) gt_root = gt_dir / "Annotations";
  if (!fs::is_directory(gt_root)) {
    throw std::runtime_error("ground-truth directory not found: " + gt_dir.string());
  }
  if (!fs::is_directory(pred_dir)) {
    throw std::runtime_error("prediction directory not found: " + pred_dir.string());
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(gt_root))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());

  std::vector<SeqResult> results(names.size());
  const int n = static_cast<int>(names.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, jobs))
  for (int i = 0; i < n; ++i) {
    const auto& name = names[static_cast<std::size_t>(i)];
    try {
      results[static_cast<std::size_t>(i)] = evaluate_one(gt_root / name, pred_dir / name, name);
    } catch (const std::exception& e) {
      results[static_cast<std::size_t>(i)].error = e.what();
    }
  }

  EvalReport rep;
  for (auto& r : results) {
    if (!r.error.empty()) throw std::runtime_error(r.error);
    for (auto& m : r.missing) {
      std::cerr << "eval: missing prediction " << m << " (scored 0)\n";
      rep.missing.push_back(std::move(m));
    }
    if (!r.skipped) rep.sequences.push_back(std::move(r.score));
  }
  std::size_t count = 0;
  for (const auto& s : rep.sequences) {
    for (const auto& [id, o] : s.objects) {
      rep.j_mean += o.j;
      rep.f_mean += o.f;
      ++count;
    }
  }
  if (count > 0) {
    rep.j_mean /= static_cast<double>(count);
    rep.f_mean /= static_cast<double>(count);
  }
  rep.jf_mean = (rep.j_mean + rep.f_mean) / 2.0;
  if (splits) {
    rep.j_seen = mean_over(rep.sequences, splits->seen, true);
    rep.f_seen = mean_over(rep.sequences, splits->seen, false);
    rep.j_unseen = mean_over(rep.sequences, splits->unseen, true);
    rep.f_unseen = mean_over(rep.sequences, splits->unseen, false);
    rep.g = (rep.j_seen + rep.f_seen + rep.j_unseen + rep.f_unseen) / 4.0;
  }
  return rep;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["j_mean"] = j_mean;
  j["f_mean"] = f_mean;
  j["jf_mean"] = jf_mean;
  nlohmann::json per_seq = nlohmann::json::object();
  nlohmann::json per_obj = nlohmann::json::array();
  for (const auto& s : sequences) {
    per_seq[s.name] = {{"j", s.j}, {"f", s.f}, {"jf", s.jf}};
    for (const auto& [id, o] : s.objects) {
      per_obj.push_back({{"sequence", s.name},
                         {"object", id},
                         {"j", o.j},
                         {"f", o.f},
                         {"jf", o.jf},
                         {"frames", o.frames}});
    }
  }
  j["per_sequence"] = per_seq;
  j["per_object"] = per_obj;
  if (g) {
    j["g"] = *g;
    j["j_seen"] = j_seen;
    j["f_seen"] = f_seen;
    j["j_unseen"] = j_unseen;
    j["f_unseen"] = f_unseen;
  }
  j["missing"] = missing;
  return j;
}

}  // namespace s3vos
