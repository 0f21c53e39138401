#pragma once

// Brute-force reference implementations used by the unit tests and the
// acceptance binary. They are written from the mathematical definitions with
// plain loops and share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "s3vos/tensor.hpp"

namespace oracle {

using s3vos::Tensor;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Softmax attention, one query row at a time. Masked-out keys (mask[j] == 0)
/// are skipped unless every key is masked out, in which case all are used.
inline Tensor attention(const Tensor& query, const Tensor& keys, const Tensor& values,
                        const Tensor& wq, const Tensor& wk, const Tensor& wv, std::size_t d,
                        const std::vector<std::uint8_t>* mask = nullptr) {
  const Tensor q = matmul(query, wq);
  const Tensor k = matmul(keys, wk);
  const Tensor v = matmul(values, wv);
  bool any = false;
  if (mask != nullptr)
    for (auto m : *mask) any = any || m != 0;
  Tensor out(q.rows(), v.cols());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<double> logit(k.rows());
    std::vector<bool> use(k.rows(), true);
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (mask != nullptr && any && (*mask)[j] == 0) use[j] = false;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      logit[j] = s / std::sqrt(static_cast<double>(d));
      if (use[j]) mx = std::max(mx, logit[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k.rows(); ++j)
      if (use[j]) z += std::exp(logit[j] - mx);
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (!use[j]) continue;
      const double a = std::exp(logit[j] - mx) / z;
      for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += a * v(j, c);
    }
  }
  return out;
}

/// Bilinear sample as a sum of tent functions over every texel:
/// sum_{y,x} max(0, 1-|px-x|) max(0, 1-|py-y|) map[y,x] with
/// px = x_norm*W - 0.5 (align-corners false); texels outside contribute 0.
inline std::vector<double> bilinear(const Tensor& map, std::size_t offset, int height, int width,
                                    double xn, double yn) {
  const double px = xn * width - 0.5;
  const double py = yn * height - 0.5;
  std::vector<double> out(map.cols(), 0.0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double w = std::max(0.0, 1.0 - std::abs(px - x)) * std::max(0.0, 1.0 - std::abs(py - y));
      if (w == 0.0) continue;
      const std::size_t r = offset + static_cast<std::size_t>(y) * width + x;
      for (std::size_t c = 0; c < map.cols(); ++c) out[c] += w * map(r, c);
    }
  return out;
}

struct OracleLevel {
  int height;
  int width;
};

/// Multi-scale deformable attention from the definition: per query, offsets
/// and logits are linear in the query, weights are one softmax over every
/// (head, level, point) slot, each slot samples the value-projected map of its
/// level at ref + offset / (W_l, H_l), and the sum is projected by w_out.
inline Tensor deformable(const Tensor& query, const Tensor& ref, const Tensor& value,
                         const std::vector<OracleLevel>& levels, const Tensor& w_offset,
                         const Tensor& b_offset, const Tensor& w_weight, const Tensor& b_weight,
                         const Tensor& w_value, const Tensor& w_out, int heads, int points) {
  const int nl = static_cast<int>(levels.size());
  const Tensor v = matmul(value, w_value);
  Tensor sampled(query.rows(), v.cols());
  for (std::size_t i = 0; i < query.rows(); ++i) {
    const int slots = heads * nl * points;
    std::vector<double> logit(static_cast<std::size_t>(slots));
    for (int s = 0; s < slots; ++s) {
      double acc = b_weight(0, static_cast<std::size_t>(s));
      for (std::size_t c = 0; c < query.cols(); ++c) acc += query(i, c) * w_weight(c, static_cast<std::size_t>(s));
      logit[static_cast<std::size_t>(s)] = acc;
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double l : logit) z += std::exp(l - mx);
    for (int h = 0; h < heads; ++h) {
      std::size_t level_offset = 0;
      for (int l = 0; l < nl; ++l) {
        for (int p = 0; p < points; ++p) {
          const std::size_t s = static_cast<std::size_t>((h * nl + l) * points + p);
          double ox = b_offset(0, 2 * s), oy = b_offset(0, 2 * s + 1);
          for (std::size_t c = 0; c < query.cols(); ++c) {
            ox += query(i, c) * w_offset(c, 2 * s);
            oy += query(i, c) * w_offset(c, 2 * s + 1);
          }
          const double a = std::exp(logit[s] - mx) / z;
          const auto smp = bilinear(v, level_offset, levels[static_cast<std::size_t>(l)].height,
                                    levels[static_cast<std::size_t>(l)].width,
                                    ref(i, 0) + ox / levels[static_cast<std::size_t>(l)].width,
                                    ref(i, 1) + oy / levels[static_cast<std::size_t>(l)].height);
          for (std::size_t c = 0; c < v.cols(); ++c) sampled(i, c) += a * smp[c];
        }
        level_offset += static_cast<std::size_t>(levels[static_cast<std::size_t>(l)].height) *
                        levels[static_cast<std::size_t>(l)].width;
      }
    }
  }
  return matmul(sampled, w_out);
}

/// Top-K readout: full sort of each row's scaled affinities (ties to the
/// lower index), softmax over the K best, weighted sum of values.
inline Tensor topk_readout(const Tensor& qk, const Tensor& keys, const Tensor& vals, int top_k) {
  Tensor out(qk.rows(), vals.cols());
  const double scale = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
  for (std::size_t i = 0; i < qk.rows(); ++i) {
    std::vector<std::pair<double, std::size_t>> aff;
    for (std::size_t j = 0; j < keys.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < keys.cols(); ++c) s += qk(i, c) * keys(j, c);
      aff.emplace_back(s * scale, j);
    }
    std::sort(aff.begin(), aff.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(top_k), aff.size());
    double z = 0.0;
    for (std::size_t r = 0; r < k; ++r) z += std::exp(aff[r].first - aff[0].first);
    for (std::size_t r = 0; r < k; ++r) {
      const double a = std::exp(aff[r].first - aff[0].first) / z;
      for (std::size_t c = 0; c < vals.cols(); ++c) out(i, c) += a * vals(aff[r].second, c);
    }
  }
  return out;
}

/// Soft aggregation in odds form: each object's share is proportional to
/// p/(1-p); background's to P/(1-P) with P = prod(1-p).
inline Tensor soft_aggregate(const Tensor& probs, double eps = 1e-7) {
  Tensor out(probs.rows(), probs.cols() + 1);
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    std::vector<double> odds(probs.cols() + 1);
    double bg = 1.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double p = std::min(std::max(probs(r, j), eps), 1.0 - eps);
      bg *= 1.0 - p;
      odds[j + 1] = p / (1.0 - p);
    }
    odds[0] = bg / (1.0 - bg);
    const double total = std::accumulate(odds.begin(), odds.end(), 0.0);
    for (std::size_t j = 0; j < odds.size(); ++j) out(r, j) = odds[j] / total;
  }
  return out;
}

inline double jaccard(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::vector<std::size_t> sa, sb, inter, uni;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]) sa.push_back(i);
    if (b[i]) sb.push_back(i);
  }
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

/// Boundary as foreground minus its 4-connected erosion on a zero-padded
/// copy of the mask.
inline std::vector<std::pair<int, int>> boundary_points(const std::vector<std::uint8_t>& m,
                                                        int height, int width) {
  std::vector<std::uint8_t> pad(static_cast<std::size_t>(height + 2) * (width + 2), 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      pad[static_cast<std::size_t>(y + 1) * (width + 2) + x + 1] =
          m[static_cast<std::size_t>(y) * width + x] ? 1 : 0;
  auto at = [&](int y, int x) { return pad[static_cast<std::size_t>(y) * (width + 2) + x]; };
  std::vector<std::pair<int, int>> pts;
  for (int y = 1; y <= height; ++y)
    for (int x = 1; x <= width; ++x) {
      const bool eroded = at(y, x) && at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1);
      if (at(y, x) && !eroded) pts.emplace_back(y - 1, x - 1);
    }
  return pts;
}

/// Boundary F with matching by exhaustive pairwise distance search.
inline double boundary_f(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                         int height, int width) {
  const auto pb = boundary_points(pred, height, width);
  const auto gb = boundary_points(gt, height, width);
  if (pb.empty() && gb.empty()) return 1.0;
  if (pb.empty() || gb.empty()) return 0.0;
  const double r = std::ceil(0.008 * std::hypot(height, width));
  auto matched = [r](const std::pair<int, int>& p, const std::vector<std::pair<int, int>>& set) {
    for (const auto& q : set) {
      const double dy = p.first - q.first, dx = p.second - q.second;
      if (dy * dy + dx * dx <= r * r) return true;
    }
    return false;
  };
  double pm = 0, gm = 0;
  for (const auto& p : pb) pm += matched(p, gb) ? 1 : 0;
  for (const auto& g : gb) gm += matched(g, pb) ? 1 : 0;
  const double prec = pm / static_cast<double>(pb.size());
  const double rec = gm / static_cast<double>(gb.size());
  return prec + rec == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
}

}  // namespace oracle
