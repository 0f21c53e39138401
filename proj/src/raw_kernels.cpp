#include "s3vos/raw_kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace s3vos::raw {

namespace {

// Work below this many multiply-adds stays on one thread; OpenMP fork cost
// dominates tiny desk-scale matrices.
constexpr std::size_t kParallelGrain = 1 << 15;

void gemm_serial(bool ta, bool tb, const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a(p, i) : a(i, p);
        const double bv = tb ? b(j, p) : b(p, j);
        s += av * bv;
      }
      c(i, j) += s;
    }
  }
}

void gemm_parallel(bool ta, bool tb, const Tensor& a, const Tensor& b, Tensor& c) {
  const long m = static_cast<long>(ta ? a.cols() : a.rows());
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  const bool big = static_cast<std::size_t>(m) * k * n > kParallelGrain;
  if (!tb) {
    // i-p-j order streams rows of B and C.
#pragma omp parallel for if (big) schedule(static)
    for (long i = 0; i < m; ++i) {
      double* crow = c.row(static_cast<std::size_t>(i));
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta ? a(p, static_cast<std::size_t>(i)) : a(static_cast<std::size_t>(i), p);
        if (av == 0.0) continue;
        const double* brow = b.row(p);
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
#pragma omp parallel for if (big) schedule(static)
    for (long i = 0; i < m; ++i) {
      double* crow = c.row(static_cast<std::size_t>(i));
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b.row(j);
        double s = 0.0;
        if (!ta) {
          const double* arow = a.row(static_cast<std::size_t>(i));
          for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) s += a(p, static_cast<std::size_t>(i)) * brow[p];
        }
        crow[j] += s;
      }
    }
  }
}

struct Corners {
  int x0, y0;
  double fx, fy;
};

Corners locate(const LevelGeom& level, double x, double y) {
  const double px = x * level.width - 0.5;
  const double py = y * level.height - 0.5;
  const double fx0 = std::floor(px);
  const double fy0 = std::floor(py);
  return {static_cast<int>(fx0), static_cast<int>(fy0), px - fx0, py - fy0};
}

inline const double* texel(const Tensor& map, const LevelGeom& level, int x, int y) {
  if (x < 0 || y < 0 || x >= level.width || y >= level.height) return nullptr;
  return map.row(level.offset + static_cast<std::size_t>(y) * level.width + x);
}

inline double* texel_mut(Tensor& map, const LevelGeom& level, int x, int y) {
  if (x < 0 || y < 0 || x >= level.width || y >= level.height) return nullptr;
  return map.row(level.offset + static_cast<std::size_t>(y) * level.width + x);
}

}  // namespace

void gemm(bool trans_a, bool trans_b, const Tensor& a, const Tensor& b, Tensor& c,
          bool accumulate, Exec exec) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw std::invalid_argument("gemm: inner dimension mismatch " + a.shape_str() + " x " +
                                b.shape_str());
  }
  if (!accumulate || c.rows() != m || c.cols() != n) {
    if (accumulate && !c.empty()) throw std::invalid_argument("gemm: output shape mismatch");
    c = Tensor(m, n);
  }
  if (exec == Exec::kSerial) {
    gemm_serial(trans_a, trans_b, a, b, c);
  } else {
    gemm_parallel(trans_a, trans_b, a, b, c);
  }
}

void sample_accumulate(const Tensor& map, const LevelGeom& level, double x, double y,
                       double weight, double* out) {
  const Corners k = locate(level, x, y);
  const std::size_t ch = map.cols();
  const double w[4] = {(1 - k.fx) * (1 - k.fy), k.fx * (1 - k.fy), (1 - k.fx) * k.fy,
                       k.fx * k.fy};
  const int dx[4] = {0, 1, 0, 1};
  const int dy[4] = {0, 0, 1, 1};
  for (int q = 0; q < 4; ++q) {
    const double* t = texel(map, level, k.x0 + dx[q], k.y0 + dy[q]);
    if (t == nullptr) continue;
    const double s = weight * w[q];
    for (std::size_t c = 0; c < ch; ++c) out[c] += s * t[c];
  }
}

SampleGrad sample_backward(const Tensor& map, const LevelGeom& level, double x, double y,
                           double weight, const double* out_grad, Tensor* map_grad) {
  const Corners k = locate(level, x, y);
  const std::size_t ch = map.cols();
  const double w[4] = {(1 - k.fx) * (1 - k.fy), k.fx * (1 - k.fy), (1 - k.fx) * k.fy,
                       k.fx * k.fy};
  const double dwdfx[4] = {-(1 - k.fy), (1 - k.fy), -k.fy, k.fy};
  const double dwdfy[4] = {-(1 - k.fx), -k.fx, (1 - k.fx), k.fx};
  const int dx[4] = {0, 1, 0, 1};
  const int dy[4] = {0, 0, 1, 1};
  SampleGrad g;
  for (int q = 0; q < 4; ++q) {
    const int tx = k.x0 + dx[q];
    const int ty = k.y0 + dy[q];
    const double* t = texel(map, level, tx, ty);
    if (t == nullptr) continue;
    double dot = 0.0;
    for (std::size_t c = 0; c < ch; ++c) dot += out_grad[c] * t[c];
    g.dweight += w[q] * dot;
    g.dx += weight * dwdfx[q] * dot;
    g.dy += weight * dwdfy[q] * dot;
    if (map_grad != nullptr) {
      double* tg = texel_mut(*map_grad, level, tx, ty);
      const double s = weight * w[q];
      for (std::size_t c = 0; c < ch; ++c) tg[c] += s * out_grad[c];
    }
  }
  g.dx *= level.width;
  g.dy *= level.height;
  return g;
}

Tensor bilinear_sample(const Tensor& map, int height, int width, const Tensor& points,
                       Exec exec) {
  if (points.cols() != 2) throw std::invalid_argument("bilinear_sample: points must be (P,2)");
  if (map.rows() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("bilinear_sample: map rows != height*width");
  }
  const LevelGeom level{height, width, 0};
  Tensor out(points.rows(), map.cols());
  const long n = static_cast<long>(points.rows());
  if (exec == Exec::kSerial) {
    // Four-corner reference written out longhand.
    for (long i = 0; i < n; ++i) {
      const double px = points(i, 0) * width - 0.5;
      const double py = points(i, 1) * height - 0.5;
      const int x0 = static_cast<int>(std::floor(px));
      const int y0 = static_cast<int>(std::floor(py));
      for (int yy = y0; yy <= y0 + 1; ++yy) {
        for (int xx = x0; xx <= x0 + 1; ++xx) {
          if (xx < 0 || yy < 0 || xx >= width || yy >= height) continue;
          const double wgt = (1.0 - std::abs(px - xx)) * (1.0 - std::abs(py - yy));
          for (std::size_t c = 0; c < map.cols(); ++c) {
            out(i, c) += wgt * map(static_cast<std::size_t>(yy) * width + xx, c);
          }
        }
      }
    }
    return out;
  }
  const bool big = points.rows() * map.cols() * 4 > kParallelGrain;
#pragma omp parallel for if (big) schedule(static)
  for (long i = 0; i < n; ++i) {
    sample_accumulate(map, level, points(i, 0), points(i, 1), 1.0, out.row(i));
  }
  return out;
}

Tensor deform_gather(const Tensor& value, const std::vector<LevelGeom>& levels,
                     const Tensor& ref, const Tensor& offsets, const Tensor& weights,
                     int heads, int points, Exec exec) {
  const std::size_t nl = levels.size();
  const std::size_t slots = static_cast<std::size_t>(heads) * nl * points;
  if (offsets.cols() != 2 * slots || weights.cols() != slots || ref.cols() != 2 ||
      offsets.rows() != ref.rows() || weights.rows() != ref.rows()) {
    throw std::invalid_argument("deform_gather: offsets/weights/ref shape mismatch");
  }
  Tensor out(ref.rows(), value.cols());
  const long n = static_cast<long>(ref.rows());
  auto one = [&](long i) {
    for (int h = 0; h < heads; ++h) {
      for (std::size_t l = 0; l < nl; ++l) {
        for (int p = 0; p < points; ++p) {
          const std::size_t s = (static_cast<std::size_t>(h) * nl + l) * points + p;
          const double x = ref(i, 0) + offsets(i, 2 * s) / levels[l].width;
          const double y = ref(i, 1) + offsets(i, 2 * s + 1) / levels[l].height;
          sample_accumulate(value, levels[l], x, y, weights(i, s), out.row(i));
        }
      }
    }
  };
  if (exec == Exec::kSerial) {
    for (long i = 0; i < n; ++i) one(i);
  } else {
    const bool big = ref.rows() * slots * value.cols() * 4 > kParallelGrain;
#pragma omp parallel for if (big) schedule(static)
    for (long i = 0; i < n; ++i) one(i);
  }
  return out;
}

Tensor im2col(const Tensor& x, int height, int width, int kernel, int stride, int pad) {
  const int ho = conv_out_size(height, kernel, stride, pad);
  const int wo = conv_out_size(width, kernel, stride, pad);
  const std::size_t cin = x.cols();
  Tensor cols(static_cast<std::size_t>(ho) * wo, static_cast<std::size_t>(kernel) * kernel * cin);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      double* dst = cols.row(static_cast<std::size_t>(oy) * wo + ox);
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          double* d = dst + (static_cast<std::size_t>(ky) * kernel + kx) * cin;
          if (iy < 0 || ix < 0 || iy >= height || ix >= width) continue;
          const double* src = x.row(static_cast<std::size_t>(iy) * width + ix);
          for (std::size_t c = 0; c < cin; ++c) d[c] = src[c];
        }
      }
    }
  }
  return cols;
}

void col2im(const Tensor& cols, int height, int width, int channels, int kernel, int stride,
            int pad, Tensor& x_grad) {
  const int ho = conv_out_size(height, kernel, stride, pad);
  const int wo = conv_out_size(width, kernel, stride, pad);
  const std::size_t cin = static_cast<std::size_t>(channels);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const double* src = cols.row(static_cast<std::size_t>(oy) * wo + ox);
      for (int ky = 0; ky < kernel; ++ky) {
        const int iy = oy * stride - pad + ky;
        for (int kx = 0; kx < kernel; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (iy < 0 || ix < 0 || iy >= height || ix >= width) continue;
          const double* s = src + (static_cast<std::size_t>(ky) * kernel + kx) * cin;
          double* d = x_grad.row(static_cast<std::size_t>(iy) * width + ix);
          for (std::size_t c = 0; c < cin; ++c) d[c] += s[c];
        }
      }
    }
  }
}

Tensor conv2d(const Tensor& x, int height, int width, const Tensor& weight, const Tensor& bias,
              int kernel, int stride, int pad, Exec exec) {
  const std::size_t cin = x.cols();
  if (x.rows() != static_cast<std::size_t>(height) * width ||
      weight.rows() != static_cast<std::size_t>(kernel) * kernel * cin ||
      bias.cols() != weight.cols()) {
    throw std::invalid_argument("conv2d: shape mismatch");
  }
  const int ho = conv_out_size(height, kernel, stride, pad);
  const int wo = conv_out_size(width, kernel, stride, pad);
  const std::size_t cout = weight.cols();
  if (exec == Exec::kSerial) {
    Tensor out(static_cast<std::size_t>(ho) * wo, cout);
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        for (std::size_t co = 0; co < cout; ++co) {
          double s = bias(0, co);
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= height || ix >= width) continue;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                s += x(static_cast<std::size_t>(iy) * width + ix, ci) *
                     weight((static_cast<std::size_t>(ky) * kernel + kx) * cin + ci, co);
              }
            }
          }
          out(static_cast<std::size_t>(oy) * wo + ox, co) = s;
        }
      }
    }
    return out;
  }
  const Tensor cols = im2col(x, height, width, kernel, stride, pad);
  Tensor out;
  gemm(false, false, cols, weight, out, false, Exec::kParallel);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* o = out.row(r);
    for (std::size_t c = 0; c < cout; ++c) o[c] += bias(0, c);
  }
  return out;
}

Tensor depthwise3x3(const Tensor& x, const std::vector<LevelGeom>& levels, const Tensor& weight,
                    const Tensor& bias, Exec exec) {
  if (weight.rows() != 9 || weight.cols() != x.cols() || bias.cols() != x.cols()) {
    throw std::invalid_argument("depthwise3x3: weight must be (9,C), bias (1,C)");
  }
  const std::size_t ch = x.cols();
  Tensor out(x.rows(), ch);
  for (const auto& lv : levels) {
    const long npix = static_cast<long>(lv.height) * lv.width;
    auto pixel = [&](long idx) {
      const int y = static_cast<int>(idx / lv.width);
      const int xx = static_cast<int>(idx % lv.width);
      double* o = out.row(lv.offset + static_cast<std::size_t>(idx));
      for (std::size_t c = 0; c < ch; ++c) o[c] = bias(0, c);
      for (int ky = -1; ky <= 1; ++ky) {
        for (int kx = -1; kx <= 1; ++kx) {
          const int iy = y + ky;
          const int ix = xx + kx;
          if (iy < 0 || ix < 0 || iy >= lv.height || ix >= lv.width) continue;
          const double* src = x.row(lv.offset + static_cast<std::size_t>(iy) * lv.width + ix);
          const double* w = weight.row(static_cast<std::size_t>((ky + 1) * 3 + (kx + 1)));
          for (std::size_t c = 0; c < ch; ++c) o[c] += w[c] * src[c];
        }
      }
    };
    if (exec == Exec::kSerial) {
      for (long i = 0; i < npix; ++i) pixel(i);
    } else {
      const bool big = static_cast<std::size_t>(npix) * ch * 9 > kParallelGrain;
#pragma omp parallel for if (big) schedule(static)
      for (long i = 0; i < npix; ++i) pixel(i);
    }
  }
  return out;
}

}  // namespace s3vos::raw
