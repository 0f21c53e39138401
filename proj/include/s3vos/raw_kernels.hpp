#pragma once

// Non-differentiable inner loops. Each hot loop exists twice: a plain serial
// reference used by tests and the benchmark, and an OpenMP version that the
// differentiable ops call. Parallel loops only split independent outputs, so
// results do not depend on the thread count.

#include <vector>

#include "s3vos/tensor.hpp"

namespace s3vos::raw {

enum class Exec { kSerial, kParallel };

/// C = op(A) * op(B) (+ C when accumulate).
void gemm(bool trans_a, bool trans_b, const Tensor& a, const Tensor& b, Tensor& c,
          bool accumulate, Exec exec = Exec::kParallel);

/// Geometry of one pyramid level stored as rows [offset, offset + h*w) of a
/// token matrix.
struct LevelGeom {
  int height = 0;
  int width = 0;
  std::size_t offset = 0;
};

/// Bilinear sample of a (h*w, C) map at normalized point (x, y); align-corners
/// false, zero padding. Adds `weight * sample` into `out` (length C).
void sample_accumulate(const Tensor& map, const LevelGeom& level, double x, double y,
                       double weight, double* out);

/// Backward of sample_accumulate: accumulates into map_grad (same layout as
/// map), returns d(weight*sample . out_grad)/dx, /dy and d/dweight.
struct SampleGrad {
  double dx = 0.0;
  double dy = 0.0;
  double dweight = 0.0;
};
SampleGrad sample_backward(const Tensor& map, const LevelGeom& level, double x, double y,
                           double weight, const double* out_grad, Tensor* map_grad);

/// (P, C) bilinear samples of a single (h*w, C) map.
Tensor bilinear_sample(const Tensor& map, int height, int width, const Tensor& points,
                       Exec exec = Exec::kParallel);

/// Deformable gather: out[i] = sum_{h,l,p} weights[i,(h,l,p)] *
/// sample(level l, ref[i] + offsets[i,(h,l,p)] / (W_l, H_l)).
/// offsets is (L, H*Lv*P*2) with (dx, dy) pairs, weights is (L, H*Lv*P).
Tensor deform_gather(const Tensor& value, const std::vector<LevelGeom>& levels,
                     const Tensor& ref, const Tensor& offsets, const Tensor& weights,
                     int heads, int points, Exec exec = Exec::kParallel);

/// Dense 2-D convolution on a channels-last (H*W, Cin) map. weight is
/// (k*k*Cin, Cout) ordered (ky, kx, cin); zero padding `pad`.
Tensor conv2d(const Tensor& x, int height, int width, const Tensor& weight,
              const Tensor& bias, int kernel, int stride, int pad,
              Exec exec = Exec::kParallel);

/// im2col for conv2d: rows are output pixels, columns (ky, kx, cin).
Tensor im2col(const Tensor& x, int height, int width, int kernel, int stride, int pad);

/// Scatter-add inverse of im2col.
void col2im(const Tensor& cols, int height, int width, int channels, int kernel,
            int stride, int pad, Tensor& x_grad);

/// Per-level depthwise 3x3 convolution (zero padding 1) over stacked levels.
/// weight is (9, C), bias (1, C).
Tensor depthwise3x3(const Tensor& x, const std::vector<LevelGeom>& levels,
                    const Tensor& weight, const Tensor& bias,
                    Exec exec = Exec::kParallel);

inline int conv_out_size(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace s3vos::raw
