#include "s3vos/ops.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace s3vos::ops {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.value().same_shape(b.value()), std::string(op) + ": shape mismatch " +
                                               a.value().shape_str() + " vs " +
                                               b.value().shape_str());
}

// Input i of a node during backward.
Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: " + a.value().shape_str() + " x " + b.value().shape_str());
  Tensor out;
  raw::gemm(false, false, a.value(), b.value(), out, false);
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& a = in(n, 0);
    Node& b = in(n, 1);
    if (a.requires_grad) raw::gemm(false, true, n.grad, b.value, a.grad_buffer(), true);
    if (b.requires_grad) raw::gemm(true, false, a.value, n.grad, b.grad_buffer(), true);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.cols() == b.cols(),
          "matmul_nt: " + a.value().shape_str() + " x " + b.value().shape_str() + "^T");
  Tensor out;
  raw::gemm(false, true, a.value(), b.value(), out, false);
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& a = in(n, 0);
    Node& b = in(n, 1);
    if (a.requires_grad) raw::gemm(false, false, n.grad, b.value, a.grad_buffer(), true);
    if (b.requires_grad) raw::gemm(true, false, n.grad, a.value, b.grad_buffer(), true);
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  axpy(out, b.value());
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) axpy(in(n, 0).grad_buffer(), n.grad);
    if (in(n, 1).requires_grad) axpy(in(n, 1).grad_buffer(), n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  axpy(out, b.value(), -1.0);
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (in(n, 0).requires_grad) axpy(in(n, 0).grad_buffer(), n.grad);
    if (in(n, 1).requires_grad) axpy(in(n, 1).grad_buffer(), n.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& a = in(n, 0);
    Node& b = in(n, 1);
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b.value[i];
    }
    if (b.requires_grad) {
      Tensor& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a.value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    Node& a = in(n, 0);
    Node& b = in(n, 1);
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / b.value[i];
    }
    if (b.requires_grad) {
      Tensor& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * n.value[i] / b.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.flat()) v *= s;
  return make_node(std::move(out), {a}, [s](Node& n) { axpy(in(n, 0).grad_buffer(), n.grad, s); });
}

Var add_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(),
          "add_row: row " + row.value().shape_str() + " vs " + a.value().shape_str());
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += row.value()(0, c);
  return make_node(std::move(out), {a, row}, [](Node& n) {
    if (in(n, 0).requires_grad) axpy(in(n, 0).grad_buffer(), n.grad);
    if (in(n, 1).requires_grad) {
      Tensor& g = in(n, 1).grad_buffer();
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) g(0, c) += n.grad(r, c);
    }
  });
}

Var mul_row(const Var& a, const Var& row) {
  require(row.rows() == 1 && row.cols() == a.cols(),
          "mul_row: row " + row.value().shape_str() + " vs " + a.value().shape_str());
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= row.value()(0, c);
  return make_node(std::move(out), {a, row}, [](Node& n) {
    Node& a = in(n, 0);
    Node& w = in(n, 1);
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += n.grad(r, c) * w.value(0, c);
    }
    if (w.requires_grad) {
      Tensor& g = w.grad_buffer();
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) g(0, c) += n.grad(r, c) * a.value(r, c);
    }
  });
}

Var mul_col(const Var& a, const Var& col) {
  require(col.cols() == 1 && col.rows() == a.rows(),
          "mul_col: col " + col.value().shape_str() + " vs " + a.value().shape_str());
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= col.value()(r, 0);
  return make_node(std::move(out), {a, col}, [](Node& n) {
    Node& a = in(n, 0);
    Node& w = in(n, 1);
    if (a.requires_grad) {
      Tensor& g = a.grad_buffer();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += n.grad(r, c) * w.value(r, 0);
    }
    if (w.requires_grad) {
      Tensor& g = w.grad_buffer();
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) g(r, 0) += n.grad(r, c) * a.value(r, c);
    }
  });
}

Var broadcast_row(const Var& row, std::size_t count) {
  require(row.rows() == 1, "broadcast_row: expected a single row");
  Tensor out(count, row.cols());
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t c = 0; c < row.cols(); ++c) out(r, c) = row.value()(0, c);
  return make_node(std::move(out), {row}, [](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t r = 0; r < n.grad.rows(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) g(0, c) += n.grad(r, c);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().flat()) s += v;
  return make_node(Tensor(1, 1, s), {a}, [](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (auto& v : g.flat()) v += n.grad[0];
  });
}

Var weighted_sum(const Var& a, const Tensor& w) {
  require(a.value().same_shape(w), "weighted_sum: weight shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a.value()[i];
  return make_node(Tensor(1, 1, s), {a}, [w](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * w[i];
  });
}

Var mean_rows(const Var& a) {
  require(a.rows() >= 1, "mean_rows: need at least one row");
  const double inv = 1.0 / static_cast<double>(a.rows());
  Tensor out(1, a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(0, c) += a.value()(r, c);
  for (auto& v : out.flat()) v *= inv;
  return make_node(std::move(out), {a}, [inv](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += inv * n.grad(0, c);
  });
}

Var sum_cols(const Var& a) {
  Tensor out(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(r, 0) += a.value()(r, c);
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += n.grad(r, 0);
  });
}

Var softmax_rows(const Var& a, const Tensor* mask) {
  const Tensor& x = a.value();
  if (mask != nullptr) require(mask->same_shape(x), "softmax_rows: mask shape mismatch");
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    bool any = false;
    if (mask != nullptr) {
      for (std::size_t c = 0; c < x.cols(); ++c) any = any || (*mask)(r, c) != 0.0;
    }
    const bool use_mask = mask != nullptr && any;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (use_mask && (*mask)(r, c) == 0.0) continue;
      mx = std::max(mx, x(r, c));
    }
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (use_mask && (*mask)(r, c) == 0.0) continue;
      out(r, c) = std::exp(x(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= z;
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    const Tensor& y = n.value;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += n.grad(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) g(r, c) += y(r, c) * (n.grad(r, c) - dot);
    }
  });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out = a.value();
  for (auto& v : out.flat()) {
    const double x = v;
    v = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& a = in(n, 0);
    Tensor& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = a.value[i];
      const double u = k * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
      g[i] += n.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.flat()) v = 1.0 / (1.0 + std::exp(-v));
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = n.value[i];
      g[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.flat()) v = std::tanh(v);
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
  });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Tensor& x = a.value();
  const std::size_t c = x.cols();
  Tensor out(x.rows(), c);
  Tensor inv_std(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x(r, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (x(r, j) - mean) * (x(r, j) - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    for (std::size_t j = 0; j < c; ++j) out(r, j) = (x(r, j) - mean) * is;
  }
  return make_node(std::move(out), {a}, [inv_std](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    const Tensor& y = n.value;
    const double cn = static_cast<double>(y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double mg = 0.0;
      double mgy = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) {
        mg += n.grad(r, j);
        mgy += n.grad(r, j) * y(r, j);
      }
      mg /= cn;
      mgy /= cn;
      for (std::size_t j = 0; j < y.cols(); ++j) {
        g(r, j) += inv_std(r, 0) * (n.grad(r, j) - mg - y(r, j) * mgy);
      }
    }
  });
}

Var row_normalize(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  Tensor norms(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c) * x(r, c);
    const double nrm = std::sqrt(s);
    norms(r, 0) = nrm;
    if (nrm == 0.0) continue;
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / nrm;
  }
  return make_node(std::move(out), {a}, [norms](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    const Tensor& y = n.value;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double nrm = norms(r, 0);
      if (nrm == 0.0) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += n.grad(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) g(r, c) += (n.grad(r, c) - y(r, c) * dot) / nrm;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out(total, c);
  std::size_t r0 = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.row(r0));
    r0 += p.rows();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    std::size_t r0 = 0;
    for (auto& ptr : n.inputs) {
      Node& p = *ptr;
      if (p.requires_grad) {
        Tensor& g = p.grad_buffer();
        const double* src = n.grad.row(r0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
      }
      r0 += p.value.rows();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const std::size_t rows = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out(rows, total);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, c0 + c) = p.value()(r, c);
    c0 += p.cols();
  }
  return make_node(std::move(out), parts, [](Node& n) {
    std::size_t c0 = 0;
    for (auto& ptr : n.inputs) {
      Node& p = *ptr;
      if (p.requires_grad) {
        Tensor& g = p.grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) += n.grad(r, c0 + c);
      }
      c0 += p.value.cols();
    }
  });
}

Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  require(start + count <= a.rows(), "slice_rows: range out of bounds");
  Tensor out(count, a.cols());
  std::copy(a.value().row(start), a.value().row(start) + count * a.cols(), out.data());
  return make_node(std::move(out), {a}, [start](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    double* dst = g.row(start);
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  require(start + count <= a.cols(), "slice_cols: range out of bounds");
  Tensor out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = a.value()(r, start + c);
  return make_node(std::move(out), {a}, [start](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t r = 0; r < n.grad.rows(); ++r)
      for (std::size_t c = 0; c < n.grad.cols(); ++c) g(r, start + c) += n.grad(r, c);
  });
}

Var gather_rows(const Var& a, const std::vector<std::size_t>& index) {
  Tensor out(index.size(), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < a.rows(), "gather_rows: index out of range");
    std::copy(a.value().row(index[i]), a.value().row(index[i]) + a.cols(), out.row(i));
  }
  return make_node(std::move(out), {a}, [index](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) {
      double* dst = g.row(index[i]);
      const double* src = n.grad.row(i);
      for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += src[c];
    }
  });
}

Var max_cols(const Var& a) {
  require(a.cols() >= 1, "max_cols: need at least one column");
  Tensor out(a.rows(), 1);
  std::vector<std::size_t> arg(a.rows(), 0);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double best = a.value()(r, 0);
    for (std::size_t c = 1; c < a.cols(); ++c) {
      if (a.value()(r, c) > best) {
        best = a.value()(r, c);
        arg[r] = c;
      }
    }
    out(r, 0) = best;
  }
  return make_node(std::move(out), {a}, [arg](Node& n) {
    Tensor& g = in(n, 0).grad_buffer();
    for (std::size_t r = 0; r < arg.size(); ++r) g(r, arg[r]) += n.grad(r, 0);
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out = a.value();
  for (auto& v : out.flat()) v = std::clamp(v, lo, hi);
  return make_node(std::move(out), {a}, [lo, hi](Node& n) {
    Node& a = in(n, 0);
    Tensor& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a.value[i] >= lo && a.value[i] <= hi) g[i] += n.grad[i];
    }
  });
}

Var log(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.flat()) v = std::log(v);
  return make_node(std::move(out), {a}, [](Node& n) {
    Node& a = in(n, 0);
    Tensor& g = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / a.value[i];
  });
}

Var conv2d(const Var& x, int height, int width, const Var& weight, const Var& bias, int kernel,
           int stride, int pad) {
  Tensor out = raw::conv2d(x.value(), height, width, weight.value(), bias.value(), kernel, stride,
                           pad);
  return make_node(std::move(out), {x, weight, bias},
                   [height, width, kernel, stride, pad](Node& n) {
                     Node& x = in(n, 0);
                     Node& w = in(n, 1);
                     Node& b = in(n, 2);
                     if (b.requires_grad) {
                       Tensor& gb = b.grad_buffer();
                       for (std::size_t r = 0; r < n.grad.rows(); ++r)
                         for (std::size_t c = 0; c < n.grad.cols(); ++c) gb(0, c) += n.grad(r, c);
                     }
                     if (w.requires_grad) {
                       const Tensor cols = raw::im2col(x.value, height, width, kernel, stride, pad);
                       raw::gemm(true, false, cols, n.grad, w.grad_buffer(), true);
                     }
                     if (x.requires_grad) {
                       Tensor dcols;
                       raw::gemm(false, true, n.grad, w.value, dcols, false);
                       raw::col2im(dcols, height, width, static_cast<int>(x.value.cols()), kernel,
                                   stride, pad, x.grad_buffer());
                     }
                   });
}

Var depthwise3x3(const Var& x, const std::vector<raw::LevelGeom>& levels, const Var& weight,
                 const Var& bias) {
  std::size_t total = 0;
  for (const auto& l : levels) total += static_cast<std::size_t>(l.height) * l.width;
  require(total == x.rows(), "depthwise3x3: levels do not cover the token count");
  Tensor out = raw::depthwise3x3(x.value(), levels, weight.value(), bias.value());
  return make_node(std::move(out), {x, weight, bias}, [levels](Node& n) {
    Node& x = in(n, 0);
    Node& w = in(n, 1);
    Node& b = in(n, 2);
    const std::size_t ch = x.value.cols();
    Tensor* gx = x.requires_grad ? &x.grad_buffer() : nullptr;
    Tensor* gw = w.requires_grad ? &w.grad_buffer() : nullptr;
    if (b.requires_grad) {
      Tensor& gb = b.grad_buffer();
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < ch; ++c) gb(0, c) += n.grad(r, c);
    }
    for (const auto& lv : levels) {
      for (int y = 0; y < lv.height; ++y) {
        for (int xx = 0; xx < lv.width; ++xx) {
          const double* go = n.grad.row(lv.offset + static_cast<std::size_t>(y) * lv.width + xx);
          for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
              const int iy = y + ky;
              const int ix = xx + kx;
              if (iy < 0 || ix < 0 || iy >= lv.height || ix >= lv.width) continue;
              const std::size_t src = lv.offset + static_cast<std::size_t>(iy) * lv.width + ix;
              const std::size_t k = static_cast<std::size_t>((ky + 1) * 3 + (kx + 1));
              for (std::size_t c = 0; c < ch; ++c) {
                if (gx != nullptr) (*gx)(src, c) += w.value(k, c) * go[c];
                if (gw != nullptr) (*gw)(k, c) += x.value(src, c) * go[c];
              }
            }
          }
        }
      }
    }
  });
}

namespace {

// Source index and weight pairs for 1-D bilinear resize with border clamp.
struct Tap {
  int i0, i1;
  double w0, w1;
};

std::vector<Tap> resize_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - f, f};
  }
  return taps;
}

}  // namespace

Var resize_bilinear(const Var& x, int height, int width, int out_height, int out_width) {
  require(x.rows() == static_cast<std::size_t>(height) * width,
          "resize_bilinear: rows != height*width");
  const auto ty = resize_taps(height, out_height);
  const auto tx = resize_taps(width, out_width);
  const std::size_t ch = x.cols();
  Tensor out(static_cast<std::size_t>(out_height) * out_width, ch);
  // Captured by value: the backward closure outlives this frame.
  auto for_each_tap = [ty, tx, width, out_height, out_width](auto&& fn) {
    for (int oy = 0; oy < out_height; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_width; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const std::size_t o = static_cast<std::size_t>(oy) * out_width + ox;
        fn(o, static_cast<std::size_t>(a.i0) * width + b.i0, a.w0 * b.w0);
        fn(o, static_cast<std::size_t>(a.i0) * width + b.i1, a.w0 * b.w1);
        fn(o, static_cast<std::size_t>(a.i1) * width + b.i0, a.w1 * b.w0);
        fn(o, static_cast<std::size_t>(a.i1) * width + b.i1, a.w1 * b.w1);
      }
    }
  };
  for_each_tap([&](std::size_t o, std::size_t s, double w) {
    if (w == 0.0) return;
    for (std::size_t c = 0; c < ch; ++c) out(o, c) += w * x.value()(s, c);
  });
  return make_node(std::move(out), {x}, [for_each_tap, ch](Node& n) {
    Tensor& g = n.inputs[0]->grad_buffer();
    for_each_tap([&](std::size_t o, std::size_t s, double w) {
      if (w == 0.0) return;
      for (std::size_t c = 0; c < ch; ++c) g(s, c) += w * n.grad(o, c);
    });
  });
}

Var bilinear_sample(const Var& map, int height, int width, const Var& points) {
  Tensor out = raw::bilinear_sample(map.value(), height, width, points.value());
  return make_node(std::move(out), {map, points}, [height, width](Node& n) {
    Node& m = in(n, 0);
    Node& p = in(n, 1);
    const raw::LevelGeom level{height, width, 0};
    Tensor* gm = m.requires_grad ? &m.grad_buffer() : nullptr;
    Tensor* gp = p.requires_grad ? &p.grad_buffer() : nullptr;
    for (std::size_t i = 0; i < p.value.rows(); ++i) {
      const auto sg =
          raw::sample_backward(m.value, level, p.value(i, 0), p.value(i, 1), 1.0, n.grad.row(i), gm);
      if (gp != nullptr) {
        (*gp)(i, 0) += sg.dx;
        (*gp)(i, 1) += sg.dy;
      }
    }
  });
}

Var deform_gather(const Var& value, const std::vector<raw::LevelGeom>& levels, const Tensor& ref,
                  const Var& offsets, const Var& weights, int heads, int points) {
  Tensor out = raw::deform_gather(value.value(), levels, ref, offsets.value(), weights.value(),
                                  heads, points);
  return make_node(
      std::move(out), {value, offsets, weights}, [levels, ref, heads, points](Node& n) {
        Node& v = in(n, 0);
        Node& o = in(n, 1);
        Node& w = in(n, 2);
        Tensor* gv = v.requires_grad ? &v.grad_buffer() : nullptr;
        Tensor* go = o.requires_grad ? &o.grad_buffer() : nullptr;
        Tensor* gw = w.requires_grad ? &w.grad_buffer() : nullptr;
        const std::size_t nl = levels.size();
        for (std::size_t i = 0; i < ref.rows(); ++i) {
          for (int h = 0; h < heads; ++h) {
            for (std::size_t l = 0; l < nl; ++l) {
              for (int p = 0; p < points; ++p) {
                const std::size_t s = (static_cast<std::size_t>(h) * nl + l) * points + p;
                const double x = ref(i, 0) + o.value(i, 2 * s) / levels[l].width;
                const double y = ref(i, 1) + o.value(i, 2 * s + 1) / levels[l].height;
                const auto sg =
                    raw::sample_backward(v.value, levels[l], x, y, w.value(i, s), n.grad.row(i), gv);
                if (go != nullptr) {
                  (*go)(i, 2 * s) += sg.dx / levels[l].width;
                  (*go)(i, 2 * s + 1) += sg.dy / levels[l].height;
                }
                if (gw != nullptr) (*gw)(i, s) += sg.dweight;
              }
            }
          }
        }
      });
}

Var soft_aggregate(const Var& probs, double eps) {
  const Tensor& p = probs.value();
  const std::size_t k = p.cols();
  Tensor out(p.rows(), k + 1);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double prod = 1.0;
    std::vector<double> logit(k + 1);
    for (std::size_t j = 0; j < k; ++j) {
      const double pj = std::clamp(p(r, j), eps, 1.0 - eps);
      prod *= (1.0 - pj);
      logit[j + 1] = std::log(pj / (1.0 - pj));
    }
    logit[0] = std::log(prod / (1.0 - prod));
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (std::size_t j = 0; j <= k; ++j) {
      out(r, j) = std::exp(logit[j] - mx);
      z += out(r, j);
    }
    for (std::size_t j = 0; j <= k; ++j) out(r, j) /= z;
  }
  return make_node(std::move(out), {probs}, [eps](Node& n) {
    Node& pn = in(n, 0);
    Tensor& g = pn.grad_buffer();
    const Tensor& y = n.value;
    const std::size_t k = pn.value.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      // dL/dlogit via the softmax Jacobian.
      double dot = 0.0;
      for (std::size_t j = 0; j <= k; ++j) dot += n.grad(r, j) * y(r, j);
      std::vector<double> dl(k + 1);
      for (std::size_t j = 0; j <= k; ++j) dl[j] = y(r, j) * (n.grad(r, j) - dot);
      double prod = 1.0;
      for (std::size_t j = 0; j < k; ++j) prod *= 1.0 - std::clamp(pn.value(r, j), eps, 1.0 - eps);
      for (std::size_t j = 0; j < k; ++j) {
        const double raw_p = pn.value(r, j);
        if (raw_p < eps || raw_p > 1.0 - eps) continue;
        const double dobj = 1.0 / (raw_p * (1.0 - raw_p));
        const double dbg = -1.0 / ((1.0 - raw_p) * (1.0 - prod));
        g(r, j) += dl[j + 1] * dobj + dl[0] * dbg;
      }
    }
  });
}

}  // namespace s3vos::ops
