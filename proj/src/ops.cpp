#include "msdm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "msdm/errors.hpp"
#include "msdm/kernels.hpp"

namespace msdm::ops {

namespace {

using Grad = std::vector<double>;

// Wraps a freshly computed buffer as an op output and records `fn` when the
// graph needs it.
Tensor finish(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
              Tape::BackwardFn fn) {
  check_finite(data, op);
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  if (!needs) return out;
  out.set_requires_grad(true);
  tape->record(std::move(inputs), out, std::move(fn));
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t r, const char* op) {
  if (a.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
  }
}

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
  std::vector<double> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return finish(op, a.shape(), std::move(out), {a}, [a, df](const TensorImpl& o) {
    Grad g(o.grad.size());
    const auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * df(x[i], o.data[i]);
    accumulate_grad(a, g);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm(m, n, k, a.ptr(), b.ptr(), out.data());
  return finish("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, n, k](const TensorImpl& o) {
    if (a.requires_grad()) {
      Grad ga(m * k);
      kernels::gemm_nt(m, k, n, o.grad.data(), b.ptr(), ga.data());  // dC * B^T
      accumulate_grad(a, ga);
    }
    if (b.requires_grad()) {
      Grad gb(k * n);
      kernels::gemm_tn(k, n, m, a.ptr(), o.grad.data(), gb.data());  // A^T * dC
      accumulate_grad(b, gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  kernels::transpose(r, c, a.ptr(), out.data());
  return finish("transpose", {c, r}, std::move(out), {a}, [a, r, c](const TensorImpl& o) {
    Grad g(r * c);
    kernels::transpose(c, r, o.grad.data(), g.data());
    accumulate_grad(a, g);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != out_f) {
    throw DimensionError("linear: bias length " + std::to_string(bias.numel()) + " vs " +
                         std::to_string(out_f));
  }
  std::vector<double> out(n * out_f);
  kernels::gemm_nt(n, out_f, in, x.ptr(), weight.ptr(), out.data());
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < out_f; ++j) out[r * out_f + j] += bv[j];
    }
  }
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return finish("linear", {n, out_f}, std::move(out), std::move(inputs),
                [x, weight, bias, n, in, out_f](const TensorImpl& o) {
                  if (x.requires_grad()) {
                    Grad gx(n * in);
                    kernels::gemm(n, in, out_f, o.grad.data(), weight.ptr(), gx.data());
                    accumulate_grad(x, gx);
                  }
                  if (weight.requires_grad()) {
                    Grad gw(out_f * in);
                    kernels::gemm_tn(out_f, in, n, o.grad.data(), x.ptr(), gw.data());
                    accumulate_grad(weight, gw);
                  }
                  if (bias.defined() && bias.requires_grad()) {
                    Grad gb(out_f, 0.0);
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t j = 0; j < out_f; ++j) gb[j] += o.grad[r * out_f + j];
                    }
                    accumulate_grad(bias, gb);
                  }
                });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return finish("add", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    accumulate_grad(a, o.grad);
    accumulate_grad(b, o.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return finish("sub", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    accumulate_grad(a, o.grad);
    if (b.requires_grad()) {
      Grad g(o.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -o.grad[i];
      accumulate_grad(b, g);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return finish("mul", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    if (a.requires_grad()) {
      Grad g(o.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * b[i];
      accumulate_grad(a, g);
    }
    if (b.requires_grad()) {
      Grad g(o.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * a[i];
      accumulate_grad(b, g);
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return finish("scale", a.shape(), std::move(out), {a}, [a, s](const TensorImpl& o) {
    Grad g(o.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = o.grad[i] * s;
    accumulate_grad(a, g);
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
  return finish("add_scalar", a.shape(), std::move(out), {a},
                [a](const TensorImpl& o) { accumulate_grad(a, o.grad); });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() < 1) throw DimensionError("add_channel_bias: scalar input");
  const std::size_t c = x.dim(0);
  if (b.numel() != c) {
    throw DimensionError("add_channel_bias: bias length " + std::to_string(b.numel()) +
                         " vs channels " + std::to_string(c));
  }
  const std::size_t inner = x.numel() / c;
  std::vector<double> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < inner; ++i) out[ch * inner + i] = x[ch * inner + i] + b[ch];
  }
  return finish("add_channel_bias", x.shape(), std::move(out), {x, b},
                [x, b, c, inner](const TensorImpl& o) {
                  accumulate_grad(x, o.grad);
                  if (b.requires_grad()) {
                    Grad g(c, 0.0);
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      for (std::size_t i = 0; i < inner; ++i) g[ch] += o.grad[ch * inner + i];
                    }
                    accumulate_grad(b, g);
                  }
                });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish("sum", {1}, {s}, {a}, [a](const TensorImpl& o) {
    accumulate_grad(a, Grad(a.numel(), o.grad[0]));
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return finish("mean", {1}, {s / n}, {a}, [a, n](const TensorImpl& o) {
    accumulate_grad(a, Grad(a.numel(), o.grad[0] / n));
  });
}

Tensor mean_rows(const Tensor& x) {
  require_rank(x, 2, "mean_rows");
  const std::size_t l = x.dim(0), d = x.dim(1);
  std::vector<double> out(d, 0.0);
  for (std::size_t r = 0; r < l; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[j] += x[r * d + j];
  }
  for (auto& v : out) v /= static_cast<double>(l);
  return finish("mean_rows", {d}, std::move(out), {x}, [x, l, d](const TensorImpl& o) {
    Grad g(l * d);
    for (std::size_t r = 0; r < l; ++r) {
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = o.grad[j] / static_cast<double>(l);
    }
    accumulate_grad(x, g);
  });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse_loss");
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return finish("mse_loss", {1}, {s / static_cast<double>(n)}, {a, b}, [a, b, n](const TensorImpl& o) {
    const double k = 2.0 * o.grad[0] / static_cast<double>(n);
    Grad g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = k * (a[i] - b[i]);
    accumulate_grad(a, g);
    if (b.requires_grad()) {
      for (auto& v : g) v = -v;
      accumulate_grad(b, g);
    }
  });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return finish("reshape", std::move(shape), std::move(out), {a},
                [a](const TensorImpl& o) { accumulate_grad(a, o.grad); });
}

Tensor concat0(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw DimensionError("concat0: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.numel();
  return finish("concat0", std::move(shape), std::move(out), {a, b}, [a, b, na](const TensorImpl& o) {
    accumulate_grad(a, std::span<const double>(o.grad).first(na));
    accumulate_grad(b, std::span<const double>(o.grad).subspan(na));
  });
}

Tensor slice2d(const Tensor& a, std::size_t rows, std::size_t cols) {
  require_rank(a, 2, "slice2d");
  if (rows == 0 || cols == 0 || rows > a.dim(0) || cols > a.dim(1)) {
    throw DimensionError("slice2d: block " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " outside " + shape_str(a.shape()));
  }
  const std::size_t src_cols = a.dim(1);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = a[r * src_cols + c];
  }
  return finish("slice2d", {rows, cols}, std::move(out), {a},
                [a, rows, cols, src_cols](const TensorImpl& o) {
                  Grad g(a.numel(), 0.0);
                  for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) g[r * src_cols + c] = o.grad[r * cols + c];
                  }
                  accumulate_grad(a, g);
                });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ContractError("softmax: axis " + std::to_string(axis) + " invalid for " +
                        shape_str(x.shape()));
  }
  const std::size_t extent = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (extent * inner);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < extent; ++j) mx = std::max(mx, x[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < extent; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < extent; ++j) out[base + j * inner] /= s;
    }
  }
  return finish("softmax", x.shape(), std::move(out), {x},
                [x, extent, inner, outer](const TensorImpl& o) {
                  Grad g(o.grad.size());
                  for (std::size_t ob = 0; ob < outer; ++ob) {
                    for (std::size_t in = 0; in < inner; ++in) {
                      const std::size_t base = ob * extent * inner + in;
                      double dotp = 0.0;
                      for (std::size_t j = 0; j < extent; ++j) {
                        dotp += o.grad[base + j * inner] * o.data[base + j * inner];
                      }
                      for (std::size_t j = 0; j < extent; ++j) {
                        const std::size_t idx = base + j * inner;
                        g[idx] = o.data[idx] * (o.grad[idx] - dotp);
                      }
                    }
                  }
                  accumulate_grad(x, g);
                });
}

namespace {

struct ConvGeometry {
  std::size_t c, h, w, co, k, stride, pad, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t pixels() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t stride,
                           std::size_t padding) {
  require_rank(input, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  ConvGeometry g{};
  g.c = input.dim(0);
  g.h = input.dim(1);
  g.w = input.dim(2);
  g.co = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.c || kernel.dim(3) != g.k) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " vs input " +
                         shape_str(input.shape()));
  }
  if (g.k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const auto extent = [&](std::size_t n) {
    const std::size_t padded = n + 2 * padding;
    if (padded < g.k || (padded - g.k) % stride != 0) {
      throw DimensionError("conv2d: non-integral output extent for size " + std::to_string(n) +
                           ", k=" + std::to_string(g.k) + ", stride=" + std::to_string(stride) +
                           ", padding=" + std::to_string(padding));
    }
    return (padded - g.k) / stride + 1;
  };
  g.oh = extent(g.h);
  g.ow = extent(g.w);
  return g;
}

// cols[(c*k + ky)*k + kx][oy*ow + ox]
std::vector<double> im2col(const ConvGeometry& g, const double* x) {
  std::vector<double> cols(g.patch() * g.pixels(), 0.0);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols.data() + ((c * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            row[oy * g.ow + ox] = x[(c * g.h + iy) * g.w + ix];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_accumulate(const ConvGeometry& g, const double* cols, double* dx) {
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * g.pixels();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv2d(input, kernel, Tensor{}, stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  if (bias.defined() && bias.numel() != g.co) {
    throw DimensionError("conv2d: bias length " + std::to_string(bias.numel()) + " vs " +
                         std::to_string(g.co));
  }
  const bool direct = g.k == 1 && g.stride == 1 && g.pad == 0;
  std::vector<double> cols;
  if (!direct) cols = im2col(g, input.ptr());
  const double* colp = direct ? input.ptr() : cols.data();
  std::vector<double> out(g.co * g.pixels());
  kernels::gemm(g.co, g.pixels(), g.patch(), kernel.ptr(), colp, out.data());
  if (bias.defined()) {
    for (std::size_t o = 0; o < g.co; ++o) {
      for (std::size_t p = 0; p < g.pixels(); ++p) out[o * g.pixels() + p] += bias[o];
    }
  }
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  // The im2col buffer is rebuilt in backward instead of being kept alive for
  // the whole tape.
  return finish("conv2d", {g.co, g.oh, g.ow}, std::move(out), std::move(inputs),
                [input, kernel, bias, g, direct](const TensorImpl& o) {
                  if (kernel.requires_grad()) {
                    std::vector<double> cols;
                    if (!direct) cols = im2col(g, input.ptr());
                    const double* colp = direct ? input.ptr() : cols.data();
                    Grad gk(g.co * g.patch());
                    kernels::gemm_nt(g.co, g.patch(), g.pixels(), o.grad.data(), colp, gk.data());
                    accumulate_grad(kernel, gk);
                  }
                  if (input.requires_grad()) {
                    Grad gcols(g.patch() * g.pixels());
                    kernels::gemm_tn(g.patch(), g.pixels(), g.co, kernel.ptr(), o.grad.data(),
                                     gcols.data());
                    if (direct) {
                      accumulate_grad(input, gcols);
                    } else {
                      Grad gx(input.numel(), 0.0);
                      col2im_accumulate(g, gcols.data(), gx.data());
                      accumulate_grad(input, gx);
                    }
                  }
                  if (bias.defined() && bias.requires_grad()) {
                    Grad gb(g.co, 0.0);
                    for (std::size_t oc = 0; oc < g.co; ++oc) {
                      for (std::size_t p = 0; p < g.pixels(); ++p) gb[oc] += o.grad[oc * g.pixels() + p];
                    }
                    accumulate_grad(bias, gb);
                  }
                });
}

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 2) throw DimensionError("group_norm: expected [C x ...] input");
  const std::size_t c = x.dim(0);
  if (groups == 0 || c % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("group_norm: gain/bias length must equal channel count");
  }
  const std::size_t spatial = x.numel() / c;
  const std::size_t per_group = (c / groups) * spatial;
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(groups);
  std::vector<double> out(x.numel());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t begin = gi * per_group;
    double mu = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) mu += x[begin + i];
    mu /= static_cast<double>(per_group);
    double var = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) {
      const double d = x[begin + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(per_group);
    const double is = 1.0 / std::sqrt(var + kGroupNormEps);
    inv_std[gi] = is;
    for (std::size_t i = 0; i < per_group; ++i) xhat[begin + i] = (x[begin + i] - mu) * is;
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t s = 0; s < spatial; ++s) {
      const std::size_t idx = ch * spatial + s;
      out[idx] = gain[ch] * xhat[idx] + bias[ch];
    }
  }
  return finish("group_norm", x.shape(), std::move(out), {x, gain, bias},
                [x, gain, bias, groups, c, spatial, per_group, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](const TensorImpl& o) {
                  if (gain.requires_grad() || bias.requires_grad()) {
                    Grad gg(c, 0.0), gb(c, 0.0);
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      for (std::size_t s = 0; s < spatial; ++s) {
                        const std::size_t idx = ch * spatial + s;
                        gg[ch] += o.grad[idx] * xhat[idx];
                        gb[ch] += o.grad[idx];
                      }
                    }
                    accumulate_grad(gain, gg);
                    accumulate_grad(bias, gb);
                  }
                  if (x.requires_grad()) {
                    Grad gx(x.numel());
                    const std::size_t cg = c / groups;
                    for (std::size_t gi = 0; gi < groups; ++gi) {
                      const std::size_t begin = gi * per_group;
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t i = 0; i < per_group; ++i) {
                        const std::size_t idx = begin + i;
                        const double d = o.grad[idx] * gain[gi * cg + i / spatial];
                        mean_d += d;
                        mean_dx += d * xhat[idx];
                      }
                      mean_d /= static_cast<double>(per_group);
                      mean_dx /= static_cast<double>(per_group);
                      for (std::size_t i = 0; i < per_group; ++i) {
                        const std::size_t idx = begin + i;
                        const double d = o.grad[idx] * gain[gi * cg + i / spatial];
                        gx[idx] = inv_std[gi] * (d - mean_d - xhat[idx] * mean_dx);
                      }
                    }
                    accumulate_grad(x, gx);
                  }
                });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 3, "upsample_nearest2x");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(c * 4 * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
      }
    }
  }
  return finish("upsample_nearest2x", {c, 2 * h, 2 * w}, std::move(out), {x},
                [x, c, h, w](const TensorImpl& o) {
                  Grad g(c * h * w, 0.0);
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t y = 0; y < 2 * h; ++y) {
                      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                        g[(ch * h + y / 2) * w + xx / 2] += o.grad[(ch * 2 * h + y) * 2 * w + xx];
                      }
                    }
                  }
                  accumulate_grad(x, g);
                });
}

Tensor avg_pool2x(const Tensor& x) {
  require_rank(x, 3, "avg_pool2x");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw DimensionError("avg_pool2x: odd spatial extent " + shape_str(x.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* p = x.ptr() + (ch * h + 2 * y) * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return finish("avg_pool2x", {c, oh, ow}, std::move(out), {x}, [x, c, h, w, oh, ow](const TensorImpl& o) {
    Grad g(c * h * w);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double v = 0.25 * o.grad[(ch * oh + y) * ow + xx];
          double* p = g.data() + (ch * h + 2 * y) * w + 2 * xx;
          p[0] = v;
          p[1] = v;
          p[w] = v;
          p[w + 1] = v;
        }
      }
    }
    accumulate_grad(x, g);
  });
}

}  // namespace msdm::ops
