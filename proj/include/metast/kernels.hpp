#pragma once

// Value-level tensor kernels. The graph in autodiff.hpp records these and
// composes their adjoints from the same set, so every kernel here has a
// counterpart whose derivative is again expressible by kernels here.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "metast/tensor.hpp"

namespace metast::kernel {

namespace detail {

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

template <class F>
Tensor map(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same(a, b, op);
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Conv operands are [H,W,C] or [B,H,W,C]; returns (batch, H, W, C).
struct ImageDims {
  std::size_t batch, height, width, channels;
};

inline ImageDims image_dims(const Tensor& t, const char* op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  throw ShapeError(std::string(op) + ": expected [H,W,C] or [B,H,W,C], got " +
                   shape_str(t.shape()));
}

inline Shape image_shape(const Tensor& like, std::size_t channels) {
  Shape s = like.shape();
  s.back() = channels;
  return s;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, "add", [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, "sub", [](double x, double y) { return x - y; });
}
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}
inline Tensor affine(const Tensor& x, double scale, double shift) {
  return detail::map(x, [=](double v) { return scale * v + shift; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::map(x, [](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}
inline Tensor tanh(const Tensor& x) {
  return detail::map(x, [](double v) { return std::tanh(v); });
}
inline Tensor relu(const Tensor& x) {
  return detail::map(x, [](double v) { return v > 0 ? v : 0.0; });
}
inline Tensor relu_mask(const Tensor& x) {
  return detail::map(x, [](double v) { return v > 0 ? 1.0 : 0.0; });
}
inline Tensor exp(const Tensor& x) {
  return detail::map(x, [](double v) { return std::exp(v); });
}
/// Natural log with inputs clamped from below at `eps`.
inline Tensor log(const Tensor& x, double eps) {
  return detail::map(x, [=](double v) { return std::log(std::max(v, eps)); });
}
inline Tensor square(const Tensor& x) {
  return detail::map(x, [](double v) { return v * v; });
}
inline Tensor reciprocal(const Tensor& x) {
  return detail::map(x, [](double v) { return 1.0 / v; });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::scalar(s);
}

/// Broadcasts a one-element tensor to `shape`.
inline Tensor fill(const Tensor& s, const Shape& shape) {
  return Tensor(shape, s.item());
}

/// Sums over `axis`, removing it.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(shape);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        dst[o * sp.inner + i] += src[(o * sp.extent + k) * sp.inner + i];
  return out;
}

/// Inserts a new axis of length `extent` at `axis`, repeating values.
inline Tensor broadcast_axis(const Tensor& x, std::size_t axis, std::size_t extent) {
  Shape shape = x.shape();
  if (axis > shape.size()) throw ShapeError("broadcast_axis: axis out of range");
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), extent);
  const auto sp = detail::split_axis(shape, axis);
  Tensor out(shape);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        dst[(o * sp.extent + k) * sp.inner + i] = src[o * sp.inner + i];
  return out;
}

/// Repeats `x` over leading axes so that the result has `shape`; the trailing
/// dims of `shape` must equal x's shape. This is the only broadcast (bias-add).
inline Tensor tile_leading(const Tensor& x, const Shape& shape) {
  if (shape.size() < x.rank() ||
      !std::equal(x.shape().begin(), x.shape().end(), shape.end() - static_cast<std::ptrdiff_t>(x.rank()))) {
    throw ShapeError("bias " + shape_str(x.shape()) + " does not match trailing dims of " +
                     shape_str(shape));
  }
  Tensor out(shape);
  const std::size_t n = x.size();
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < out.size(); o += n) std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(o));
  return out;
}

/// Sums leading axes away, keeping the trailing `trailing` shape.
inline Tensor sum_leading(const Tensor& x, const Shape& trailing) {
  const std::size_t n = shape_size(trailing);
  if (x.rank() < trailing.size() ||
      !std::equal(trailing.begin(), trailing.end(), x.shape().end() - static_cast<std::ptrdiff_t>(trailing.size()))) {
    throw ShapeError("sum_leading: " + shape_str(trailing) + " is not a suffix of " +
                     shape_str(x.shape()));
  }
  Tensor out(trailing);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < x.size(); o += n)
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[o + i];
  return out;
}

/// 2-D matrix product op(A)·op(B) where op transposes when the flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                     bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                     (trans_b ? "^T" : ""));
  }
  Tensor out(Shape{m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  const std::size_t lda = a.dim(1);
  const std::size_t ldb = b.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? A[p * lda + i] : A[i * lda + p];
      if (av == 0.0) continue;
      if (!trans_b) {
        const double* brow = B.data() + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * B[j * ldb + p];
      }
    }
  }
  return out;
}

/// Same-padded 2-D cross-correlation. input [H,W,Cin] or [B,H,W,Cin],
/// kernel [Kh,Kw,Cin,Cout] with odd Kh, Kw. No bias.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel) {
  const auto d = detail::image_dims(input, "conv2d");
  if (kernel.rank() != 4) throw ShapeError("conv2d: kernel must be [Kh,Kw,Cin,Cout]");
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t cout = kernel.dim(3);
  if (kernel.dim(2) != d.channels) {
    throw ShapeError("conv2d: input has " + std::to_string(d.channels) +
                     " channels but kernel expects " + std::to_string(kernel.dim(2)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel sizes must be odd");
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  const std::size_t cin = d.channels;
  Tensor out(detail::image_shape(input, cout));
  auto x = input.data();
  auto k = kernel.data();
  auto y = out.data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::ptrdiff_t i = 0; i < H; ++i)
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        double* yp = y.data() + ((b * d.height + static_cast<std::size_t>(i)) * d.width + static_cast<std::size_t>(j)) * cout;
        for (std::size_t ki = 0; ki < kh; ++ki) {
          const std::ptrdiff_t si = i + static_cast<std::ptrdiff_t>(ki) - ph;
          if (si < 0 || si >= H) continue;
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::ptrdiff_t sj = j + static_cast<std::ptrdiff_t>(kj) - pw;
            if (sj < 0 || sj >= W) continue;
            const double* xp = x.data() + ((b * d.height + static_cast<std::size_t>(si)) * d.width + static_cast<std::size_t>(sj)) * cin;
            const double* kp = k.data() + (ki * kw + kj) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = xp[ci];
              if (xv == 0.0) continue;
              const double* kr = kp + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) yp[co] += xv * kr[co];
            }
          }
        }
      }
  return out;
}

/// Adjoint of conv2d with respect to its input: grad [..,H,W,Cout] -> [..,H,W,Cin].
inline Tensor conv2d_input_grad(const Tensor& grad, const Tensor& kernel) {
  const auto d = detail::image_dims(grad, "conv2d_input_grad");
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t cin = kernel.dim(2), cout = kernel.dim(3);
  if (d.channels != cout) throw ShapeError("conv2d_input_grad: channel mismatch");
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  Tensor out(detail::image_shape(grad, cin));
  auto g = grad.data();
  auto k = kernel.data();
  auto dx = out.data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::ptrdiff_t i = 0; i < H; ++i)
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        const double* gp = g.data() + ((b * d.height + static_cast<std::size_t>(i)) * d.width + static_cast<std::size_t>(j)) * cout;
        for (std::size_t ki = 0; ki < kh; ++ki) {
          const std::ptrdiff_t si = i + static_cast<std::ptrdiff_t>(ki) - ph;
          if (si < 0 || si >= H) continue;
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::ptrdiff_t sj = j + static_cast<std::ptrdiff_t>(kj) - pw;
            if (sj < 0 || sj >= W) continue;
            double* xp = dx.data() + ((b * d.height + static_cast<std::size_t>(si)) * d.width + static_cast<std::size_t>(sj)) * cin;
            const double* kp = k.data() + (ki * kw + kj) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* kr = kp + ci * cout;
              double acc = 0.0;
              for (std::size_t co = 0; co < cout; ++co) acc += gp[co] * kr[co];
              xp[ci] += acc;
            }
          }
        }
      }
  return out;
}

/// Adjoint of conv2d with respect to its kernel.
inline Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad,
                                 std::size_t kh, std::size_t kw) {
  const auto d = detail::image_dims(input, "conv2d_kernel_grad");
  const auto dg = detail::image_dims(grad, "conv2d_kernel_grad");
  if (d.batch != dg.batch || d.height != dg.height || d.width != dg.width) {
    throw ShapeError("conv2d_kernel_grad: input/grad spatial mismatch");
  }
  const std::size_t cin = d.channels, cout = dg.channels;
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  Tensor out(Shape{kh, kw, cin, cout});
  auto x = input.data();
  auto g = grad.data();
  auto dk = out.data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::ptrdiff_t i = 0; i < H; ++i)
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        const double* gp = g.data() + ((b * d.height + static_cast<std::size_t>(i)) * d.width + static_cast<std::size_t>(j)) * cout;
        for (std::size_t ki = 0; ki < kh; ++ki) {
          const std::ptrdiff_t si = i + static_cast<std::ptrdiff_t>(ki) - ph;
          if (si < 0 || si >= H) continue;
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::ptrdiff_t sj = j + static_cast<std::ptrdiff_t>(kj) - pw;
            if (sj < 0 || sj >= W) continue;
            const double* xp = x.data() + ((b * d.height + static_cast<std::size_t>(si)) * d.width + static_cast<std::size_t>(sj)) * cin;
            double* kp = dk.data() + (ki * kw + kj) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = xp[ci];
              if (xv == 0.0) continue;
              double* kr = kp + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) kr[co] += xv * gp[co];
            }
          }
        }
      }
  return out;
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = src[base];
      for (std::size_t k = 1; k < sp.extent; ++k) mx = std::max(mx, src[base + k * sp.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double e = std::exp(src[base + k * sp.inner] - mx);
        dst[base + k * sp.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) dst[base + k * sp.inner] /= total;
    }
  return out;
}

inline Tensor concat(std::span<const Tensor* const> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0]->shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t a = 0; a < shape.size(); ++a) {
      if (a != axis && p->dim(a) != shape[a]) {
        throw ShapeError("concat: shape mismatch " + shape_str(p->shape()) + " vs " +
                         shape_str(shape));
      }
    }
    total += p->dim(axis);
  }
  shape[axis] = total;
  const auto sp = detail::split_axis(shape, axis);
  Tensor out(shape);
  auto dst = out.data();
  std::size_t offset = 0;
  for (const Tensor* p : parts) {
    const std::size_t ext = p->dim(axis);
    auto src = p->data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * ext * sp.inner), ext * sp.inner,
                  dst.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + offset) * sp.inner));
    offset += ext;
  }
  return out;
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t length) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (begin + length > sp.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + length) +
                     ") exceeds axis of length " + std::to_string(sp.extent));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  Tensor out(shape);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + begin) * sp.inner),
                length * sp.inner,
                dst.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  return out;
}

/// Zero tensor with axis length `full` holding `x` at [begin, begin+len).
inline Tensor embed(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t full) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (begin + sp.extent > full) throw ShapeError("embed: slice exceeds target axis");
  Shape shape = x.shape();
  shape[axis] = full;
  Tensor out(shape);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * sp.extent * sp.inner),
                sp.extent * sp.inner,
                dst.begin() + static_cast<std::ptrdiff_t>((o * full + begin) * sp.inner));
  return out;
}

}  // namespace metast::kernel
