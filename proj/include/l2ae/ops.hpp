#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "blas.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace l2ae {

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

/// C[m×n] = A[m×k] · B[k×n]; dA = dC·Bᵀ, dB = Aᵀ·dC.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape({a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  blas::gemm<T>(false, false, m, n, k, T{1}, av.data(), k, bv.data(), n, T{0}, out.data(), n);
  const std::size_t ia = a.index, ib = b.index;
  return tape.record(std::move(out), {a, b}, [ia, ib, m, n, k](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ia)) {
      const auto& bv = t.value(Var<T>{&t, ib});
      blas::gemm<T>(false, true, m, k, n, T{1}, g.data(), n, bv.data(), n, T{1},
                    t.grad_buffer(ia).data(), k);
    }
    if (t.requires_grad(ib)) {
      const auto& av = t.value(Var<T>{&t, ia});
      blas::gemm<T>(true, false, k, n, m, T{1}, av.data(), k, g.data(), n, T{1},
                    t.grad_buffer(ib).data(), n);
    }
  });
}

/// Adds a bias vector along the last axis (dense features or NHWC channels).
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  auto& tape = detail::same_tape({x, bias});
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.rank() != 1 || xv.rank() < 1 || xv.shape().back() != bv.dim(0))
    throw DimensionError("bias " + shape_str(bv.shape()) + " does not match last axis of " +
                         shape_str(xv.shape()));
  const std::size_t f = bv.dim(0), rows = xv.size() / f;
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] += bv[j];
  const std::size_t ix = x.index, ib = bias.index;
  return tape.record(std::move(out), {x, bias}, [ix, ib, f, rows](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(ix)) {
      auto& gx = t.grad_buffer(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < f; ++j) gb[j] += g[r * f + j];
    }
  });
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto& tape = *x.tape;
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.index;
  return tape.record(std::move(out), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Elementwise product of equal-shaped tensors.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape({a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape())
    throw DimensionError("mul shape mismatch: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.index, ib = b.index;
  return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = t.value(Var<T>{&t, ia});
    const auto& bv = t.value(Var<T>{&t, ib});
    if (t.requires_grad(ia)) {
      auto& ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

/// Scalar sum of all elements.
template <class T>
Var<T> sum(Var<T> x) {
  auto& tape = *x.tape;
  const auto& xv = x.value();
  T acc{0};
  for (auto v : xv.values()) acc += v;
  const std::size_t ix = x.index;
  return tape.record(Tensor<T>(Shape{}, std::vector<T>{acc}), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

// ---------------------------------------------------------------------------
// Convolution (NHWC activations, [kh, kw, C_in, C_out] kernels)
// ---------------------------------------------------------------------------

enum class Padding { same, valid };

/// Spatial bookkeeping of one conv2d application.
struct ConvGeometry {
  std::size_t batch = 0, in_h = 0, in_w = 0, in_c = 0;
  std::size_t out_h = 0, out_w = 0;
  std::size_t kernel_h = 0, kernel_w = 0;
  std::size_t stride = 1;
  std::size_t pad_top = 0, pad_left = 0;

  std::size_t patch() const { return kernel_h * kernel_w * in_c; }
  std::size_t out_positions() const { return batch * out_h * out_w; }
};

/// Output size of a conv along one axis; same padding gives ceil(in/stride).
inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  if (padding == Padding::same) return (in + stride - 1) / stride;
  if (in < kernel) return 0;
  return (in - kernel) / stride + 1;
}

inline ConvGeometry conv_geometry(std::size_t batch, std::size_t h, std::size_t w, std::size_t c,
                                  std::size_t kh, std::size_t kw, std::size_t stride, Padding padding) {
  if (stride < 1) throw ConfigError("conv stride must be >= 1");
  ConvGeometry g;
  g.batch = batch;
  g.in_h = h;
  g.in_w = w;
  g.in_c = c;
  g.kernel_h = kh;
  g.kernel_w = kw;
  g.stride = stride;
  g.out_h = conv_out_size(h, kh, stride, padding);
  g.out_w = conv_out_size(w, kw, stride, padding);
  if (g.out_h == 0 || g.out_w == 0)
    throw ConfigError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " does not fit input " + std::to_string(h) + "x" + std::to_string(w));
  if (padding == Padding::same) {
    const std::size_t ph = std::max<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>((g.out_h - 1) * stride + kh) - static_cast<std::ptrdiff_t>(h), 0);
    const std::size_t pw = std::max<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>((g.out_w - 1) * stride + kw) - static_cast<std::ptrdiff_t>(w), 0);
    g.pad_top = ph / 2;
    g.pad_left = pw / 2;
  }
  return g;
}

namespace detail {

/// cols[(n, oy, ox), (ky, kx, c)] = x[n, oy*s + ky - pad_top, ox*s + kx - pad_left, c] (0 outside).
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* dst = cols + ((n * g.out_h + oy) * g.out_w + ox) * patch;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx, dst += g.in_c) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                ix >= static_cast<std::ptrdiff_t>(g.in_w)) {
              std::fill(dst, dst + g.in_c, T{0});
            } else {
              const T* src = x + ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
              std::copy(src, src + g.in_c, dst);
            }
          }
        }
      }
}

/// Adjoint of im2col: scatter-adds patches back into x.
template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* x) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* src = cols + ((n * g.out_h + oy) * g.out_w + ox) * patch;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx, src += g.in_c) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) ||
                ix >= static_cast<std::ptrdiff_t>(g.in_w))
              continue;
            T* dst = x + ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
            for (std::size_t c = 0; c < g.in_c; ++c) dst[c] += src[c];
          }
        }
      }
}

inline void check_kernel(const Shape& w) {
  if (w.size() != 4) throw DimensionError("conv kernel must be [kh, kw, C_in, C_out], got " + shape_str(w));
}

}  // namespace detail

/// Cross-correlation of x[N×H×W×C_in] with w[kh×kw×C_in×C_out].
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride, Padding padding = Padding::same) {
  auto& tape = detail::same_tape({x, w});
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::check_kernel(wv.shape());
  if (xv.rank() != 4) throw DimensionError("conv2d input must be NHWC, got " + shape_str(xv.shape()));
  if (xv.dim(3) != wv.dim(2))
    throw DimensionError("conv2d channel mismatch: input " + shape_str(xv.shape()) + " vs kernel " +
                         shape_str(wv.shape()));
  const auto g = conv_geometry(xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(1), stride, padding);
  const std::size_t c_out = wv.dim(3);
  std::vector<T> cols(g.out_positions() * g.patch());
  detail::im2col(xv.data(), g, cols.data());
  Tensor<T> out({g.batch, g.out_h, g.out_w, c_out});
  blas::gemm<T>(false, false, g.out_positions(), c_out, g.patch(), T{1}, cols.data(), g.patch(),
                wv.data(), c_out, T{0}, out.data(), c_out);
  const std::size_t ix = x.index, iw = w.index;
  return tape.record(std::move(out), {x, w},
                     [ix, iw, g, c_out, cols = std::move(cols)](Tape<T>& t, const Tensor<T>& gy) {
                       const std::size_t m = g.out_positions(), k = g.patch();
                       if (t.requires_grad(iw))
                         blas::gemm<T>(true, false, k, c_out, m, T{1}, cols.data(), k, gy.data(), c_out,
                                       T{1}, t.grad_buffer(iw).data(), c_out);
                       if (t.requires_grad(ix)) {
                         const auto& wv = t.value(Var<T>{&t, iw});
                         std::vector<T> dcols(m * k);
                         blas::gemm<T>(false, true, m, k, c_out, T{1}, gy.data(), c_out, wv.data(), c_out,
                                       T{0}, dcols.data(), k);
                         detail::col2im_add(dcols.data(), g, t.grad_buffer(ix).data());
                       }
                     });
}

/// Adjoint of conv2d: maps x[N×h×w×C_x] to [N×H×W×C_y] where (H, W) = target and
/// conv2d over an H×W input with the same kernel w[kh×kw×C_y×C_x], stride and
/// padding produces h×w.
template <class T>
Var<T> conv2d_transpose(Var<T> x, Var<T> w, std::size_t stride, std::pair<std::size_t, std::size_t> target,
                        Padding padding = Padding::same) {
  auto& tape = detail::same_tape({x, w});
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::check_kernel(wv.shape());
  if (xv.rank() != 4)
    throw DimensionError("conv2d_transpose input must be NHWC, got " + shape_str(xv.shape()));
  if (xv.dim(3) != wv.dim(3))
    throw DimensionError("conv2d_transpose channel mismatch: input " + shape_str(xv.shape()) + " vs kernel " +
                         shape_str(wv.shape()));
  if (target.first == 0 || target.second == 0) throw ConfigError("conv2d_transpose target must be positive");
  const auto g = conv_geometry(xv.dim(0), target.first, target.second, wv.dim(2), wv.dim(0), wv.dim(1), stride,
                               padding);
  if (g.out_h != xv.dim(1) || g.out_w != xv.dim(2))
    throw ConfigError("conv2d_transpose target " + std::to_string(target.first) + "x" +
                      std::to_string(target.second) + " is unreachable from input " + shape_str(xv.shape()) +
                      " with stride " + std::to_string(stride));
  const std::size_t c_x = wv.dim(3);
  const std::size_t m = g.out_positions(), k = g.patch();
  std::vector<T> cols(m * k);
  blas::gemm<T>(false, true, m, k, c_x, T{1}, xv.data(), c_x, wv.data(), c_x, T{0}, cols.data(), k);
  Tensor<T> out({g.batch, g.in_h, g.in_w, g.in_c});
  detail::col2im_add(cols.data(), g, out.data());
  const std::size_t ix = x.index, iw = w.index;
  return tape.record(std::move(out), {x, w}, [ix, iw, g, c_x](Tape<T>& t, const Tensor<T>& gy) {
    const std::size_t m = g.out_positions(), k = g.patch();
    std::vector<T> gcols(m * k);
    detail::im2col(gy.data(), g, gcols.data());
    if (t.requires_grad(ix)) {
      const auto& wv = t.value(Var<T>{&t, iw});
      blas::gemm<T>(false, false, m, c_x, k, T{1}, gcols.data(), k, wv.data(), c_x, T{1},
                    t.grad_buffer(ix).data(), c_x);
    }
    if (t.requires_grad(iw)) {
      const auto& xv = t.value(Var<T>{&t, ix});
      blas::gemm<T>(true, false, k, c_x, m, T{1}, gcols.data(), k, xv.data(), c_x, T{1},
                    t.grad_buffer(iw).data(), c_x);
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// max(x, 0) for slope 0; slope·x below zero otherwise. Derivative at 0 is 0.
template <class T>
Var<T> leaky_relu(Var<T> x, T slope) {
  auto& tape = *x.tape;
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : (v < T{0} ? slope * v : T{0});
  const std::size_t ix = x.index;
  return tape.record(std::move(out), {x}, [ix, slope](Tape<T>& t, const Tensor<T>& g) {
    const auto& xv = t.value(Var<T>{&t, ix});
    auto& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      gx[i] += xv[i] > T{0} ? g[i] : (xv[i] < T{0} ? slope * g[i] : T{0});
  }, "leaky_relu");
}

template <class T>
Var<T> relu(Var<T> x) {
  return leaky_relu(x, T{0});
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

/// Floor on the row norm in l2_normalize.
inline constexpr double kL2Epsilon = 1e-12;
/// Variance epsilon shared by batch and layer normalization.
inline constexpr double kNormEpsilon = 1e-5;
/// Weight of the previous running statistic in batch normalization.
inline constexpr double kBatchNormMomentum = 0.9;

/// Divides each row of x[N×d] by max(‖row‖₂, 1e-12).
template <class T>
Var<T> l2_normalize(Var<T> x) {
  auto& tape = *x.tape;
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("l2_normalize expects [N x d], got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  Tensor<T> out = xv;
  std::vector<T> denom(n);
  for (std::size_t r = 0; r < n; ++r) {
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += xv(r, j) * xv(r, j);
    denom[r] = std::max<T>(std::sqrt(ss), static_cast<T>(kL2Epsilon));
    for (std::size_t j = 0; j < d; ++j) out(r, j) /= denom[r];
  }
  const std::size_t ix = x.index, io = tape.size();
  return tape.record(std::move(out), {x}, [ix, io, n, d, denom = std::move(denom)](Tape<T>& t, const Tensor<T>& g) {
    const auto& y = t.value(Var<T>{&t, io});
    auto& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < n; ++r) {
      const bool clamped = denom[r] <= static_cast<T>(kL2Epsilon);
      T dot{0};
      if (!clamped)
        for (std::size_t j = 0; j < d; ++j) dot += y(r, j) * g(r, j);
      // (I - ŷŷᵀ) g / ‖x‖ off the floor; plain g / ε on it.
      for (std::size_t j = 0; j < d; ++j) gx(r, j) += (g(r, j) - dot * y(r, j)) / denom[r];
    }
  });
}

enum class Phase { train, eval };

/// Running statistics consumed by eval-mode batch_norm and refreshed in train mode.
template <class T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

namespace detail {

/// Shared backward of standardize-then-affine over groups of `count` elements.
/// For batch norm a group is a feature column, for layer norm a sample row.
template <class T>
struct AffineNormCache {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

}  // namespace detail

/// Per-feature standardization of x[N×F] using batch statistics (train) or
/// running statistics (eval), then γ·x̂ + β. Train mode folds the batch mean and
/// biased variance into `stats` with momentum 0.9.
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, Phase phase) {
  auto& tape = detail::same_tape({x, gamma, beta});
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("batch_norm expects [N x F], got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), f = xv.dim(1);
  if (gamma.value().shape() != Shape{f} || beta.value().shape() != Shape{f} || stats.mean.shape() != Shape{f} ||
      stats.var.shape() != Shape{f})
    throw DimensionError("batch_norm parameters must have shape [" + std::to_string(f) + "]");
  if (phase == Phase::train && n < 2) throw ConfigError("batch_norm in train mode needs batch size >= 2");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<T> xhat(n * f), inv_std(f);
  std::vector<T> mean(f, T{0}), var(f, T{0});
  if (phase == Phase::train) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < f; ++j) mean[j] += xv(r, j);
    for (auto& m : mean) m /= static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < f; ++j) var[j] += (xv(r, j) - mean[j]) * (xv(r, j) - mean[j]);
    for (auto& v : var) v /= static_cast<T>(n);
    const T mom = static_cast<T>(kBatchNormMomentum);
    for (std::size_t j = 0; j < f; ++j) {
      stats.mean[j] = mom * stats.mean[j] + (T{1} - mom) * mean[j];
      stats.var[j] = mom * stats.var[j] + (T{1} - mom) * var[j];
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mean[j] = stats.mean[j];
      var[j] = stats.var[j];
    }
  }
  for (std::size_t j = 0; j < f; ++j) inv_std[j] = T{1} / std::sqrt(var[j] + static_cast<T>(kNormEpsilon));
  Tensor<T> out({n, f});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < f; ++j) {
      xhat[r * f + j] = (xv(r, j) - mean[j]) * inv_std[j];
      out(r, j) = gv[j] * xhat[r * f + j] + bv[j];
    }
  const std::size_t ix = x.index, ig = gamma.index, ib = beta.index;
  const bool batch_stats = phase == Phase::train;
  return tape.record(std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
                       const auto& gv = t.value(Var<T>{&t, ig});
                       std::vector<T> sum_g(f, T{0}), sum_gx(f, T{0});
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < f; ++j) {
                           sum_g[j] += g[r * f + j];
                           sum_gx[j] += g[r * f + j] * xhat[r * f + j];
                         }
                       if (t.requires_grad(ig)) {
                         auto& gg = t.grad_buffer(ig);
                         for (std::size_t j = 0; j < f; ++j) gg[j] += sum_gx[j];
                       }
                       if (t.requires_grad(ib)) {
                         auto& gb = t.grad_buffer(ib);
                         for (std::size_t j = 0; j < f; ++j) gb[j] += sum_g[j];
                       }
                       if (t.requires_grad(ix)) {
                         auto& gx = t.grad_buffer(ix);
                         const T inv_n = T{1} / static_cast<T>(n);
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t j = 0; j < f; ++j) {
                             const T gi = g[r * f + j];
                             if (batch_stats)
                               gx[r * f + j] += gv[j] * inv_std[j] *
                                                (gi - inv_n * sum_g[j] - xhat[r * f + j] * inv_n * sum_gx[j]);
                             else
                               gx[r * f + j] += gv[j] * inv_std[j] * gi;
                           }
                       }
                     });
}

/// Per-sample standardization of x[N×F] across features, then γ·x̂ + β.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  auto& tape = detail::same_tape({x, gamma, beta});
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("layer_norm expects [N x F], got " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), f = xv.dim(1);
  if (f < 2) throw DimensionError("layer_norm needs at least 2 features");
  if (gamma.value().shape() != Shape{f} || beta.value().shape() != Shape{f})
    throw DimensionError("layer_norm parameters must have shape [" + std::to_string(f) + "]");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<T> xhat(n * f), inv_std(n);
  Tensor<T> out({n, f});
  for (std::size_t r = 0; r < n; ++r) {
    T mean{0}, var{0};
    for (std::size_t j = 0; j < f; ++j) mean += xv(r, j);
    mean /= static_cast<T>(f);
    for (std::size_t j = 0; j < f; ++j) var += (xv(r, j) - mean) * (xv(r, j) - mean);
    var /= static_cast<T>(f);
    inv_std[r] = T{1} / std::sqrt(var + static_cast<T>(kNormEpsilon));
    for (std::size_t j = 0; j < f; ++j) {
      xhat[r * f + j] = (xv(r, j) - mean) * inv_std[r];
      out(r, j) = gv[j] * xhat[r * f + j] + bv[j];
    }
  }
  const std::size_t ix = x.index, ig = gamma.index, ib = beta.index;
  return tape.record(std::move(out), {x, gamma, beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>& g) {
                       const auto& gv = t.value(Var<T>{&t, ig});
                       if (t.requires_grad(ig)) {
                         auto& gg = t.grad_buffer(ig);
                         for (std::size_t i = 0; i < n * f; ++i) gg[i % f] += g[i] * xhat[i];
                       }
                       if (t.requires_grad(ib)) {
                         auto& gb = t.grad_buffer(ib);
                         for (std::size_t i = 0; i < n * f; ++i) gb[i % f] += g[i];
                       }
                       if (t.requires_grad(ix)) {
                         auto& gx = t.grad_buffer(ix);
                         const T inv_f = T{1} / static_cast<T>(f);
                         for (std::size_t r = 0; r < n; ++r) {
                           T sum_d{0}, sum_dx{0};
                           for (std::size_t j = 0; j < f; ++j) {
                             const T d = g[r * f + j] * gv[j];
                             sum_d += d;
                             sum_dx += d * xhat[r * f + j];
                           }
                           for (std::size_t j = 0; j < f; ++j) {
                             const T d = g[r * f + j] * gv[j];
                             gx[r * f + j] += inv_std[r] * (d - inv_f * sum_d - xhat[r * f + j] * inv_f * sum_dx);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean over every element of (pred - target)².
template <class T>
Var<T> mse_loss(Var<T> pred, Var<T> target) {
  auto& tape = detail::same_tape({pred, target});
  const auto& pv = pred.value();
  const auto& tv = target.value();
  if (pv.shape() != tv.shape())
    throw DimensionError("mse_loss shape mismatch: " + shape_str(pv.shape()) + " vs " + shape_str(tv.shape()));
  T acc{0};
  for (std::size_t i = 0; i < pv.size(); ++i) acc += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  const T count = static_cast<T>(pv.size());
  const std::size_t ip = pred.index, it = target.index;
  return tape.record(Tensor<T>(Shape{}, std::vector<T>{acc / count}), {pred, target},
                     [ip, it, count](Tape<T>& t, const Tensor<T>& g) {
                       const auto& pv = t.value(Var<T>{&t, ip});
                       const auto& tv = t.value(Var<T>{&t, it});
                       const T scale = T{2} * g[0] / count;
                       if (t.requires_grad(ip)) {
                         auto& gp = t.grad_buffer(ip);
                         for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += scale * (pv[i] - tv[i]);
                       }
                       if (t.requires_grad(it)) {
                         auto& gt = t.grad_buffer(it);
                         for (std::size_t i = 0; i < pv.size(); ++i) gt[i] -= scale * (pv[i] - tv[i]);
                       }
                     });
}

}  // namespace l2ae
