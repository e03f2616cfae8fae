#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdrop/tape.hpp"
#include "fdrop/tensor.hpp"

namespace fdrop {

// ---------------------------------------------------------------------------
// Broadcasting machinery (standard numpy alignment rules).
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const int rank = std::max(static_cast<int>(a.size()), static_cast<int>(b.size()));
  Shape out(static_cast<std::size_t>(rank), 1);
  for (int d = 0; d < rank; ++d) {
    const int da = d < rank - static_cast<int>(a.size())
                       ? 1
                       : a[static_cast<std::size_t>(d - (rank - static_cast<int>(a.size())))];
    const int db = d < rank - static_cast<int>(b.size())
                       ? 1
                       : b[static_cast<std::size_t>(d - (rank - static_cast<int>(b.size())))];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) +
                                  " and " + shape_str(b) + " do not broadcast");
    }
    out[static_cast<std::size_t>(d)] = std::max(da, db);
  }
  return out;
}

namespace detail {

/// Element strides of `shape` aligned to broadcast target `out`;
/// broadcast dimensions get stride 0.
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  const int rank = static_cast<int>(out.size());
  const int pad = rank - static_cast<int>(shape.size());
  std::vector<std::int64_t> strides(static_cast<std::size_t>(rank), 0);
  std::int64_t acc = 1;
  for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
    const int dim = shape[static_cast<std::size_t>(d)];
    strides[static_cast<std::size_t>(d + pad)] = dim == 1 ? 0 : acc;
    acc *= dim;
  }
  return strides;
}

/// Visits every position of `out`, handing the callback the flat output index
/// plus the mapped flat indices into both broadcast operands.
template <class Fn>
void for_each_broadcast(const Shape& out, std::span<const std::int64_t> sa,
                        std::span<const std::int64_t> sb, Fn&& fn) {
  const int rank = static_cast<int>(out.size());
  const std::int64_t total = numel(out);
  if (rank == 0) {
    if (total == 1) fn(std::int64_t(0), std::int64_t(0), std::int64_t(0));
    return;
  }
  std::vector<int> idx(static_cast<std::size_t>(rank), 0);
  std::int64_t ai = 0, bi = 0;
  for (std::int64_t oi = 0; oi < total; ++oi) {
    fn(oi, ai, bi);
    for (int d = rank - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      ai += sa[ud];
      bi += sb[ud];
      if (idx[ud] < out[ud]) break;
      idx[ud] = 0;
      ai -= static_cast<std::int64_t>(out[ud]) * sa[ud];
      bi -= static_cast<std::int64_t>(out[ud]) * sb[ud];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / linear algebra
// ---------------------------------------------------------------------------

template <class T, class Fwd, class Bwd>
TensorT<T> binary_broadcast_op(const TensorT<T>& a, const TensorT<T>& b,
                               TapeT<T>* tape, const char* name, Fwd fwd, Bwd bwd) {
  const Shape os = broadcast_shape(a.shape(), b.shape(), name);
  const bool rg = tape != nullptr && (a.requires_grad() || b.requires_grad());
  TensorT<T> out(os, rg);
  const auto sa = detail::broadcast_strides(a.shape(), os);
  const auto sb = detail::broadcast_strides(b.shape(), os);
  {
    const auto pa = a.data();
    const auto pb = b.data();
    auto po = out.data();
    detail::for_each_broadcast(os, sa, sb, [&](std::int64_t oi, std::int64_t ai, std::int64_t bi) {
      po[static_cast<std::size_t>(oi)] =
          fwd(pa[static_cast<std::size_t>(ai)], pb[static_cast<std::size_t>(bi)]);
    });
  }
  ensure_finite(out, name);
  if (rg) {
    tape->record([a = a, b = b, out, os, sa, sb, bwd]() mutable {
      const auto pa = a.data();
      const auto pb = b.data();
      const auto go = out.grad();
      const bool ga = a.requires_grad();
      const bool gb = b.requires_grad();
      detail::for_each_broadcast(
          os, sa, sb, [&](std::int64_t oi, std::int64_t ai, std::int64_t bi) {
            const T g = go[static_cast<std::size_t>(oi)];
            const auto [da, db] =
                bwd(pa[static_cast<std::size_t>(ai)], pb[static_cast<std::size_t>(bi)], g);
            if (ga) a.grad()[static_cast<std::size_t>(ai)] += da;
            if (gb) b.grad()[static_cast<std::size_t>(bi)] += db;
          });
    });
  }
  return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
  return binary_broadcast_op(
      a, b, tape, "add", [](T x, T y) { return x + y; },
      [](T, T, T g) { return std::pair<T, T>(g, g); });
}

/// Elementwise product under broadcasting; with a {0,1} mask operand this is
/// the masked multiply (gradient through a zeroed unit is zero).
template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
  return binary_broadcast_op(
      a, b, tape, "mul", [](T x, T y) { return x * y; },
      [](T x, T y, T g) { return std::pair<T, T>(g * y, g * x); });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
  const bool rg = tape != nullptr && x.requires_grad();
  TensorT<T> out(x.shape(), rg);
  const auto px = x.data();
  auto po = out.data();
  for (std::size_t i = 0; i < px.size(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  ensure_finite(out, "relu");
  if (rg) {
    tape->record([x = x, out]() mutable {
      const auto px = x.data();
      const auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < px.size(); ++i) {
        if (px[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw std::invalid_argument("matmul: expected 2-d operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool rg = tape != nullptr && (a.requires_grad() || b.requires_grad());
  TensorT<T> out(Shape{m, n}, rg);
  {
    const auto pa = a.data();
    const auto pb = b.data();
    auto po = out.data();
    for (int i = 0; i < m; ++i) {
      for (int p = 0; p < k; ++p) {
        const T av = pa[static_cast<std::size_t>(i) * k + p];
        const T* brow = &pb[static_cast<std::size_t>(p) * n];
        T* orow = &po[static_cast<std::size_t>(i) * n];
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  ensure_finite(out, "matmul");
  if (rg) {
    tape->record([a = a, b = b, out, m, k, n]() mutable {
      const auto pa = a.data();
      const auto pb = b.data();
      const auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) {
            const T g = go[static_cast<std::size_t>(i) * n + j];
            const T* brow = &pb[j];
            T* garow = &ga[static_cast<std::size_t>(i) * k];
            for (int p = 0; p < k; ++p) garow[p] += g * brow[static_cast<std::size_t>(p) * n];
          }
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (int p = 0; p < k; ++p) {
          for (int i = 0; i < m; ++i) {
            const T av = pa[static_cast<std::size_t>(i) * k + p];
            const T* gorow = &go[static_cast<std::size_t>(i) * n];
            T* gbrow = &gb[static_cast<std::size_t>(p) * n];
            for (int j = 0; j < n; ++j) gbrow[j] += av * gorow[j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, NCHW x OIKK)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_conv_args(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw std::invalid_argument("conv2d: expected 4-d input and kernel, got " +
                                shape_str(x) + " and " + shape_str(w));
  }
  if (x[1] != w[1]) {
    throw std::invalid_argument("conv2d: channel mismatch: input " + shape_str(x) +
                                " vs kernel " + shape_str(w));
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
}

inline int conv_out_dim(int in, int k, int stride, int pad, const char* axis) {
  const int out = (in + 2 * pad - k) / stride + 1;
  if (in + 2 * pad < k || out <= 0) {
    throw std::invalid_argument(std::string("conv2d: non-positive output ") + axis +
                                " for input extent " + std::to_string(in) +
                                ", kernel " + std::to_string(k) + ", stride " +
                                std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  return out;
}

}  // namespace detail

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                  int stride, int pad, TapeT<T>* tape = nullptr) {
  detail::check_conv_args(x.shape(), w.shape(), stride, pad);
  const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = detail::conv_out_dim(h, kh, stride, pad, "height");
  const int ow = detail::conv_out_dim(wd, kw, stride, pad, "width");
  if (bias != nullptr && (bias->ndim() != 1 || bias->dim(0) != cout)) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(bias->shape()) +
                                " does not match output channels " + std::to_string(cout));
  }
  const bool rg = tape != nullptr &&
                  (x.requires_grad() || w.requires_grad() ||
                   (bias != nullptr && bias->requires_grad()));
  TensorT<T> out(Shape{batch, cout, oh, ow}, rg);
  const auto px = x.data();
  const auto pw = w.data();
  auto po = out.data();
  const std::int64_t xplane = static_cast<std::int64_t>(h) * wd;
  const std::int64_t oplane = static_cast<std::int64_t>(oh) * ow;

  if (bias != nullptr) {
    const auto pb = bias->data();
    for (int n = 0; n < batch; ++n)
      for (int o = 0; o < cout; ++o) {
        T* dst = &po[static_cast<std::size_t>((static_cast<std::int64_t>(n) * cout + o) * oplane)];
        for (std::int64_t i = 0; i < oplane; ++i) dst[i] = pb[static_cast<std::size_t>(o)];
      }
  }

  // Valid output ranges per kernel tap so the inner loops run unconditionally.
  const auto oy_range = [pad, stride, oh, h](int ky) {
    const int lo = std::max(0, (pad - ky + stride - 1) / stride);
    const int hi = std::min(oh, (h - 1 + pad - ky) / stride + 1);
    return std::pair<int, int>(lo, hi);
  };
  const auto ox_range = [pad, stride, ow, wd](int kx) {
    const int lo = std::max(0, (pad - kx + stride - 1) / stride);
    const int hi = std::min(ow, (wd - 1 + pad - kx) / stride + 1);
    return std::pair<int, int>(lo, hi);
  };

  for (int n = 0; n < batch; ++n) {
    for (int o = 0; o < cout; ++o) {
      T* oplane_p = &po[static_cast<std::size_t>((static_cast<std::int64_t>(n) * cout + o) * oplane)];
      for (int c = 0; c < cin; ++c) {
        const T* xplane_p =
            &px[static_cast<std::size_t>((static_cast<std::int64_t>(n) * cin + c) * xplane)];
        const T* wrow = &pw[static_cast<std::size_t>(
            (static_cast<std::int64_t>(o) * cin + c) * kh * kw)];
        for (int ky = 0; ky < kh; ++ky) {
          const auto [oy0, oy1] = oy_range(ky);
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = wrow[ky * kw + kx];
            const auto [ox0, ox1] = ox_range(kx);
            for (int oy = oy0; oy < oy1; ++oy) {
              const int iy = oy * stride + ky - pad;
              const T* xr = &xplane_p[static_cast<std::size_t>(iy) * wd - pad + kx];
              T* orow = &oplane_p[static_cast<std::size_t>(oy) * ow];
              if (stride == 1) {
                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xr[ox];
              } else {
                for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * xr[ox * stride];
              }
            }
          }
        }
      }
    }
  }
  ensure_finite(out, "conv2d");

  if (rg) {
    TensorT<T> bcopy = bias != nullptr ? *bias : TensorT<T>();
    const bool has_bias = bias != nullptr;
    tape->record([x = x, w = w, bcopy, has_bias, out, stride, pad, batch, cin, cout, h, wd, kh,
                  kw, oh, ow, xplane, oplane, oy_range, ox_range]() mutable {
      const auto px = x.data();
      const auto pw = w.data();
      const auto go = out.grad();
      const bool need_gx = x.requires_grad();
      const bool need_gw = w.requires_grad();
      for (int n = 0; n < batch; ++n) {
        for (int o = 0; o < cout; ++o) {
          const T* goplane = &go[static_cast<std::size_t>(
              (static_cast<std::int64_t>(n) * cout + o) * oplane)];
          for (int c = 0; c < cin; ++c) {
            const std::size_t xoff = static_cast<std::size_t>(
                (static_cast<std::int64_t>(n) * cin + c) * xplane);
            const std::size_t woff = static_cast<std::size_t>(
                (static_cast<std::int64_t>(o) * cin + c) * kh * kw);
            for (int ky = 0; ky < kh; ++ky) {
              const auto [oy0, oy1] = oy_range(ky);
              for (int kx = 0; kx < kw; ++kx) {
                const auto [ox0, ox1] = ox_range(kx);
                const T wv = pw[woff + static_cast<std::size_t>(ky * kw + kx)];
                T wgrad = T(0);
                for (int oy = oy0; oy < oy1; ++oy) {
                  const int iy = oy * stride + ky - pad;
                  const T* gor = &goplane[static_cast<std::size_t>(oy) * ow];
                  const std::size_t xrow = xoff + static_cast<std::size_t>(iy) * wd;
                  for (int ox = ox0; ox < ox1; ++ox) {
                    const int ix = ox * stride + kx - pad;
                    const T g = gor[ox];
                    if (need_gx) x.grad()[xrow + static_cast<std::size_t>(ix)] += wv * g;
                    wgrad += px[xrow + static_cast<std::size_t>(ix)] * g;
                  }
                }
                if (need_gw) w.grad()[woff + static_cast<std::size_t>(ky * kw + kx)] += wgrad;
              }
            }
          }
          if (has_bias && bcopy.requires_grad()) {
            T acc = T(0);
            for (std::int64_t i = 0; i < oplane; ++i)
              acc += goplane[static_cast<std::size_t>(i)];
            bcopy.grad()[static_cast<std::size_t>(o)] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  int stride, int pad, TapeT<T>* tape = nullptr) {
  return conv2d(x, w, &bias, stride, pad, tape);
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, std::nullptr_t,
                  int stride, int pad, TapeT<T>* tape = nullptr) {
  return conv2d(x, w, static_cast<const TensorT<T>*>(nullptr), stride, pad, tape);
}

// ---------------------------------------------------------------------------
// Pooling / normalization / classifier head
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> maxpool2d(const TensorT<T>& x, int window, int stride = 0,
                     TapeT<T>* tape = nullptr) {
  if (x.ndim() != 4) {
    throw std::invalid_argument("maxpool2d: expected 4-d input, got " +
                                shape_str(x.shape()));
  }
  if (window < 1) throw std::invalid_argument("maxpool2d: window must be >= 1");
  if (stride == 0) stride = window;
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (h < window || wd < window) {
    throw std::invalid_argument("maxpool2d: window " + std::to_string(window) +
                                " exceeds input " + shape_str(x.shape()));
  }
  // Floor convention: trailing rows/cols that do not fill a window are dropped.
  const int oh = (h - window) / stride + 1;
  const int ow = (wd - window) / stride + 1;
  const bool rg = tape != nullptr && x.requires_grad();
  TensorT<T> out(Shape{batch, ch, oh, ow}, rg);
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(out.size()));
  const auto px = x.data();
  auto po = out.data();
  const std::int64_t xplane = static_cast<std::int64_t>(h) * wd;
  std::size_t oi = 0;
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const T* plane = &px[static_cast<std::size_t>(
          (static_cast<std::int64_t>(n) * ch + c) * xplane)];
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          const int y0 = oy * stride, x0 = ox * stride;
          T best = plane[static_cast<std::size_t>(y0) * wd + x0];
          std::int32_t besti = static_cast<std::int32_t>(y0 * wd + x0);
          for (int ky = 0; ky < window; ++ky) {
            for (int kx = 0; kx < window; ++kx) {
              const std::int32_t idx = static_cast<std::int32_t>((y0 + ky) * wd + (x0 + kx));
              const T v = plane[static_cast<std::size_t>(idx)];
              if (v > best) {
                best = v;
                besti = idx;
              }
            }
          }
          po[oi] = best;
          argmax[oi] = besti;
        }
      }
    }
  }
  ensure_finite(out, "maxpool2d");
  if (rg) {
    tape->record([x = x, out, argmax = std::move(argmax), batch, ch, xplane]() mutable {
      const auto go = out.grad();
      auto gx = x.grad();
      const std::int64_t oplane = out.size() / (static_cast<std::int64_t>(batch) * ch);
      std::size_t oi = 0;
      for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < ch; ++c) {
          const std::size_t base = static_cast<std::size_t>(
              (static_cast<std::int64_t>(n) * ch + c) * xplane);
          for (std::int64_t i = 0; i < oplane; ++i, ++oi) {
            gx[base + static_cast<std::size_t>(argmax[oi])] += go[oi];
          }
        }
      }
    });
  }
  return out;
}

/// Per-channel spatial mean: (N,C,H,W) -> (N,C).
template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
  if (x.ndim() != 4) {
    throw std::invalid_argument("global_avg_pool: expected 4-d input, got " +
                                shape_str(x.shape()));
  }
  const int batch = x.dim(0), ch = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  const bool rg = tape != nullptr && x.requires_grad();
  TensorT<T> out(Shape{batch, ch}, rg);
  const auto px = x.data();
  auto po = out.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(batch) * ch; ++nc) {
    const T* p = &px[static_cast<std::size_t>(nc * plane)];
    T acc = T(0);
    for (std::int64_t i = 0; i < plane; ++i) acc += p[static_cast<std::size_t>(i)];
    po[static_cast<std::size_t>(nc)] = acc / static_cast<T>(plane);
  }
  ensure_finite(out, "global_avg_pool");
  if (rg) {
    tape->record([x = x, out, batch, ch, plane]() mutable {
      const auto go = out.grad();
      auto gx = x.grad();
      const T inv = T(1) / static_cast<T>(plane);
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(batch) * ch; ++nc) {
        const T g = go[static_cast<std::size_t>(nc)] * inv;
        T* gp = &gx[static_cast<std::size_t>(nc * plane)];
        for (std::int64_t i = 0; i < plane; ++i) gp[static_cast<std::size_t>(i)] += g;
      }
    });
  }
  return out;
}

/// Batch normalization over (N,H,W) per channel. Training mode normalizes
/// with batch statistics (biased variance) and folds them into the running
/// estimates; eval mode normalizes with the running estimates. Freshly
/// initialized running stats are zero mean / unit variance, so an eval pass
/// before any training step is well defined.
template <class T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& gamma,
                       const TensorT<T>& beta, TensorT<T>& running_mean,
                       TensorT<T>& running_var, bool training,
                       double momentum = 0.1, double eps = 1e-5,
                       TapeT<T>* tape = nullptr) {
  if (x.ndim() != 4) {
    throw std::invalid_argument("batchnorm2d: expected 4-d input, got " +
                                shape_str(x.shape()));
  }
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
      running_var.size() != ch) {
    throw std::invalid_argument("batchnorm2d: parameter length does not match " +
                                std::to_string(ch) + " channels");
  }
  const std::int64_t plane = static_cast<std::int64_t>(h) * wd;
  const std::int64_t m = static_cast<std::int64_t>(batch) * plane;  // samples per channel
  const bool rg = tape != nullptr && (x.requires_grad() || gamma.requires_grad() ||
                                      beta.requires_grad());
  TensorT<T> out(x.shape(), rg);

  std::vector<T> mean(static_cast<std::size_t>(ch)), invstd(static_cast<std::size_t>(ch));
  const auto px = x.data();
  auto po = out.data();
  const auto pg = gamma.data();
  const auto pb = beta.data();

  if (training) {
    for (int c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (int n = 0; n < batch; ++n) {
        const T* p = &px[static_cast<std::size_t>(
            (static_cast<std::int64_t>(n) * ch + c) * plane)];
        for (std::int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[static_cast<std::size_t>(i)]);
      }
      const double mu = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int n = 0; n < batch; ++n) {
        const T* p = &px[static_cast<std::size_t>(
            (static_cast<std::int64_t>(n) * ch + c) * plane)];
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(p[static_cast<std::size_t>(i)]) - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / static_cast<double>(m);
      mean[static_cast<std::size_t>(c)] = static_cast<T>(mu);
      invstd[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + eps));
      auto rm = running_mean.data();
      auto rv = running_var.data();
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      rm[static_cast<std::size_t>(c)] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(rm[static_cast<std::size_t>(c)]) + momentum * mu);
      rv[static_cast<std::size_t>(c)] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(rv[static_cast<std::size_t>(c)]) + momentum * unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (int c = 0; c < ch; ++c) {
      mean[static_cast<std::size_t>(c)] = rm[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(rv[static_cast<std::size_t>(c)]) + eps));
    }
  }

  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const std::size_t off = static_cast<std::size_t>(
          (static_cast<std::int64_t>(n) * ch + c) * plane);
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T g = pg[static_cast<std::size_t>(c)];
      const T b = pb[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < plane; ++i) {
        po[off + static_cast<std::size_t>(i)] =
            (px[off + static_cast<std::size_t>(i)] - mu) * is * g + b;
      }
    }
  }
  ensure_finite(out, "batchnorm2d");

  if (rg) {
    tape->record([x = x, gamma = gamma, beta = beta, out, mean = std::move(mean),
                  invstd = std::move(invstd), training, batch, ch, plane, m]() mutable {
      const auto px = x.data();
      const auto pg = gamma.data();
      const auto go = out.grad();
      for (int c = 0; c < ch; ++c) {
        const T mu = mean[static_cast<std::size_t>(c)];
        const T is = invstd[static_cast<std::size_t>(c)];
        const T gam = pg[static_cast<std::size_t>(c)];
        double sum_go = 0.0, sum_go_xhat = 0.0;
        for (int n = 0; n < batch; ++n) {
          const std::size_t off = static_cast<std::size_t>(
              (static_cast<std::int64_t>(n) * ch + c) * plane);
          for (std::int64_t i = 0; i < plane; ++i) {
            const T g = go[off + static_cast<std::size_t>(i)];
            sum_go += static_cast<double>(g);
            sum_go_xhat += static_cast<double>(g) *
                           static_cast<double>((px[off + static_cast<std::size_t>(i)] - mu) * is);
          }
        }
        if (gamma.requires_grad()) gamma.grad()[static_cast<std::size_t>(c)] += static_cast<T>(sum_go_xhat);
        if (beta.requires_grad()) beta.grad()[static_cast<std::size_t>(c)] += static_cast<T>(sum_go);
        if (x.requires_grad()) {
          auto gx = x.grad();
          if (training) {
            // d/dx through the batch statistics themselves.
            const T k1 = static_cast<T>(sum_go / static_cast<double>(m));
            const T k2 = static_cast<T>(sum_go_xhat / static_cast<double>(m));
            for (int n = 0; n < batch; ++n) {
              const std::size_t off = static_cast<std::size_t>(
                  (static_cast<std::int64_t>(n) * ch + c) * plane);
              for (std::int64_t i = 0; i < plane; ++i) {
                const T xhat = (px[off + static_cast<std::size_t>(i)] - mu) * is;
                const T g = go[off + static_cast<std::size_t>(i)];
                gx[off + static_cast<std::size_t>(i)] += gam * is * (g - k1 - xhat * k2);
              }
            }
          } else {
            for (int n = 0; n < batch; ++n) {
              const std::size_t off = static_cast<std::size_t>(
                  (static_cast<std::int64_t>(n) * ch + c) * plane);
              for (std::int64_t i = 0; i < plane; ++i) {
                gx[off + static_cast<std::size_t>(i)] +=
                    gam * is * go[off + static_cast<std::size_t>(i)];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

/// Affine map y = x @ w + b for x:(N,F), w:(F,O), b:(O).
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  TapeT<T>* tape = nullptr) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0)) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " does not match weight " + shape_str(w.shape()));
  }
  return add(matmul(x, w, tape), b, tape);
}

/// Spatial subsample plus zero channel padding: the parameter-free residual
/// shortcut used when a stage changes width/resolution.
template <class T>
TensorT<T> subsample_pad_channels(const TensorT<T>& x, int out_channels, int stride,
                                  TapeT<T>* tape = nullptr) {
  if (x.ndim() != 4) {
    throw std::invalid_argument("subsample_pad_channels: expected 4-d input, got " +
                                shape_str(x.shape()));
  }
  const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (out_channels < cin) {
    throw std::invalid_argument("subsample_pad_channels: cannot shrink channels from " +
                                std::to_string(cin) + " to " + std::to_string(out_channels));
  }
  const int oh = (h - 1) / stride + 1;
  const int ow = (wd - 1) / stride + 1;
  const bool rg = tape != nullptr && x.requires_grad();
  TensorT<T> out(Shape{batch, out_channels, oh, ow}, rg);
  const auto px = x.data();
  auto po = out.data();
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < cin; ++c) {
      const T* src = &px[static_cast<std::size_t>(
          (static_cast<std::int64_t>(n) * cin + c) * h * wd)];
      T* dst = &po[static_cast<std::size_t>(
          (static_cast<std::int64_t>(n) * out_channels + c) * oh * ow)];
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
          dst[static_cast<std::size_t>(oy) * ow + ox] =
              src[static_cast<std::size_t>(oy) * stride * wd + static_cast<std::size_t>(ox) * stride];
    }
  }
  if (rg) {
    tape->record([x = x, out, batch, cin, out_channels, h, wd, oh, ow, stride]() mutable {
      const auto go = out.grad();
      auto gx = x.grad();
      for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < cin; ++c) {
          const T* gsrc = &go[static_cast<std::size_t>(
              (static_cast<std::int64_t>(n) * out_channels + c) * oh * ow)];
          T* gdst = &gx[static_cast<std::size_t>(
              (static_cast<std::int64_t>(n) * cin + c) * h * wd)];
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
              gdst[static_cast<std::size_t>(oy) * stride * wd + static_cast<std::size_t>(ox) * stride] +=
                  gsrc[static_cast<std::size_t>(oy) * ow + ox];
        }
      }
    });
  }
  return out;
}

/// Sum of every element, reduced to a scalar.
template <class T>
TensorT<T> sum_all(const TensorT<T>& x, TapeT<T>* tape = nullptr) {
  const bool rg = tape != nullptr && x.requires_grad();
  TensorT<T> out(Shape{1}, rg);
  T acc = T(0);
  for (const T v : x.data()) acc += v;
  out.data()[0] = acc;
  ensure_finite(out, "sum_all");
  if (rg) {
    tape->record([x = x, out]() mutable {
      const T g = out.grad()[0];
      auto gx = x.grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

/// Mean softmax cross-entropy over the batch; numerically stable log-sum-exp.
template <class T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, std::span<const int> labels,
                                 TapeT<T>* tape = nullptr) {
  if (logits.ndim() != 2) {
    throw std::invalid_argument("softmax_cross_entropy: expected 2-d logits, got " +
                                shape_str(logits.shape()));
  }
  const int batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<int>(labels.size()) != batch) {
    throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(batch));
  }
  const auto pz = logits.data();
  std::vector<T> probs(static_cast<std::size_t>(logits.size()));
  double loss = 0.0;
  for (int n = 0; n < batch; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= classes) {
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                  " out of range for " + std::to_string(classes) + " classes");
    }
    const T* row = &pz[static_cast<std::size_t>(n) * classes];
    T mx = row[0];
    for (int k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (int k = 0; k < classes; ++k) sum += std::exp(static_cast<double>(row[k] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    loss += lse - static_cast<double>(row[y]);
    for (int k = 0; k < classes; ++k) {
      probs[static_cast<std::size_t>(n) * classes + k] =
          static_cast<T>(std::exp(static_cast<double>(row[k]) - lse));
    }
  }
  const bool rg = tape != nullptr && logits.requires_grad();
  TensorT<T> out(Shape{1}, rg);
  out.data()[0] = static_cast<T>(loss / batch);
  ensure_finite(out, "softmax_cross_entropy");
  if (rg) {
    std::vector<int> ycopy(labels.begin(), labels.end());
    tape->record([logits = logits, out, probs = std::move(probs), ycopy = std::move(ycopy),
                  batch, classes]() mutable {
      const T g = out.grad()[0] / static_cast<T>(batch);
      auto gz = logits.grad();
      for (int n = 0; n < batch; ++n) {
        for (int k = 0; k < classes; ++k) {
          const std::size_t i = static_cast<std::size_t>(n) * classes + k;
          const T onehot = k == ycopy[static_cast<std::size_t>(n)] ? T(1) : T(0);
          gz[i] += g * (probs[i] - onehot);
        }
      }
    });
  }
  return out;
}

}  // namespace fdrop
