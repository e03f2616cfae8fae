#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "fdrop/ops.hpp"
#include "fdrop/rng.hpp"
#include "fdrop/tape.hpp"
#include "fdrop/tensor.hpp"

namespace fdrop {

/// One sample's activations viewed as a stack of channel planes; a non-owning
/// view over one sample of an NCHW tensor.
template <class T>
struct FeatureStackT {
  const T* values = nullptr;  // contiguous (channels, height, width)
  int channels = 0;
  int height = 0;
  int width = 0;

  FeatureStackT() = default;
  FeatureStackT(const T* data, int n, int h, int w)
      : values(data), channels(n), height(h), width(w) {
    if (n < 1 || h < 1 || w < 1) {
      throw std::invalid_argument("feature stack: dimensions must be >= 1, got (" +
                                  std::to_string(n) + "," + std::to_string(h) + "," +
                                  std::to_string(w) + ")");
    }
  }

  std::int64_t plane() const { return static_cast<std::int64_t>(height) * width; }

  const T* channel(int c) const { return values + static_cast<std::int64_t>(c) * plane(); }

  T at(int c, int y, int x) const {
    return values[(static_cast<std::int64_t>(c) * height + y) * width + x];
  }

  /// View of sample `n` of a 4-d activation tensor (no copy).
  static FeatureStackT from_batch(const TensorT<T>& batch, int n) {
    if (batch.ndim() != 4) {
      throw std::invalid_argument("feature stack: expected 4-d batch, got " +
                                  shape_str(batch.shape()));
    }
    const int ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const T* base = batch.data().data() +
                    static_cast<std::int64_t>(n) * ch * h * w;
    return FeatureStackT(base, ch, h, w);
  }
};

/// Threshold ratio range; the per-sample ratio is drawn uniformly from it.
struct GammaRange {
  double lo = 0.3;
  double hi = 0.6;

  GammaRange() = default;
  GammaRange(double lo_, double hi_) : lo(lo_), hi(hi_) { validate(); }

  void validate() const {
    if (!(lo > 0.0 && hi < 1.0 && lo <= hi)) {
      throw std::invalid_argument("gamma range: need 0 < lo <= hi < 1, got [" +
                                  std::to_string(lo) + "," + std::to_string(hi) + "]");
    }
  }
};

enum class DropoutMode { Train, Inference };

/// Binary spatial mask for one sample plus the quantities that produced it.
/// mask(i,j) = 1 exactly when the reference channel strictly exceeds
/// gamma * peak at (i,j); a 1 means the position is retained on every channel.
struct FocusMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;  // row-major, values in {0,1}; 1 = retained
  double gamma = 0.0;
  double threshold = 0.0;
  int ref_channel = -1;
  int peak_row = 0;
  int peak_col = 0;
  double peak_value = 0.0;
  bool degenerate = false;  // peak <= 0: mask forced to all-ones (identity)

  std::int64_t total() const { return static_cast<std::int64_t>(height) * width; }

  std::int64_t ones() const {
    std::int64_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  std::int64_t zeros() const { return total() - ones(); }

  std::uint8_t at(int y, int x) const {
    return bits[static_cast<std::size_t>(y) * width + x];
  }
};

/// Per-channel spatial mean of the stack (global average pooling of one sample).
template <class T>
std::vector<T> channel_mean_activations(const FeatureStackT<T>& stack) {
  std::vector<T> weights(static_cast<std::size_t>(stack.channels));
  const std::int64_t plane = stack.plane();
  for (int c = 0; c < stack.channels; ++c) {
    const T* p = stack.channel(c);
    T acc = T(0);
    for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
    weights[static_cast<std::size_t>(c)] = acc / static_cast<T>(plane);
  }
  return weights;
}

/// Index of the maximal per-channel weight; ties resolve to the lowest index.
template <class T>
int select_reference_channel(std::span<const T> weights) {
  if (weights.empty()) {
    throw std::invalid_argument("select_reference_channel: empty weight vector");
  }
  int best = 0;
  for (int i = 1; i < static_cast<int>(weights.size()); ++i) {
    if (weights[static_cast<std::size_t>(i)] > weights[static_cast<std::size_t>(best)]) {
      best = i;
    }
  }
  return best;
}

/// Position and value of the channel's maximum; ties resolve to the first
/// occurrence in row-major scan order.
template <class T>
std::pair<std::pair<int, int>, T> peak_unit(const T* plane, int height, int width) {
  if (height < 1 || width < 1) {
    throw std::invalid_argument("peak_unit: empty channel");
  }
  int br = 0, bc = 0;
  T best = plane[0];
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const T v = plane[static_cast<std::int64_t>(y) * width + x];
      if (v > best) {
        best = v;
        br = y;
        bc = x;
      }
    }
  }
  return {{br, bc}, best};
}

/// One ratio uniform on [lo, hi]; consumes exactly one draw from `rng`.
inline double sample_gamma(const GammaRange& range, Rng& rng) {
  range.validate();
  return rng.uniform(range.lo, range.hi);
}

/// Builds the binary mask for one sample: pick the reference channel by mean
/// activation, threshold it at gamma times its peak, and retain the strictly
/// exceeding positions. A non-positive peak (e.g. an all-zero post-ReLU
/// stack) yields an all-ones mask so the layer degrades to the identity.
template <class T>
FocusMask build_focus_mask(const FeatureStackT<T>& stack, double gamma) {
  FocusMask mask;
  mask.height = stack.height;
  mask.width = stack.width;
  mask.gamma = gamma;

  const std::vector<T> weights = channel_mean_activations(stack);
  mask.ref_channel = select_reference_channel<T>(weights);

  const T* ref = stack.channel(mask.ref_channel);
  const auto [pos, peak] = peak_unit(ref, stack.height, stack.width);
  mask.peak_row = pos.first;
  mask.peak_col = pos.second;
  mask.peak_value = static_cast<double>(peak);

  const T threshold = static_cast<T>(gamma) * peak;
  mask.threshold = static_cast<double>(threshold);

  const std::int64_t plane = stack.plane();
  mask.bits.resize(static_cast<std::size_t>(plane));
  if (peak <= T(0)) {
    mask.degenerate = true;
    for (auto& b : mask.bits) b = 1;
    return mask;
  }
  for (std::int64_t i = 0; i < plane; ++i) {
    mask.bits[static_cast<std::size_t>(i)] = ref[i] > threshold ? 1 : 0;
  }
  return mask;
}

/// Flips every bit; the opposite ablation drops the focused area instead.
inline FocusMask invert_mask(const FocusMask& mask) {
  FocusMask out = mask;
  for (auto& b : out.bits) b = b ? 0 : 1;
  return out;
}

namespace detail {

/// Expands per-sample masks into an (N,1,H,W) {0,1} tensor for broadcasting.
template <class T>
TensorT<T> masks_to_tensor(const std::vector<FocusMask>& masks, int batch, int h, int w) {
  TensorT<T> m(Shape{batch, 1, h, w});
  auto pm = m.data();
  for (int n = 0; n < batch; ++n) {
    const auto& bits = masks[static_cast<std::size_t>(n)].bits;
    T* dst = &pm[static_cast<std::size_t>(n) * h * w];
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
      dst[static_cast<std::size_t>(i)] = static_cast<T>(bits[static_cast<std::size_t>(i)]);
    }
  }
  return m;
}

}  // namespace detail

/// Per-sample masks for a whole batch. Each sample gets its own derived RNG
/// stream (sample index mixed into the seed), so the result is independent of
/// evaluation order.
template <class T>
std::vector<FocusMask> focus_masks_for_batch(const TensorT<T>& batch,
                                             const GammaRange& range, const Rng& rng) {
  if (batch.ndim() != 4) {
    throw std::invalid_argument("focused dropout: expected 4-d activations, got " +
                                shape_str(batch.shape()));
  }
  range.validate();
  std::vector<FocusMask> masks;
  masks.reserve(static_cast<std::size_t>(batch.dim(0)));
  for (int n = 0; n < batch.dim(0); ++n) {
    Rng sample_rng = rng.fork(static_cast<std::uint64_t>(n));
    const double gamma = sample_gamma(range, sample_rng);
    masks.push_back(build_focus_mask(FeatureStackT<T>::from_batch(batch, n), gamma));
  }
  return masks;
}

/// FocusedDropout over an NCHW activation batch. Inference returns the input
/// unchanged (no rescaling). Training builds one mask per sample with a fresh
/// gamma draw and multiplies it into every channel; gradients flow only
/// through retained units.
template <class T>
TensorT<T> apply_focused_dropout(const TensorT<T>& batch, DropoutMode mode,
                                 const GammaRange& range, const Rng& rng,
                                 TapeT<std::type_identity_t<T>>* tape = nullptr,
                                 std::vector<FocusMask>* mask_log = nullptr) {
  if (batch.ndim() != 4) {
    throw std::invalid_argument("focused dropout: expected 4-d activations, got " +
                                shape_str(batch.shape()));
  }
  if (mode == DropoutMode::Inference) return batch;
  std::vector<FocusMask> masks = focus_masks_for_batch(batch, range, rng);
  TensorT<T> m = detail::masks_to_tensor<T>(masks, batch.dim(0), batch.dim(2), batch.dim(3));
  if (mask_log != nullptr) {
    for (auto& mk : masks) mask_log->push_back(std::move(mk));
  }
  return mul(batch, m, tape);
}

}  // namespace fdrop
