#pragma once

#include <cstdint>
#include <stdexcept>
#include <type_traits>
#include <string>
#include <vector>

#include "fdrop/focused_dropout.hpp"
#include "fdrop/ops.hpp"
#include "fdrop/rng.hpp"

namespace fdrop {

enum class RegKind { None, Standard, Spatial, DropBlock, Focused, Opposite };

inline const char* reg_kind_name(RegKind k) {
  switch (k) {
    case RegKind::None: return "none";
    case RegKind::Standard: return "standard";
    case RegKind::Spatial: return "spatial";
    case RegKind::DropBlock: return "dropblock";
    case RegKind::Focused: return "focused";
    case RegKind::Opposite: return "opposite";
  }
  return "?";
}

inline RegKind reg_kind_from_name(const std::string& name) {
  if (name == "none") return RegKind::None;
  if (name == "standard") return RegKind::Standard;
  if (name == "spatial") return RegKind::Spatial;
  if (name == "dropblock") return RegKind::DropBlock;
  if (name == "focused") return RegKind::Focused;
  if (name == "opposite") return RegKind::Opposite;
  throw std::invalid_argument(
      "unknown regularizer kind '" + name +
      "' (known: none, standard, spatial, dropblock, focused, opposite)");
}

/// Tagged choice of regularizer plus its parameters and where in the network
/// it applies. insertion_points hold named stage outputs; the keyword
/// "penultimate" resolves to the model's second-to-last stage.
struct RegularizerSpec {
  RegKind kind = RegKind::None;
  double drop_prob = 0.5;                 // standard / spatial
  int block_size = 3;                     // dropblock
  double keep_prob = 0.9;                 // dropblock
  GammaRange gamma;                       // focused / opposite
  std::vector<std::string> insertion_points = {"penultimate"};

  void validate() const {
    switch (kind) {
      case RegKind::Standard:
      case RegKind::Spatial:
        if (drop_prob < 0.0 || drop_prob >= 1.0) {
          throw std::invalid_argument("regularizer: drop probability must be in [0,1), got " +
                                      std::to_string(drop_prob));
        }
        break;
      case RegKind::DropBlock:
        if (block_size < 1) {
          throw std::invalid_argument("regularizer: block_size must be >= 1");
        }
        if (keep_prob < 0.0 || keep_prob > 1.0) {
          throw std::invalid_argument("regularizer: keep_prob must be in [0,1], got " +
                                      std::to_string(keep_prob));
        }
        break;
      case RegKind::Focused:
      case RegKind::Opposite:
        gamma.validate();
        break;
      case RegKind::None:
        break;
    }
  }
};

/// Conventional unit dropout with inverted-dropout rescaling: each unit is
/// zeroed independently with probability p, survivors are scaled by 1/(1-p).
/// Identity at inference.
template <class T>
TensorT<T> standard_dropout(const TensorT<T>& batch, double p, DropoutMode mode,
                            const Rng& rng, TapeT<std::type_identity_t<T>>* tape = nullptr) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("standard_dropout: p must be in [0,1), got " +
                                std::to_string(p));
  }
  if (mode == DropoutMode::Inference || p == 0.0) return batch;
  if (batch.ndim() != 4) {
    throw std::invalid_argument("standard_dropout: expected 4-d activations, got " +
                                shape_str(batch.shape()));
  }
  const int n = batch.dim(0);
  const std::int64_t per_sample = batch.size() / n;
  TensorT<T> m(batch.shape());
  auto pm = m.data();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (int i = 0; i < n; ++i) {
    Rng sr = rng.fork(static_cast<std::uint64_t>(i));
    T* dst = &pm[static_cast<std::size_t>(i) * per_sample];
    for (std::int64_t j = 0; j < per_sample; ++j) {
      dst[static_cast<std::size_t>(j)] = sr.uniform() < p ? T(0) : scale;
    }
  }
  return mul(batch, m, tape);
}

/// SpatialDropout: whole channels are zeroed per sample with probability p,
/// surviving channels are scaled by 1/(1-p). Identity at inference.
template <class T>
TensorT<T> spatial_dropout(const TensorT<T>& batch, double p, DropoutMode mode,
                           const Rng& rng, TapeT<std::type_identity_t<T>>* tape = nullptr) {
  if (p < 0.0 || p >= 1.0) {
    throw std::invalid_argument("spatial_dropout: p must be in [0,1), got " +
                                std::to_string(p));
  }
  if (mode == DropoutMode::Inference || p == 0.0) return batch;
  if (batch.ndim() != 4) {
    throw std::invalid_argument("spatial_dropout: expected 4-d activations, got " +
                                shape_str(batch.shape()));
  }
  const int n = batch.dim(0), ch = batch.dim(1);
  TensorT<T> m(Shape{n, ch, 1, 1});
  auto pm = m.data();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (int i = 0; i < n; ++i) {
    Rng sr = rng.fork(static_cast<std::uint64_t>(i));
    for (int c = 0; c < ch; ++c) {
      pm[static_cast<std::size_t>(i) * ch + c] = sr.uniform() < p ? T(0) : scale;
    }
  }
  return mul(batch, m, tape);
}

namespace detail {

/// Seed probability from the DropBlock paper: chosen so the expected dropped
/// fraction is about 1 - keep_prob once seeds are inflated to blocks.
inline double dropblock_seed_prob(double keep_prob, int block, int h, int w) {
  const double valid_h = static_cast<double>(h - block + 1);
  const double valid_w = static_cast<double>(w - block + 1);
  return (1.0 - keep_prob) / (static_cast<double>(block) * block) *
         (static_cast<double>(h) * w) / (valid_h * valid_w);
}

}  // namespace detail

/// DropBlock: contiguous block_size x block_size squares are zeroed around
/// Bernoulli-sampled seed positions (seeds confined so blocks stay in
/// bounds), independently per sample and channel; survivors are rescaled by
/// total/kept per feature map. Identity at inference.
template <class T>
TensorT<T> dropblock(const TensorT<T>& batch, int block_size, double keep_prob,
                     DropoutMode mode, const Rng& rng, TapeT<std::type_identity_t<T>>* tape = nullptr) {
  if (batch.ndim() != 4) {
    throw std::invalid_argument("dropblock: expected 4-d activations, got " +
                                shape_str(batch.shape()));
  }
  const int n = batch.dim(0), ch = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (block_size < 1 || block_size > h || block_size > w) {
    throw std::invalid_argument("dropblock: block_size " + std::to_string(block_size) +
                                " does not fit feature map " + shape_str(batch.shape()));
  }
  if (keep_prob < 0.0 || keep_prob > 1.0) {
    throw std::invalid_argument("dropblock: keep_prob must be in [0,1], got " +
                                std::to_string(keep_prob));
  }
  if (mode == DropoutMode::Inference || keep_prob == 1.0) return batch;

  const double seed_p = detail::dropblock_seed_prob(keep_prob, block_size, h, w);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  TensorT<T> m(batch.shape());
  auto pm = m.data();
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(plane));
  for (int i = 0; i < n; ++i) {
    Rng sr = rng.fork(static_cast<std::uint64_t>(i));
    for (int c = 0; c < ch; ++c) {
      std::fill(keep.begin(), keep.end(), std::uint8_t(1));
      for (int y = 0; y + block_size <= h; ++y) {
        for (int x = 0; x + block_size <= w; ++x) {
          if (sr.uniform() < seed_p) {
            for (int by = 0; by < block_size; ++by) {
              std::uint8_t* row = &keep[static_cast<std::size_t>(y + by) * w + x];
              for (int bx = 0; bx < block_size; ++bx) row[bx] = 0;
            }
          }
        }
      }
      std::int64_t kept = 0;
      for (auto k : keep) kept += k;
      const T scale = kept > 0 ? static_cast<T>(static_cast<double>(plane) / static_cast<double>(kept))
                               : T(0);
      T* dst = &pm[static_cast<std::size_t>((static_cast<std::int64_t>(i) * ch + c) * plane)];
      for (std::int64_t j = 0; j < plane; ++j) {
        dst[static_cast<std::size_t>(j)] = keep[static_cast<std::size_t>(j)] ? scale : T(0);
      }
    }
  }
  return mul(batch, m, tape);
}

/// The ablation that discards the focused area: identical pipeline to
/// FocusedDropout but with the per-sample mask inverted before broadcasting.
template <class T>
TensorT<T> opposite_dropout(const TensorT<T>& batch, DropoutMode mode,
                            const GammaRange& range, const Rng& rng,
                            TapeT<std::type_identity_t<T>>* tape = nullptr,
                            std::vector<FocusMask>* mask_log = nullptr) {
  if (batch.ndim() != 4) {
    throw std::invalid_argument("opposite dropout: expected 4-d activations, got " +
                                shape_str(batch.shape()));
  }
  if (mode == DropoutMode::Inference) return batch;
  std::vector<FocusMask> masks = focus_masks_for_batch(batch, range, rng);
  for (auto& mk : masks) mk = invert_mask(mk);
  TensorT<T> m = detail::masks_to_tensor<T>(masks, batch.dim(0), batch.dim(2), batch.dim(3));
  if (mask_log != nullptr) {
    for (auto& mk : masks) mask_log->push_back(std::move(mk));
  }
  return mul(batch, m, tape);
}

/// Routes an activation batch through the regularizer named by `spec`.
template <class T>
TensorT<T> apply_regularizer(const TensorT<T>& batch, const RegularizerSpec& spec,
                             DropoutMode mode, const Rng& rng, TapeT<std::type_identity_t<T>>* tape = nullptr,
                             std::vector<FocusMask>* mask_log = nullptr) {
  switch (spec.kind) {
    case RegKind::None:
      return batch;
    case RegKind::Standard:
      return standard_dropout(batch, spec.drop_prob, mode, rng, tape);
    case RegKind::Spatial:
      return spatial_dropout(batch, spec.drop_prob, mode, rng, tape);
    case RegKind::DropBlock:
      return dropblock(batch, spec.block_size, spec.keep_prob, mode, rng, tape);
    case RegKind::Focused:
      return apply_focused_dropout(batch, mode, spec.gamma, rng, tape, mask_log);
    case RegKind::Opposite:
      return opposite_dropout(batch, mode, spec.gamma, rng, tape, mask_log);
  }
  throw std::logic_error("apply_regularizer: unhandled kind");
}

}  // namespace fdrop
