#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fdrop {

using Shape = std::vector<int>;

[[nodiscard]] inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

[[nodiscard]] inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Dense row-major n-d array with an optional same-shape gradient buffer.
///
/// Copies are shallow: they share the value and gradient buffers, which lets
/// backward closures capture operands cheaply. Values are treated as
/// immutable once an operation has produced them; gradients accumulate
/// additively during a backward pass.
template <class T>
class TensorT {
 public:
  TensorT() : s_(std::make_shared<Storage>()) {}

  explicit TensorT(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    validate_shape(shape);
    s_->shape = std::move(shape);
    s_->values.assign(static_cast<std::size_t>(numel(s_->shape)), T(0));
    if (requires_grad) set_requires_grad(true);
  }

  static TensorT from_data(Shape shape, std::vector<T> values,
                           bool requires_grad = false) {
    validate_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    TensorT t;
    t.s_->shape = std::move(shape);
    t.s_->values = std::move(values);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, T value) {
    TensorT t(std::move(shape));
    for (auto& v : t.data()) v = value;
    return t;
  }

  static TensorT ones(Shape shape) { return full(std::move(shape), T(1)); }

  static TensorT ones_like(const TensorT& other) { return ones(other.shape()); }

  static TensorT zeros_like(const TensorT& other) { return zeros(other.shape()); }

  static TensorT scalar(T value) { return full(Shape{1}, value); }

  const Shape& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->values.size()); }

  std::span<T> data() { return {s_->values.data(), s_->values.size()}; }
  std::span<const T> data() const { return {s_->values.data(), s_->values.size()}; }

  bool requires_grad() const { return s_->requires_grad; }

  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on && s_->grad.size() != s_->values.size()) {
      s_->grad.assign(s_->values.size(), T(0));
    }
  }

  bool has_grad() const { return !s_->grad.empty(); }

  std::span<T> grad() {
    if (s_->grad.empty()) {
      throw std::logic_error("tensor: grad() on tensor without gradient buffer");
    }
    return {s_->grad.data(), s_->grad.size()};
  }

  std::span<const T> grad() const {
    if (s_->grad.empty()) {
      throw std::logic_error("tensor: grad() on tensor without gradient buffer");
    }
    return {s_->grad.data(), s_->grad.size()};
  }

  void zero_grad() {
    for (auto& g : s_->grad) g = T(0);
  }

  /// Deep copy; the clone owns fresh buffers and drops gradient state.
  [[nodiscard]] TensorT clone() const {
    TensorT t;
    t.s_->shape = s_->shape;
    t.s_->values = s_->values;
    return t;
  }

  /// True when both handles share one storage (aliasing copies do).
  bool shares_storage_with(const TensorT& other) const { return s_ == other.s_; }

  T item() const {
    if (size() != 1) {
      throw std::logic_error("tensor: item() on non-scalar of shape " +
                             shape_str(shape()));
    }
    return s_->values[0];
  }

  template <class... Ix>
  T& at(Ix... ix) {
    return s_->values[offset_of(ix...)];
  }

  template <class... Ix>
  const T& at(Ix... ix) const {
    return s_->values[offset_of(ix...)];
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void validate_shape(const Shape& shape) {
    for (int d : shape) {
      if (d <= 0) {
        throw std::invalid_argument("tensor: non-positive dimension in shape " +
                                    shape_str(shape));
      }
    }
  }

  template <class... Ix>
  std::size_t offset_of(Ix... ix) const {
    const int idx[] = {static_cast<int>(ix)...};
    const int rank = static_cast<int>(sizeof...(ix));
    if (rank != ndim()) {
      throw std::logic_error("tensor: indexed with " + std::to_string(rank) +
                             " indices, shape is " + shape_str(shape()));
    }
    std::size_t off = 0;
    for (int d = 0; d < rank; ++d) {
      off = off * static_cast<std::size_t>(s_->shape[static_cast<std::size_t>(d)]) +
            static_cast<std::size_t>(idx[d]);
    }
    return off;
  }

  std::shared_ptr<Storage> s_;
};

/// Throws if any element is NaN/Inf; forward ops call this so non-finite
/// values surface at the op that produced them instead of propagating.
template <class T>
void ensure_finite(const TensorT<T>& t, const char* op) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(static_cast<double>(d[i]))) {
      throw std::runtime_error(std::string(op) +
                               ": non-finite value at flat index " +
                               std::to_string(i));
    }
  }
}

template <class T, class R>
void fill_uniform(TensorT<T>& t, R& rng, double lo, double hi) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <class T, class R>
void fill_normal(TensorT<T>& t, R& rng, double mean, double stddev) {
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(mean, stddev));
}

}  // namespace fdrop
