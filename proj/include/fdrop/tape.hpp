#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fdrop/tensor.hpp"

namespace fdrop {

/// Ordered record of executed differentiable operations.
///
/// Each op that participates in gradient computation pushes one closure
/// holding its saved intermediates. backward() seeds the loss gradient with 1
/// and replays the closures in exact reverse execution order; every closure
/// adds into its inputs' gradient buffers.
template <class T>
class TapeT {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }

  std::size_t size() const { return nodes_.size(); }

  void backward(TensorT<T>& loss) {
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw std::invalid_argument("backward: loss does not require grad");
    }
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<BackwardFn> nodes_;
};

}  // namespace fdrop
