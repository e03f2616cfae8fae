#pragma once

#include <cstdint>
#include <utility>

#include "fdrop/focused_dropout.hpp"

namespace fdrop {

/// (dropped, retained) fractions of one mask. The paper calls the zeros
/// ratio "keeping_ratio"; both fractions are reported under unambiguous
/// names, and dropped + retained == 1 holds exactly.
inline std::pair<double, double> keeping_ratio(const FocusMask& mask) {
  const double dropped =
      static_cast<double>(mask.zeros()) / static_cast<double>(mask.total());
  return {dropped, 1.0 - dropped};
}

/// Streaming aggregate of per-mask dropped fractions (epoch or run level).
struct KeepStats {
  std::int64_t count = 0;
  double sum_dropped = 0.0;

  void add(const FocusMask& mask) {
    sum_dropped += keeping_ratio(mask).first;
    ++count;
  }

  void merge(const KeepStats& other) {
    count += other.count;
    sum_dropped += other.sum_dropped;
  }

  double mean_dropped() const {
    return count == 0 ? 0.0 : sum_dropped / static_cast<double>(count);
  }

  double mean_retained() const { return count == 0 ? 0.0 : 1.0 - mean_dropped(); }
};

}  // namespace fdrop
