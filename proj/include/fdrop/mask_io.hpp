#pragma once

#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "fdrop/focused_dropout.hpp"

namespace fdrop {

/// Binary PGM (P5, maxval 1) of the mask bits, 1 = retained.
inline void write_mask_pgm(const FocusMask& mask, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("mask pgm: cannot open " + path);
  os << "P5\n" << mask.width << " " << mask.height << "\n1\n";
  os.write(reinterpret_cast<const char*>(mask.bits.data()),
           static_cast<std::streamsize>(mask.bits.size()));
  if (!os) throw std::runtime_error("mask pgm: write failed for " + path);
}

/// Mask bits as CSV, one row per mask row.
inline void write_mask_csv(const FocusMask& mask, std::ostream& os) {
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (x) os << ",";
      os << static_cast<int>(mask.at(y, x));
    }
    os << "\n";
  }
}

inline const char* mask_metadata_csv_header() {
  return "sample,ref_channel,gamma,threshold,peak_row,peak_col,peak_value,"
         "dropped_fraction,retained_fraction,degenerate";
}

/// One metadata row per sample mask; pairs with mask_metadata_csv_header().
inline void append_mask_metadata_csv(std::ostream& os, std::int64_t sample,
                                     const FocusMask& mask) {
  const double dropped =
      static_cast<double>(mask.zeros()) / static_cast<double>(mask.total());
  const double retained = 1.0 - dropped;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%d,%.17g,%.17g,%d,%d,%.17g,%.17g,%.17g,%d",
                static_cast<long long>(sample), mask.ref_channel, mask.gamma,
                mask.threshold, mask.peak_row, mask.peak_col, mask.peak_value,
                dropped, retained, mask.degenerate ? 1 : 0);
  os << buf << "\n";
}

}  // namespace fdrop
