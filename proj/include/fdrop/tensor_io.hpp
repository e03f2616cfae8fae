#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "fdrop/tensor.hpp"

namespace fdrop {

// Tensor snapshot format: magic "FNT1", u32 rank, u32 dims[rank], f32 payload,
// all little-endian. Payload is f32 regardless of the in-memory scalar type.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("tensor snapshot: truncated while reading u32");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
  const std::uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <class T>
void save_tensor(std::ostream& os, const TensorT<T>& t) {
  os.write("FNT1", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.ndim()));
  for (int d = 0; d < t.ndim(); ++d) {
    detail::write_u32(os, static_cast<std::uint32_t>(t.dim(d)));
  }
  for (const T v : t.data()) detail::write_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("tensor snapshot: write failed");
}

template <class T>
TensorT<T> load_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FNT1", 4) != 0) {
    throw std::runtime_error("tensor snapshot: bad magic (expected FNT1)");
  }
  const std::uint32_t rank = detail::read_u32(is);
  if (rank > 8) {
    throw std::runtime_error("tensor snapshot: implausible rank " + std::to_string(rank));
  }
  Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) {
    shape[d] = static_cast<int>(detail::read_u32(is));
  }
  TensorT<T> t(shape);
  for (auto& v : t.data()) {
    v = static_cast<T>(detail::read_f32(is));
    if (!is) throw std::runtime_error("tensor snapshot: truncated payload");
  }
  return t;
}

template <class T>
void save_tensor_file(const std::string& path, const TensorT<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("tensor snapshot: cannot open " + path + " for writing");
  save_tensor(os, t);
}

template <class T>
TensorT<T> load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("tensor snapshot: cannot open " + path);
  return load_tensor<T>(is);
}

}  // namespace fdrop
