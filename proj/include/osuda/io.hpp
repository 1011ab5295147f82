#pragma once

// Little-endian binary helpers shared by checkpoints and datasets.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>

namespace osuda::io {

inline std::uint64_t byteswap64(std::uint64_t x) {
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r = (r << 8) | ((x >> (8 * i)) & 0xff);
  return r;
}

inline void write_f64_le(std::ostream& os, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) bits = byteswap64(bits);
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

// Returns false on a short read.
inline bool read_f64_le(std::istream& is, std::span<double> values) {
  for (double& v : values) {
    std::uint64_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) return false;
    if constexpr (std::endian::native == std::endian::big) bits = byteswap64(bits);
    v = std::bit_cast<double>(bits);
  }
  return true;
}

}  // namespace osuda::io
