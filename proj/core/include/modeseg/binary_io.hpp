#pragma once

// Little-endian float32 streams shared by rasters and checkpoints.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace modeseg {

inline std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

inline void write_f32le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      const std::uint32_t u = byteswap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&u), sizeof u);
    }
  }
}

inline std::vector<float> read_f32le(std::istream& in, std::size_t count) {
  std::vector<float> values(count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : values) f = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(f)));
  }
  return values;
}

/// FNV-1a over raw bytes; used as a weight fingerprint.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes,
                           std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace modeseg
