#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace powerfd {

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;

/// FNV-1a 64, chainable through `h`.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = kFnvOffset) {
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()), h);
}

}  // namespace powerfd
