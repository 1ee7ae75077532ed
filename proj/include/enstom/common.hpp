#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace enstom {

// Thrown for malformed input data (bad schema, bad file, bad record).
// CLI maps this to exit code 3; everything else unexpected maps to 4.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kToolVersion = "0.1.0";

// FNV-1a, used for content digests and for deriving per-tensor RNG streams.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

std::string hex64(std::uint64_t v);

}  // namespace enstom
