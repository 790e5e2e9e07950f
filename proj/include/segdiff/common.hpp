#pragma once

#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace segdiff {

/// Invalid or inconsistent configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File system / serialization failure (CLI exit code 3).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numerical failure such as a NaN loss or a non-convergent solver (CLI exit code 4).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(std::span<const int> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

}  // namespace segdiff
