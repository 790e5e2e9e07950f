#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "segdiff/mask.hpp"
#include "segdiff/rng.hpp"

namespace segdiff {

/// A subset of foreground classes {1, .., C-1} to be zeroed out of a mask.
/// Background is never removable.
struct AblationPattern {
  int num_classes = 1;
  std::uint32_t removed_bits = 0;  // bit c set means class c is removed

  bool removes(int cls) const { return (removed_bits >> cls) & 1u; }

  static AblationPattern none(int num_classes) { return {num_classes, 0}; }

  /// Position in the canonical binary-counting enumeration.
  std::uint32_t index() const { return removed_bits >> 1; }

  std::vector<int> removed_classes() const {
    std::vector<int> out;
    for (int c = 1; c < num_classes; ++c)
      if (removes(c)) out.push_back(c);
    return out;
  }

  bool operator==(const AblationPattern&) const = default;
};

/// Deterministically zeroes exactly the pattern's classes.
inline Mask apply_pattern(const Mask& mask, const AblationPattern& pattern) {
  if (pattern.num_classes != mask.num_classes)
    throw std::invalid_argument("apply_pattern: pattern C=" +
                                std::to_string(pattern.num_classes) + " vs mask C=" +
                                std::to_string(mask.num_classes));
  Mask out = mask;
  for (auto& v : out.labels)
    if (v != 0 && pattern.removes(v)) v = 0;
  return out;
}

/// Per-class independent fair coins: each foreground class is removed with
/// probability 1/2, which makes all 2^(C-1) patterns equally likely.
inline std::pair<Mask, AblationPattern> ablate_random(const Mask& mask, Rng& rng) {
  AblationPattern pattern{mask.num_classes, 0};
  for (int c = 1; c < mask.num_classes; ++c)
    if (rng.bernoulli(0.5)) pattern.removed_bits |= (1u << c);
  return {apply_pattern(mask, pattern), pattern};
}

/// All 2^(C-1) patterns in binary-counting order over classes {1, .., C-1}.
inline std::vector<AblationPattern> enumerate_patterns(int num_classes) {
  if (num_classes < 1)
    throw std::invalid_argument("enumerate_patterns: C must be >= 1");
  if (num_classes > 24)
    throw std::invalid_argument("enumerate_patterns: C = " +
                                std::to_string(num_classes) + " would enumerate 2^" +
                                std::to_string(num_classes - 1) + " patterns");
  const std::uint32_t count = 1u << (num_classes - 1);
  std::vector<AblationPattern> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i)
    out.push_back({num_classes, i << 1});
  return out;
}

}  // namespace segdiff
