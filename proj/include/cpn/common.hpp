#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cpn {

/// Error type for contract violations (bad indices, malformed inputs,
/// scheduler bugs). Expected outcomes like infeasible solves are reported
/// through status codes instead.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic 64-bit generator (splitmix64). All randomness in the
/// simulator flows through this class so that runs are reproducible
/// bit-for-bit across platforms; std:: distributions are avoided because
/// their output is implementation defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  /// Derives an independent stream seed from a base seed and a tag.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
    Rng r(seed ^ (0xA0761D6478BD642FULL * (tag + 1)));
    r.next_u64();
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
};

/// Formats a double with enough digits to round-trip exactly.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

/// Shorter form for human-facing reports.
inline std::string format_compact(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", x);
  return buf;
}

}  // namespace cpn
