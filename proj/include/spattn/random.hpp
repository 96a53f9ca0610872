#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace spattn {

/// Purpose tags for independent random streams derived from one seed.
enum class Stream : std::uint64_t {
  kTeacher = 1,
  kTokens = 2,
  kStyles = 3,
  kNoise = 4,
  kInit = 5,
  kBatches = 6,
  kShiftDirection = 7,
  kLengths = 8,
  kGradcheck = 9,
};

/// splitmix64 finalizer; used to derive stream seeds.
std::uint64_t mix64(std::uint64_t x);

/// Seedable generator (std::mt19937_64) with distribution transforms written
/// out explicitly so that sampled values do not depend on the standard
/// library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per call, spare cached).
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace spattn
