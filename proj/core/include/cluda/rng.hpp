#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace cluda {

// Deterministic random source. The engine is std::mt19937_64 (bit-stable by
// the standard); the derived draws below avoid std distributions, whose output
// is implementation defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Unbiased integer in [0, bound). bound must be > 0.
  std::uint64_t uniform_u64(std::uint64_t bound);

  std::size_t uniform_index(std::size_t bound) {
    return static_cast<std::size_t>(uniform_u64(static_cast<std::uint64_t>(bound)));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one value per call, deterministic).
  double gaussian();

  // k distinct indices from [0, n), in increasing order.
  std::vector<int> sample_without_replacement(int n, int k);

  // Stable derivation of an independent stream, e.g. per sample or per worker.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index);

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cluda
