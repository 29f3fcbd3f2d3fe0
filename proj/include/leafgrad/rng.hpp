#pragma once

#include <cstdint>
#include <iterator>
#include <random>
#include <utility>

namespace leafgrad {

// Seeded random stream backed by MT19937-64 (Matsumoto & Nishimura constants,
// fixed by the C++ standard). The std:: distributions are implementation
// defined, so every draw below is derived from raw 64-bit outputs by hand to
// keep streams identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one value per call, no cached state.
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Fisher-Yates, drawing from the high end downwards.
  template <typename RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    auto n = static_cast<std::uint64_t>(std::distance(first, last));
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = below(i);
      using std::swap;
      swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(j)]);
    }
  }

  // Independent child stream; mixing uses the SplitMix64 finalizer.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace leafgrad
