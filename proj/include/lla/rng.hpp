#pragma once

#include <cstdint>
#include <span>

namespace lla {

struct Seed {
  std::uint64_t value = 0;
  friend bool operator==(Seed, Seed) = default;
};

// splitmix64. Every stochastic component in the library draws from this
// generator so that identical seeds give identical streams on any platform.
class SplitMix64 {
public:
  explicit SplitMix64(Seed seed) : state_(seed.value) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound) via 128-bit multiply-high.
  std::uint64_t below(std::uint64_t bound);

  // +1 or -1 from the top bit.
  float sign() { return (next() >> 63) ? -1.0f : 1.0f; }

  // Standard normal via Box-Muller; consumes exactly two draws.
  double normal();

  template <typename T> void shuffle(std::span<T> values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(values[i - 1], values[j]);
    }
  }

private:
  std::uint64_t state_;
};

// Derives an independent child seed; used to give each worker or individual
// its own stream so results never depend on scheduling.
Seed derive_seed(Seed parent, std::uint64_t stream);

} // namespace lla
