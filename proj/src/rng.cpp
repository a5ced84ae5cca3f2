#include "lla/rng.hpp"

#include <cmath>
#include <numbers>

namespace lla {

std::uint64_t SplitMix64::below(std::uint64_t bound) {
  if (bound == 0) {
    return 0;
  }
  const unsigned __int128 product =
      static_cast<unsigned __int128>(next()) * static_cast<unsigned __int128>(bound);
  return static_cast<std::uint64_t>(product >> 64);
}

double SplitMix64::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Seed derive_seed(Seed parent, std::uint64_t stream) {
  SplitMix64 g(Seed{parent.value ^ (0xd1b54a32d192ed03ULL * (stream + 1))});
  g.next();
  return Seed{g.next()};
}

} // namespace lla
