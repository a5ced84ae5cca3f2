#include "doctest.h"

#include <map>

#include "lla/errors.hpp"
#include "lla/fabric.hpp"
#include "oracles.hpp"

using namespace lla;

namespace {

// Stage-by-stage evaluation of the same wiring, unrolled instead of recursive.
// Depth d works on blocks of m >> d lanes whose switches start at b * s/2.
std::vector<int> unrolled_benes(const KeyBits &bits, std::vector<int> v) {
  const std::size_t m = v.size();
  const std::size_t k = log2_exact(m);
  const std::size_t half = m / 2;
  auto bit = [&](std::size_t stage, std::size_t sw) { return bits[stage * half + sw] != 0; };
  for (std::size_t d = 0; d + 1 < k; ++d) {
    const std::size_t s = m >> d;
    std::vector<int> next(m);
    for (std::size_t b = 0; b < m / s; ++b) {
      for (std::size_t w = 0; w < s / 2; ++w) {
        int a = v[b * s + 2 * w], c = v[b * s + 2 * w + 1];
        if (bit(d, b * s / 2 + w)) {
          std::swap(a, c);
        }
        next[b * s + w] = a;
        next[b * s + s / 2 + w] = c;
      }
    }
    v = next;
  }
  for (std::size_t b = 0; b < half; ++b) {
    if (bit(k - 1, b)) {
      std::swap(v[2 * b], v[2 * b + 1]);
    }
  }
  for (std::size_t d = k - 1; d-- > 0;) {
    const std::size_t s = m >> d;
    const std::size_t stage = 2 * k - 2 - d;
    std::vector<int> next(m);
    for (std::size_t b = 0; b < m / s; ++b) {
      for (std::size_t w = 0; w < s / 2; ++w) {
        int a = v[b * s + w], c = v[b * s + s / 2 + w];
        if (bit(stage, b * s / 2 + w)) {
          std::swap(a, c);
        }
        next[b * s + 2 * w] = a;
        next[b * s + 2 * w + 1] = c;
      }
    }
    v = next;
  }
  return v;
}

std::vector<int> iota_lanes(std::size_t m) {
  std::vector<int> v(m);
  for (std::size_t i = 0; i < m; ++i) {
    v[i] = static_cast<int>(i);
  }
  return v;
}

// out[pi[i]] = in[i]
bool realises(const Permutation &pi, const std::vector<int> &out) {
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (out[pi[i]] != static_cast<int>(i)) {
      return false;
    }
  }
  return true;
}

} // namespace

TEST_CASE("fabric geometry") {
  for (std::size_t k = 1; k <= 6; ++k) {
    const BenesFabric f(std::size_t{1} << k);
    CHECK(f.stages() == 2 * k - 1);
    CHECK(f.bit_count() == (2 * k - 1) * (std::size_t{1} << (k - 1)));
    CHECK(f.bit_index(2, 1) == 2 * f.switches_per_stage() + 1);
  }
  CHECK_THROWS_AS(BenesFabric(6), InputError);
  CHECK_THROWS_AS(BenesFabric(1), InputError);
}

TEST_CASE("routing is exhaustive for small fabrics") {
  for (std::size_t m : {2u, 4u, 8u}) {
    const BenesFabric f(m);
    std::size_t failures = 0;
    for (const auto &pi : oracle::all_permutations(m)) {
      const auto bits = f.route(pi);
      const auto in = iota_lanes(m);
      const auto out = f.eval<int>(bits, in);
      if (!realises(pi, out) || unrolled_benes(bits, in) != out || f.permutation(bits) != pi) {
        ++failures;
      }
    }
    CHECK(failures == 0);
  }
}

TEST_CASE("routing holds for random permutations on larger fabrics") {
  SplitMix64 g(Seed{17});
  for (std::size_t m : {16u, 32u, 64u}) {
    const BenesFabric f(m);
    std::size_t failures = 0;
    for (int trial = 0; trial < 200; ++trial) {
      Permutation pi = identity_permutation(m);
      for (std::size_t i = m - 1; i > 0; --i) {
        std::swap(pi[i], pi[g.below(i + 1)]);
      }
      const auto bits = f.route(pi);
      if (!realises(pi, unrolled_benes(bits, iota_lanes(m)))) {
        ++failures;
      }
    }
    CHECK(failures == 0);
  }
}

TEST_CASE("the identity routes to all-pass on the first stage") {
  const BenesFabric f(8);
  const auto bits = f.route(identity_permutation(8));
  for (std::size_t w = 0; w < 4; ++w) {
    CHECK(bits[f.bit_index(0, w)] == 0);
  }
  CHECK(f.permutation(bits) == identity_permutation(8));
}

TEST_CASE("every bit pattern of a 4-lane fabric yields a permutation") {
  const BenesFabric f(4);
  std::map<Permutation, int> seen;
  for (unsigned mask = 0; mask < (1u << f.bit_count()); ++mask) {
    KeyBits bits(f.bit_count());
    for (std::size_t b = 0; b < bits.size(); ++b) {
      bits[b] = (mask >> b) & 1u;
    }
    const auto p = f.permutation(bits);
    CHECK(is_permutation(p));
    CHECK(unrolled_benes(bits, iota_lanes(4)) == f.eval<int>(bits, iota_lanes(4)));
    ++seen[p];
  }
  // 64 patterns cover all 24 permutations.
  CHECK(seen.size() == 24);
}

TEST_CASE("route and eval reject bad input") {
  const BenesFabric f(4);
  CHECK_THROWS_AS(f.route(Permutation{0, 0, 1, 2}), InputError);
  CHECK_THROWS_AS(f.route(Permutation{0, 1}), InputError);
  const KeyBits short_bits(5);
  const std::vector<int> lanes{0, 1, 2, 3};
  CHECK_THROWS_AS(f.eval<int>(short_bits, lanes), InputError);
}

TEST_CASE("key length per neuron") {
  CHECK(bits_per_lane(2) == 0.5);
  CHECK(bits_per_lane(4) == 1.5);
  CHECK(bits_per_lane(16) == 3.5);
  CHECK(key_bit_count(64, 16) == 4 * 7 * 8);
  CHECK(key_bit_count(8192, 16) == 28672);
  CHECK(key_bit_count(8192, 4) == 12288);
  CHECK_THROWS_AS(key_bit_count(64, 1), InputError);
  CHECK_THROWS_AS(key_bit_count(64, 3), InputError);
  CHECK_THROWS_AS(key_bit_count(24, 16), InputError);
}

TEST_CASE("group-local permutations") {
  CHECK(is_group_local(Permutation{1, 0, 3, 2}, 2));
  CHECK_FALSE(is_group_local(Permutation{2, 0, 3, 1}, 2));
  const auto pi = random_group_local_permutation(64, 8, Seed{3});
  CHECK(is_permutation(pi));
  CHECK(is_group_local(pi, 8));
  CHECK(pi == random_group_local_permutation(64, 8, Seed{3}));
  CHECK(pi != random_group_local_permutation(64, 8, Seed{4}));
}

TEST_CASE("random group-local permutations are close to uniform") {
  std::map<Permutation, int> counts;
  const int draws = 24000;
  for (int t = 0; t < draws; ++t) {
    ++counts[random_group_local_permutation(4, 4, Seed{static_cast<std::uint64_t>(t) + 100})];
  }
  REQUIRE(counts.size() == 24);
  double chi2 = 0.0;
  for (const auto &[p, c] : counts) {
    const double e = draws / 24.0;
    chi2 += (c - e) * (c - e) / e;
  }
  // 23 degrees of freedom; 0.1% critical value is about 49.7.
  CHECK(chi2 < 49.7);
}

TEST_CASE("concatenated keys decode and apply group by group") {
  const std::size_t n = 32, m = 8;
  const auto pi = random_group_local_permutation(n, m, Seed{5});
  const auto key = key_material(pi, m);
  CHECK(key.bit_count() == key_bit_count(n, m));
  CHECK(key.bits_per_neuron() == 2.5);
  CHECK(decode_key(key.bits, n, m) == pi);

  std::vector<float> lanes(n);
  for (std::size_t i = 0; i < n; ++i) {
    lanes[i] = static_cast<float>(i) + 0.5f;
  }
  const auto expect = apply_permutation<float>(pi, lanes);
  apply_grouped_key<float>(key.bits, m, lanes);
  CHECK(lanes == expect);

  // Bits of group g live at [g * bits_per_group, (g + 1) * bits_per_group).
  const BenesFabric f(m);
  for (std::size_t g = 0; g < n / m; ++g) {
    const std::span<const std::uint8_t> slice(key.bits.data() + g * f.bit_count(), f.bit_count());
    const auto local = f.permutation(slice);
    for (std::size_t i = 0; i < m; ++i) {
      CHECK(pi[g * m + i] == g * m + local[i]);
    }
  }
  CHECK_THROWS_AS(decode_key(key.bits, n, 16), InputError);
}

TEST_CASE("LLAK key files are bit-exact") {
  // n = m = 4: one fabric of 3 stages x 2 switches.
  const KeyBits bits{1, 0, 1, 1, 0, 0};
  const auto bytes = encode_key(bits, 4, 4);
  REQUIRE(bytes.size() == 17);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "LLAK");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 4);
  CHECK(bytes[12] == 4);
  // bit 0 is the LSB of the first payload byte: 1 + 4 + 8
  CHECK(bytes[16] == 0x0d);
  const auto back = decode_key_file(bytes);
  CHECK(back.n == 4);
  CHECK(back.m == 4);
  CHECK(back.bits == bits);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_key_file(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_key_file(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_key_file(bad), FormatError);
  CHECK_THROWS_AS(encode_key(bits, 8, 4), InputError);
}

TEST_CASE("pack_bits fills bytes from the least significant bit") {
  CHECK(pack_bits(KeyBits{1, 1, 1, 1, 1, 1, 1, 1, 1}) == std::vector<unsigned char>{0xff, 0x01});
  CHECK(pack_bits(KeyBits{}).empty());
}
