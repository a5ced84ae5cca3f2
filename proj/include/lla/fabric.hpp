#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "lla/linalg.hpp"
#include "lla/rng.hpp"

namespace lla {

// One control bit per byte (0 = pass, 1 = swap).
using KeyBits = std::vector<std::uint8_t>;

// Benes network over m = 2^k lanes: 2k - 1 stages of m/2 two-by-two switches.
//
// The topology is recursive. For a sub-network of size s occupying stages
// [lo, lo + 2 log2 s - 2] and switches [base, base + s/2):
//   * first stage: switch w takes lanes 2w, 2w+1; its upper output feeds
//     input w of the upper half network, its lower output input w of the
//     lower half network;
//   * the upper half network uses switches [base, base + s/4) and the lower
//     half [base + s/4, base + s/2) in stages lo+1 .. lo + 2 log2 s - 3;
//   * last stage: switch w takes output w of the upper and output w of the
//     lower half network and drives lanes 2w, 2w+1.
// Control bit of (stage, switch) sits at index stage * m/2 + switch.
class BenesFabric {
public:
  explicit BenesFabric(std::size_t lanes);

  std::size_t lanes() const { return lanes_; }
  std::size_t stages() const { return stages_; }
  std::size_t switches_per_stage() const { return lanes_ / 2; }
  std::size_t bit_count() const { return stages_ * (lanes_ / 2); }
  std::size_t bit_index(std::size_t stage, std::size_t sw) const {
    return stage * (lanes_ / 2) + sw;
  }

  // Control bits realising out[pi[i]] = in[i]. Loops are closed starting from
  // the lowest unrouted input, which is sent to the upper half network.
  KeyBits route(const Permutation &pi) const;

  template <typename T> std::vector<T> eval(std::span<const std::uint8_t> bits,
                                            std::span<const T> in) const {
    check_eval(bits.size(), in.size());
    std::vector<T> values(in.begin(), in.end());
    eval_rec(bits, values, 0, 0);
    return values;
  }

  // The permutation pi (out[pi[i]] = in[i]) encoded by a bit pattern.
  Permutation permutation(std::span<const std::uint8_t> bits) const;

private:
  void check_eval(std::size_t bits, std::size_t lanes) const;
  void route_rec(const Permutation &pi, KeyBits &bits, std::size_t stage_lo,
                 std::size_t base) const;

  template <typename T>
  void eval_rec(std::span<const std::uint8_t> bits, std::vector<T> &v, std::size_t stage_lo,
                std::size_t base) const {
    const std::size_t size = v.size();
    if (size == 2) {
      if (bits[bit_index(stage_lo, base)]) {
        std::swap(v[0], v[1]);
      }
      return;
    }
    const std::size_t half = size / 2;
    std::vector<T> upper(half), lower(half);
    for (std::size_t w = 0; w < half; ++w) {
      T a = v[2 * w];
      T b = v[2 * w + 1];
      if (bits[bit_index(stage_lo, base + w)]) {
        std::swap(a, b);
      }
      upper[w] = std::move(a);
      lower[w] = std::move(b);
    }
    eval_rec(bits, upper, stage_lo + 1, base);
    eval_rec(bits, lower, stage_lo + 1, base + half / 2);
    const std::size_t last = stage_lo + 2 * log2_exact(size) - 2;
    for (std::size_t w = 0; w < half; ++w) {
      T a = std::move(upper[w]);
      T b = std::move(lower[w]);
      if (bits[bit_index(last, base + w)]) {
        std::swap(a, b);
      }
      v[2 * w] = std::move(a);
      v[2 * w + 1] = std::move(b);
    }
  }

  std::size_t lanes_;
  std::size_t stages_;
};

KeyBits benes_route(const Permutation &pi);

template <typename T>
std::vector<T> benes_eval(std::span<const std::uint8_t> bits, std::span<const T> lanes) {
  return BenesFabric(lanes.size()).eval(bits, lanes);
}

// Key bits per lane for group size m: (2 log2 m - 1) / 2.
double bits_per_lane(std::size_t m);
std::size_t key_bit_count(std::size_t n, std::size_t m);

struct GroupedKey {
  std::size_t n = 0;
  std::size_t m = 0;
  Permutation pi; // group-local permutation of n lanes
  KeyBits bits;   // group-major, then stage-major, then switch index

  std::size_t bit_count() const { return bits.size(); }
  double bits_per_neuron() const {
    return n ? static_cast<double>(bits.size()) / static_cast<double>(n) : 0.0;
  }
};

bool is_group_local(const Permutation &pi, std::size_t m);
void check_group_size(std::size_t n, std::size_t m);

GroupedKey key_material(const Permutation &pi, std::size_t m);

// Uniform random group-local permutation (Fisher-Yates within each group).
Permutation random_group_local_permutation(std::size_t n, std::size_t m, Seed seed);

// Group-local permutation encoded by a concatenated key.
Permutation decode_key(std::span<const std::uint8_t> bits, std::size_t n, std::size_t m);

// Applies every group's fabric to consecutive lanes [g*m, (g+1)*m) of `lanes`
// (length n).
template <typename T>
void apply_grouped_key(std::span<const std::uint8_t> bits, std::size_t m, std::span<T> lanes) {
  const BenesFabric fabric(m);
  const std::size_t per_group = fabric.bit_count();
  for (std::size_t g = 0; g * m < lanes.size(); ++g) {
    auto group = lanes.subspan(g * m, m);
    const auto out = fabric.eval<T>(bits.subspan(g * per_group, per_group),
                                    std::span<const T>(group.data(), group.size()));
    std::copy(out.begin(), out.end(), group.begin());
  }
}

// LLAK key file: "LLAK" | u32 version = 1 | u32 n | u32 m |
// ceil(bits / 8) bytes, bit 0 is the least significant bit of byte 0.
std::vector<unsigned char> encode_key(const KeyBits &bits, std::size_t n, std::size_t m);
struct KeyFile {
  std::size_t n = 0;
  std::size_t m = 0;
  KeyBits bits;
};
KeyFile decode_key_file(const std::vector<unsigned char> &bytes);
void save_key(const std::filesystem::path &path, const KeyBits &bits, std::size_t n,
              std::size_t m);
KeyFile load_key(const std::filesystem::path &path);

std::vector<unsigned char> pack_bits(const KeyBits &bits);

} // namespace lla
