#include "lla/fabric.hpp"

#include <cstring>
#include <string>

#include "lla/errors.hpp"
#include "lla/tensor_io.hpp"

namespace lla {

namespace {

constexpr char kKeyMagic[4] = {'L', 'L', 'A', 'K'};
constexpr std::uint32_t kKeyVersion = 1;
constexpr std::uint8_t kUnset = 2;

void put_u32(std::vector<unsigned char> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
}

std::uint32_t get_u32(const std::vector<unsigned char> &in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(in[pos + i]) << (8 * i);
  }
  return v;
}

} // namespace

BenesFabric::BenesFabric(std::size_t lanes) : lanes_(lanes), stages_(0) {
  if (lanes < 2 || !is_power_of_two(lanes)) {
    throw InputError("Benes fabric size " + std::to_string(lanes) +
                     " must be a power of two >= 2");
  }
  stages_ = 2 * log2_exact(lanes) - 1;
}

void BenesFabric::check_eval(std::size_t bits, std::size_t lanes) const {
  if (lanes != lanes_) {
    throw InputError("Benes eval: " + std::to_string(lanes) + " lanes for a " +
                     std::to_string(lanes_) + "-lane fabric");
  }
  if (bits != bit_count()) {
    throw InputError("Benes eval: " + std::to_string(bits) + " control bits, fabric needs " +
                     std::to_string(bit_count()));
  }
}

KeyBits BenesFabric::route(const Permutation &pi) const {
  if (pi.size() != lanes_ || !is_permutation(pi)) {
    throw InputError("Benes route: input is not a permutation of " + std::to_string(lanes_) +
                     " lanes");
  }
  KeyBits bits(bit_count(), 0);
  route_rec(pi, bits, 0, 0);
  return bits;
}

void BenesFabric::route_rec(const Permutation &pi, KeyBits &bits, std::size_t stage_lo,
                            std::size_t base) const {
  const std::size_t size = pi.size();
  if (size == 2) {
    bits[bit_index(stage_lo, base)] = pi[0] == 1 ? 1 : 0;
    return;
  }
  const std::size_t half = size / 2;
  const auto inv = inverse(pi);
  std::vector<std::uint8_t> side_in(size, kUnset), side_out(size, kUnset);
  for (std::size_t start = 0; start < size; ++start) {
    if (side_in[start] != kUnset) {
      continue;
    }
    std::size_t i = start;
    const std::uint8_t side = 0;
    while (true) {
      side_in[i] = side;
      const std::size_t out = pi[i];
      side_out[out] = side;
      // The other output of that last-stage switch comes from the other half.
      const std::size_t partner_out = out ^ 1u;
      const std::size_t from = inv[partner_out];
      side_in[from] = 1 - side;
      side_out[partner_out] = 1 - side;
      // The other input of that first-stage switch goes to this half.
      const std::size_t next = from ^ 1u;
      if (side_in[next] != kUnset) {
        break;
      }
      i = next;
    }
  }
  Permutation upper(half), lower(half);
  for (std::size_t i = 0; i < size; ++i) {
    auto &sub = side_in[i] == 0 ? upper : lower;
    sub[i / 2] = pi[i] / 2;
  }
  const std::size_t last = stage_lo + 2 * log2_exact(size) - 2;
  for (std::size_t w = 0; w < half; ++w) {
    bits[bit_index(stage_lo, base + w)] = side_in[2 * w] == 1 ? 1 : 0;
    bits[bit_index(last, base + w)] = side_out[2 * w] == 1 ? 1 : 0;
  }
  route_rec(upper, bits, stage_lo + 1, base);
  route_rec(lower, bits, stage_lo + 1, base + half / 2);
}

Permutation BenesFabric::permutation(std::span<const std::uint8_t> bits) const {
  const auto lanes = identity_permutation(lanes_);
  // out[j] is the input lane that lands on j, i.e. pi^-1.
  const auto out = eval<std::uint32_t>(bits, lanes);
  return inverse(out);
}

KeyBits benes_route(const Permutation &pi) { return BenesFabric(pi.size()).route(pi); }

double bits_per_lane(std::size_t m) {
  return (2.0 * static_cast<double>(log2_exact(m)) - 1.0) / 2.0;
}

std::size_t key_bit_count(std::size_t n, std::size_t m) {
  check_group_size(n, m);
  return n / m * BenesFabric(m).bit_count();
}

void check_group_size(std::size_t n, std::size_t m) {
  if (m < 2 || !is_power_of_two(m)) {
    throw InputError("group size " + std::to_string(m) + " must be a power of two >= 2");
  }
  if (n % m != 0) {
    throw InputError("lane count " + std::to_string(n) + " is not divisible by group size " +
                     std::to_string(m));
  }
}

bool is_group_local(const Permutation &pi, std::size_t m) {
  if (!is_permutation(pi)) {
    return false;
  }
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (pi[i] / m != i / m) {
      return false;
    }
  }
  return true;
}

GroupedKey key_material(const Permutation &pi, std::size_t m) {
  check_group_size(pi.size(), m);
  if (!is_group_local(pi, m)) {
    throw InputError("key permutation is not group-local for group size " + std::to_string(m));
  }
  const BenesFabric fabric(m);
  GroupedKey key;
  key.n = pi.size();
  key.m = m;
  key.pi = pi;
  key.bits.reserve(key_bit_count(key.n, m));
  for (std::size_t g = 0; g < key.n / m; ++g) {
    Permutation local(m);
    for (std::size_t i = 0; i < m; ++i) {
      local[i] = static_cast<std::uint32_t>(pi[g * m + i] - g * m);
    }
    const auto bits = fabric.route(local);
    key.bits.insert(key.bits.end(), bits.begin(), bits.end());
  }
  return key;
}

Permutation random_group_local_permutation(std::size_t n, std::size_t m, Seed seed) {
  check_group_size(n, m);
  SplitMix64 rng(seed);
  auto pi = identity_permutation(n);
  for (std::size_t g = 0; g < n / m; ++g) {
    rng.shuffle(std::span<std::uint32_t>(pi).subspan(g * m, m));
  }
  return pi;
}

Permutation decode_key(std::span<const std::uint8_t> bits, std::size_t n, std::size_t m) {
  check_group_size(n, m);
  const BenesFabric fabric(m);
  const std::size_t per_group = fabric.bit_count();
  if (bits.size() != n / m * per_group) {
    throw InputError("key has " + std::to_string(bits.size()) + " bits, expected " +
                     std::to_string(n / m * per_group));
  }
  Permutation pi(n);
  for (std::size_t g = 0; g < n / m; ++g) {
    const auto local = fabric.permutation(bits.subspan(g * per_group, per_group));
    for (std::size_t i = 0; i < m; ++i) {
      pi[g * m + i] = static_cast<std::uint32_t>(local[i] + g * m);
    }
  }
  return pi;
}

std::vector<unsigned char> pack_bits(const KeyBits &bits) {
  std::vector<unsigned char> bytes((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) {
      bytes[i / 8] |= static_cast<unsigned char>(1u << (i % 8));
    }
  }
  return bytes;
}

std::vector<unsigned char> encode_key(const KeyBits &bits, std::size_t n, std::size_t m) {
  if (bits.size() != key_bit_count(n, m)) {
    throw InputError("encode_key: bit count does not match (n, m)");
  }
  std::vector<unsigned char> out(std::begin(kKeyMagic), std::end(kKeyMagic));
  put_u32(out, kKeyVersion);
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(m));
  const auto packed = pack_bits(bits);
  out.insert(out.end(), packed.begin(), packed.end());
  return out;
}

KeyFile decode_key_file(const std::vector<unsigned char> &bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kKeyMagic, 4) != 0) {
    throw FormatError("LLAK: bad magic or truncated header");
  }
  if (get_u32(bytes, 4) != kKeyVersion) {
    throw FormatError("LLAK: unsupported version");
  }
  KeyFile key;
  key.n = get_u32(bytes, 8);
  key.m = get_u32(bytes, 12);
  std::size_t count = 0;
  try {
    count = key_bit_count(key.n, key.m);
  } catch (const InputError &e) {
    throw FormatError(std::string("LLAK: ") + e.what());
  }
  if (bytes.size() != 16 + (count + 7) / 8) {
    throw FormatError("LLAK: payload length does not match n and m");
  }
  key.bits.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    key.bits[i] = (bytes[16 + i / 8] >> (i % 8)) & 1u;
  }
  return key;
}

void save_key(const std::filesystem::path &path, const KeyBits &bits, std::size_t n,
              std::size_t m) {
  write_binary_file(path, encode_key(bits, n, m));
}

KeyFile load_key(const std::filesystem::path &path) {
  return decode_key_file(read_binary_file(path));
}

} // namespace lla
