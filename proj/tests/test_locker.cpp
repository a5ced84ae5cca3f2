#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "lla/errors.hpp"
#include "lla/locker.hpp"
#include "lla/tensor_io.hpp"
#include "oracles.hpp"

using namespace lla;
namespace fs = std::filesystem;

namespace {

FfnBlock random_block(FfnKind kind, Activation act, std::size_t dm, std::size_t dff,
                      std::uint64_t seed) {
  FfnBlock b;
  b.kind = kind;
  b.activation = act;
  b.w_up = oracle::random_matrix(dm, dff, seed, 0.4);
  if (kind == FfnKind::gated) {
    b.w_gate = oracle::random_matrix(dm, dff, seed + 1, 0.4);
  }
  b.w_down = oracle::random_matrix(dff, dm, seed + 2, 0.4);
  return b;
}

LockSpec random_spec(std::size_t dff, std::size_t n, std::size_t m, std::uint64_t seed) {
  SplitMix64 g(Seed{seed});
  std::vector<std::uint32_t> all(dff);
  for (std::uint32_t j = 0; j < dff; ++j) {
    all[j] = j;
  }
  for (std::size_t i = dff - 1; i > 0; --i) {
    std::swap(all[i], all[g.below(i + 1)]);
  }
  LockSpec s;
  s.protected_neurons.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  s.group_size = m;
  s.hadamard_seed = Seed{seed + 1};
  s.key_perm = random_group_local_permutation(n, m, Seed{seed + 2});
  return s;
}

// Dense P, R and K built straight from the spec.
struct DenseSet {
  oracle::Mat p, r, k;
};

DenseSet dense_set(const LockSpec &spec, std::size_t dff) {
  const std::size_t n = spec.n();
  // P as a product of transpositions: step j swaps position j with wherever
  // the j-th protected neuron currently sits.
  DenseSet s;
  s.p = oracle::identity(dff);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t at = 0;
    for (std::size_t c = 0; c < dff; ++c) {
      if (s.p[spec.protected_neurons[j]][c] == 1.0) {
        at = c;
      }
    }
    for (auto &row : s.p) {
      std::swap(row[j], row[at]);
    }
  }
  s.r = oracle::identity(dff);
  if (spec.rotate) {
    const auto signs = hadamard_signs(n, spec.hadamard_seed);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        s.r[i][j] = oracle::hadamard_entry(i, j) * signs[j] / std::sqrt(static_cast<double>(n));
      }
    }
  }
  s.k = oracle::identity(dff);
  for (std::size_t i = 0; i < n; ++i) {
    s.k[i][i] = 0.0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    s.k[i][spec.key_perm[i]] = 1.0;
  }
  return s;
}

double orth_defect(const oracle::Mat &m) {
  const auto prod = oracle::matmul(m, oracle::transpose(m));
  double worst = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m.size(); ++j) {
      worst = std::max(worst, std::abs(prod[i][j] - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

ToyModel wrap(const FfnBlock &ffn, std::size_t vocab, std::uint64_t seed) {
  ToyModel m;
  m.vocab = vocab;
  m.d_model = ffn.d_model();
  m.embed = oracle::random_matrix(vocab, m.d_model, seed, 1.0);
  m.unembed = oracle::random_matrix(m.d_model, vocab, seed + 1, 0.5);
  Block b;
  b.mix = oracle::random_matrix(m.d_model, m.d_model, seed + 2, 0.05);
  b.ffn = ffn;
  m.blocks.push_back(b);
  return m;
}

fs::path scratch(const std::string &name) {
  auto p = fs::temp_directory_path() / ("lla_test_locker_" + name);
  fs::remove_all(p);
  return p;
}

} // namespace

TEST_CASE("orthogonal set matches its dense definition") {
  const std::size_t dff = 48;
  const auto spec = random_spec(dff, 16, 4, 1);
  const auto set = build_orthogonal_set(spec, dff);
  const auto ref = dense_set(spec, dff);
  CHECK(oracle::rel_error(set.p_matrix(), ref.p) == 0.0);
  CHECK(oracle::rel_error(set.r, ref.r) < 1e-6);
  CHECK(oracle::rel_error(set.k_matrix(), ref.k) == 0.0);
  CHECK(orth_defect(ref.p) == 0.0);
  CHECK(orth_defect(ref.r) < 1e-12);
  CHECK(orthogonality_defect(set.r) < 1e-6);
  for (std::size_t c = 0; c < 16; ++c) {
    CHECK(set.order[c] == spec.protected_neurons[c]);
  }
}

TEST_CASE("folded weights equal W_up P and K^T R^T P^T W_down") {
  for (auto kind : {FfnKind::standard, FfnKind::gated}) {
    const std::size_t dm = 8, dff = 32;
    const auto ffn = random_block(kind, Activation::silu, dm, dff, 2);
    const auto spec = random_spec(dff, 8, 4, 3);
    const auto set = build_orthogonal_set(spec, dff);
    const LockParams params{8, 4, spec.hadamard_seed, true};
    const auto locked = fold_weights(ffn, set, params);
    const auto d = dense_set(spec, dff);

    CHECK(oracle::rel_error(locked.folded.w_up, oracle::matmul(oracle::to_mat(ffn.w_up), d.p)) <
          1e-7);
    if (kind == FfnKind::gated) {
      CHECK(oracle::rel_error(*locked.folded.w_gate,
                              oracle::matmul(oracle::to_mat(*ffn.w_gate), d.p)) < 1e-7);
    }
    auto down = oracle::matmul(oracle::transpose(d.p), oracle::to_mat(ffn.w_down));
    down = oracle::matmul(oracle::transpose(d.r), down);
    down = oracle::matmul(oracle::transpose(d.k), down);
    CHECK(oracle::rel_error(locked.folded.w_down, down) < 1e-5);
  }
}

TEST_CASE("the correct key restores the original FFN output") {
  SplitMix64 g(Seed{40});
  for (int trial = 0; trial < 12; ++trial) {
    const auto kind = trial % 2 ? FfnKind::gated : FfnKind::standard;
    const auto act = trial % 3 ? Activation::relu : Activation::silu;
    const std::size_t m = std::size_t{2} << (trial % 3);
    const std::size_t n = m << g.below(3);
    const std::size_t dff = 2 * n + g.below(16);
    const auto ffn = random_block(kind, act, 12, dff, 100 + trial);
    const auto spec = random_spec(dff, n, m, 200 + trial);
    ToyModel model = wrap(ffn, 16, 300 + trial);
    auto locked_spec = spec;
    locked_spec.protected_block = 0;
    const auto lm = lock_model(model, locked_spec);
    const auto key = key_material(spec.key_perm, m);
    const auto x = oracle::random_matrix(6, 12, 400 + trial);
    const auto ref = oracle::ffn(ffn, oracle::to_mat(x));
    const auto lf = lm.locked_ffn();
    CHECK(oracle::rel_error(run_locked_ffn(lf, key.bits, x, RotationPath::fwht), ref) < 1e-4);
    CHECK(oracle::rel_error(run_locked_ffn(lf, key.bits, x, RotationPath::dense), ref) < 1e-4);
  }
}

TEST_CASE("fwht and dense rotation paths agree on the rotated lanes") {
  const auto ffn = random_block(FfnKind::standard, Activation::relu, 8, 64, 5);
  const auto spec = random_spec(64, 32, 8, 6);
  const auto locked = fold_weights(ffn, build_orthogonal_set(spec, 64),
                                   LockParams{32, 8, spec.hadamard_seed, true});
  const auto x = oracle::random_matrix(4, 8, 7);
  const auto a = locked_rotated_hidden(locked, x, RotationPath::fwht);
  const auto b = locked_rotated_hidden(locked, x, RotationPath::dense);
  CHECK(max_relative_error(a, b) < 1e-5);
  CHECK(parse_rotation_path("dense") == RotationPath::dense);
  CHECK_THROWS_AS(parse_rotation_path("fft"), ConfigError);
}

TEST_CASE("a wrong key changes the output and a short key is rejected") {
  const auto ffn = random_block(FfnKind::standard, Activation::relu, 8, 64, 8);
  const auto spec = random_spec(64, 32, 8, 9);
  const auto locked = fold_weights(ffn, build_orthogonal_set(spec, 64),
                                   LockParams{32, 8, spec.hadamard_seed, true});
  const auto key = key_material(spec.key_perm, 8);
  const auto x = oracle::random_matrix(4, 8, 10);
  const auto good = run_locked_ffn(locked, key.bits, x);
  auto wrong = key.bits;
  wrong[0] ^= 1u;
  CHECK(max_relative_error(run_locked_ffn(locked, wrong, x), good) > 1e-2);
  const KeyBits short_key(key.bits.begin(), key.bits.end() - 1);
  CHECK_THROWS_AS(run_locked_ffn(locked, short_key, x), InputError);
}

TEST_CASE("without the rotation the protected lanes are a plain permutation") {
  const auto ffn = random_block(FfnKind::standard, Activation::relu, 8, 32, 11);
  auto spec = random_spec(32, 16, 4, 12);
  spec.rotate = false;
  const auto locked = fold_weights(ffn, build_orthogonal_set(spec, 32),
                                   LockParams{16, 4, spec.hadamard_seed, false});
  // Row k[i] of W~_down is row order[i] of W_down.
  const auto set = build_orthogonal_set(spec, 32);
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(locked.folded.w_down(set.k[i], c) == ffn.w_down(set.order[i], c));
    }
  }
}

TEST_CASE("lock spec validation") {
  const std::size_t dff = 32;
  auto s = random_spec(dff, 16, 4, 13);
  CHECK_NOTHROW(s.validate(dff));
  auto bad = s;
  bad.protected_neurons.pop_back();
  CHECK_THROWS_AS(bad.validate(dff), InputError);
  bad = s;
  bad.protected_neurons[1] = bad.protected_neurons[0];
  CHECK_THROWS_AS(bad.validate(dff), InputError);
  bad = s;
  bad.protected_neurons[0] = 99;
  CHECK_THROWS_AS(bad.validate(dff), InputError);
  bad = s;
  bad.group_size = 3;
  CHECK_THROWS_AS(bad.validate(dff), InputError);
  bad = s;
  std::swap(bad.key_perm[0], bad.key_perm[15]);
  CHECK_THROWS_AS(bad.validate(dff), InputError);
  CHECK_THROWS_AS(s.validate(8), InputError);
}

TEST_CASE("lock_with_selection locks the planted block and round-trips on disk") {
  const auto model = synth_model(SynthConfig{}, Seed{21});
  LockConfig cfg;
  cfg.seed = Seed{22};
  const auto out = lock_with_selection(model, cfg);
  CHECK(out.locked.protected_block == 1);
  CHECK(out.key.bit_count() == key_bit_count(64, 16));
  CHECK(out.spec.key_perm == out.key.pi);

  const TokenSeq seq{1, 7, 3, 9, 30, 2};
  const auto plain = model_forward(model, seq, false).logits;
  const auto unlocked = locked_forward(out.locked, out.key.bits, seq).logits;
  CHECK(max_relative_error(unlocked, plain) < 1e-4);

  const auto dir = scratch("roundtrip");
  save_locked_model(out.locked, dir);
  CHECK(is_locked_model_dir(dir));
  const auto back = load_locked_model(dir);
  CHECK(back.protected_block == 1);
  CHECK(back.params.n == 64);
  CHECK(back.params.m == 16);
  CHECK(locked_forward(back, out.key.bits, seq).logits == locked_forward(out.locked, out.key.bits, seq).logits);

  // Same seed, same artefacts.
  const auto again = lock_with_selection(model, cfg);
  CHECK(again.key.bits == out.key.bits);
  CHECK(again.locked.model.blocks[1].ffn.w_down == out.locked.model.blocks[1].ffn.w_down);

  const auto plain_dir = scratch("plain");
  save_model_dir(model, plain_dir);
  CHECK_FALSE(is_locked_model_dir(plain_dir));
  CHECK_THROWS_AS(load_locked_model(plain_dir), FormatError);
}

TEST_CASE("locked models refuse group size one") {
  const auto model = synth_model(SynthConfig{}, Seed{23});
  LockConfig cfg;
  cfg.m = 1;
  CHECK_THROWS_AS(lock_with_selection(model, cfg), InputError);
}

TEST_CASE("HPNN negation locking restores the block only for the embedded key") {
  for (auto kind : {FfnKind::standard, FfnKind::gated}) {
    const auto ffn = random_block(kind, Activation::relu, 8, 32, 30);
    const std::vector<std::uint32_t> neurons{1, 4, 9, 17, 20, 31};
    const KeyBits key{1, 0, 1, 1, 0, 1};
    const auto locked = hpnn_lock(ffn, neurons, key);
    const auto x = oracle::random_matrix(5, 8, 31);
    const auto ref = oracle::ffn(ffn, oracle::to_mat(x));
    CHECK(oracle::rel_error(run_hpnn_ffn(locked, key, x), ref) < 1e-5);
    // Stored weights are negated exactly where the bit is 1.
    const auto &stored = kind == FfnKind::gated ? *locked.stored.w_gate : locked.stored.w_up;
    const auto &orig = kind == FfnKind::gated ? *ffn.w_gate : ffn.w_up;
    CHECK(stored(0, 1) == -orig(0, 1));
    CHECK(stored(0, 4) == orig(0, 4));
    KeyBits wrong = key;
    wrong[2] ^= 1u;
    CHECK(oracle::rel_error(run_hpnn_ffn(locked, wrong, x), ref) > 1e-3);
    CHECK_THROWS_AS(run_hpnn_ffn(locked, KeyBits{1, 0}, x), InputError);
  }
}

TEST_CASE("FLOP overhead follows the closed form") {
  const auto r = flop_overhead_report(4096, 11008, FfnKind::standard, 64, 16, RotationPath::fwht);
  const double base = 2.0 * 4096 * 11008 * 2;
  const double rot = 64.0 * 6 + 64;
  CHECK(r.base_flops == base);
  CHECK(r.rotation_flops == rot);
  CHECK(r.fabric_flops == 0.0);
  CHECK(r.ratio == doctest::Approx(rot / base));
  CHECK(r.key_bits == 224);
  CHECK(r.warning.empty());

  const auto g = flop_overhead_report(4096, 11008, FfnKind::gated, 64, 16, RotationPath::dense);
  CHECK(g.base_flops == 2.0 * 4096 * 11008 * 3);
  CHECK(g.rotation_flops == 2.0 * 64 * 64);

  const auto big = flop_overhead_report(64, 4096, FfnKind::standard, 4096, 16, RotationPath::dense);
  CHECK_FALSE(big.warning.empty());
  CHECK_THROWS_AS(flop_overhead_report(0, 64, FfnKind::standard, 16, 4, RotationPath::fwht),
                  ConfigError);
  CHECK_THROWS_AS(flop_overhead_report(64, 64, FfnKind::standard, 128, 4, RotationPath::fwht),
                  ConfigError);
  CHECK_THROWS_AS(flop_overhead_report(64, 64, FfnKind::standard, 24, 4, RotationPath::fwht),
                  ConfigError);
}
