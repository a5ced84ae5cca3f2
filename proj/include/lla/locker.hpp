#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lla/fabric.hpp"
#include "lla/linalg.hpp"
#include "lla/model.hpp"
#include "lla/outlier.hpp"

namespace lla {

struct LockSpec {
  std::size_t protected_block = 0;
  std::vector<std::uint32_t> protected_neurons; // n entries, score order
  std::size_t group_size = 16;
  Seed hadamard_seed;
  Permutation key_perm; // group-local over n lanes
  double tau = kDefaultTau;
  // Insert the Hadamard rotation. Off only for ablations.
  bool rotate = true;

  std::size_t n() const { return protected_neurons.size(); }
  void validate(std::size_t d_ff) const;
};

// P, R and K over the D_ff neurons of the protected block.
struct OrthogonalSet {
  // order[c] is the original neuron placed at position c; positions
  // 0..n-1 hold the protected neurons in spec order.
  std::vector<std::uint32_t> order;
  Permutation p; // permutation_matrix(p) == P, p = inverse(order)
  DenseMatrix r; // blockdiag(H, I), H = randomized_hadamard(n, seed)
  Permutation k; // blockdiag(G, I) with G(i, pi(i)) = 1

  DenseMatrix p_matrix() const { return permutation_matrix(p); }
  DenseMatrix k_matrix() const { return permutation_matrix(k); }
};

OrthogonalSet build_orthogonal_set(const LockSpec &spec, std::size_t d_ff);

// What a locked block stores besides its weights. The rotation is kept as
// (seed, n), never as a matrix.
struct LockParams {
  std::size_t n = 0;
  std::size_t m = 16;
  Seed hadamard_seed;
  bool rotate = true;
};

struct LockedFfn {
  FfnBlock folded; // W~_up = W_up P, W~_gate = W_gate P, W~_down = K^T R^T P^T W_down
  LockParams params;

  std::size_t key_bits() const { return key_bit_count(params.n, params.m); }
};

LockedFfn fold_weights(const FfnBlock &ffn, const OrthogonalSet &set, const LockParams &params);

enum class RotationPath { fwht, dense };
const char *to_string(RotationPath path);
RotationPath parse_rotation_path(const std::string &s);

// sigma(X W~_up) R: the lanes that enter the key fabric.
DenseMatrix locked_rotated_hidden(const LockedFfn &locked, const DenseMatrix &x,
                                  RotationPath path = RotationPath::fwht);

// Y = sigma(X W~_up) R K(key) W~_down, R applied with the FWHT fast path by
// default (sign diagonal after the transform, 1/sqrt(n) scale) and K by the
// per-group Benes fabrics.
DenseMatrix run_locked_ffn(const LockedFfn &locked, std::span<const std::uint8_t> key_bits,
                           const DenseMatrix &x, RotationPath path = RotationPath::fwht);

struct LockedModel {
  ToyModel model; // protected block carries the folded weights
  std::size_t protected_block = 0;
  LockParams params;

  LockedFfn locked_ffn() const { return {model.blocks[protected_block].ffn, params}; }
};

LockedModel lock_model(const ToyModel &model, const LockSpec &spec);

ForwardResult locked_forward(const LockedModel &locked, std::span<const std::uint8_t> key_bits,
                             std::span<const Token> tokens, bool capture = false);
LogitsFn locked_logits_fn(const LockedModel &locked, KeyBits key_bits);

void save_locked_model(const LockedModel &locked, const std::filesystem::path &dir);
LockedModel load_locked_model(const std::filesystem::path &dir);
bool is_locked_model_dir(const std::filesystem::path &dir);

// End-to-end locking recipe: pick the protected block and neurons on random
// probes, draw the key permutation and Hadamard signs from `seed`, fold.
struct LockConfig {
  std::size_t n = 64;
  std::size_t m = 16;
  double tau = kDefaultTau;
  Seed seed{0};
  bool rotate = true;
  std::size_t probe_count = 8;
  std::size_t probe_length = 64;
};

struct LockOutcome {
  LockSpec spec;
  Selection selection;
  GroupedKey key;
  LockedModel locked;
};

LockOutcome lock_with_selection(const ToyModel &model, const LockConfig &cfg);

// HPNN-style negation locking. The stored block has the pre-activation
// weights of every neuron whose embedded bit is 1 negated; at run time the
// pre-activation of neuron j is negated when the supplied bit is 1, so the
// original block is restored exactly when the supplied key equals the
// embedded one. For gated blocks the gate branch carries the negation.
struct HpnnLockedFfn {
  FfnBlock stored;
  std::vector<std::uint32_t> neurons;
};

HpnnLockedFfn hpnn_lock(const FfnBlock &ffn, std::span<const std::uint32_t> neurons,
                        std::span<const std::uint8_t> key);
DenseMatrix run_hpnn_ffn(const HpnnLockedFfn &locked, std::span<const std::uint8_t> key,
                         const DenseMatrix &x);

struct HpnnLockedModel {
  ToyModel model; // protected block carries the stored (negated) weights
  std::size_t protected_block = 0;
  std::vector<std::uint32_t> neurons;

  HpnnLockedFfn locked_ffn() const { return {model.blocks[protected_block].ffn, neurons}; }
};

HpnnLockedModel hpnn_lock_model(const ToyModel &model, std::size_t block,
                                std::span<const std::uint32_t> neurons,
                                std::span<const std::uint8_t> key);
LogitsFn hpnn_logits_fn(const HpnnLockedModel &locked, KeyBits key);

// Per-token FLOP accounting of a locked FFN. The fabric is pure routing and
// costs no FLOPs.
struct FlopReport {
  double base_flops = 0.0;     // 2 * D_m * D_ff * (2 standard | 3 gated)
  double rotation_flops = 0.0; // 2 n^2 dense, n log2 n + n fwht
  double fabric_flops = 0.0;
  double ratio = 0.0; // (rotation + fabric) / base
  std::size_t key_bits = 0;
  std::string warning;
};

// Overhead above which the report carries a warning.
inline constexpr double kFlopOverheadBound = 0.001;

FlopReport flop_overhead_report(std::size_t d_model, std::size_t d_ff, FfnKind kind,
                                std::size_t n, std::size_t m, RotationPath path);

} // namespace lla
