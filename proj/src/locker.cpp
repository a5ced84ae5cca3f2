#include "lla/locker.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lla/errors.hpp"
#include "lla/tensor_io.hpp"

namespace lla {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_key_length(const LockParams &params, std::size_t bits) {
  const auto want = key_bit_count(params.n, params.m);
  if (bits != want) {
    throw InputError("key has " + std::to_string(bits) + " bits, the locked block needs " +
                     std::to_string(want) + " (n = " + std::to_string(params.n) +
                     ", m = " + std::to_string(params.m) + ")");
  }
}

} // namespace

void LockSpec::validate(std::size_t d_ff) const {
  const std::size_t count = n();
  if (count == 0 || !is_power_of_two(count)) {
    throw InputError("number of protected neurons must be a power of two, got " +
                     std::to_string(count));
  }
  if (count > d_ff) {
    throw InputError("more protected neurons than FFN neurons");
  }
  std::vector<bool> seen(d_ff, false);
  for (auto j : protected_neurons) {
    if (j >= d_ff) {
      throw InputError("protected neuron index " + std::to_string(j) + " out of range");
    }
    if (seen[j]) {
      throw InputError("protected neuron " + std::to_string(j) + " listed twice");
    }
    seen[j] = true;
  }
  if (group_size == 0 || !is_power_of_two(group_size) || count % group_size != 0) {
    throw InputError("group size " + std::to_string(group_size) +
                     " must be a power of two dividing n = " + std::to_string(count));
  }
  if (key_perm.size() != count || !is_group_local(key_perm, group_size)) {
    throw InputError("key permutation must be a group-local permutation of n lanes");
  }
}

OrthogonalSet build_orthogonal_set(const LockSpec &spec, std::size_t d_ff) {
  spec.validate(d_ff);
  const std::size_t n = spec.n();
  OrthogonalSet set;
  // P = P_1 ... P_n: the j-th transposition brings the j-th protected neuron
  // to position j, tracking where earlier swaps moved it.
  set.order = identity_permutation(d_ff);
  auto position = identity_permutation(d_ff);
  for (std::size_t j = 0; j < n; ++j) {
    const std::uint32_t neuron = spec.protected_neurons[j];
    const std::uint32_t at = position[neuron];
    const std::uint32_t displaced = set.order[j];
    std::swap(set.order[j], set.order[at]);
    position[neuron] = static_cast<std::uint32_t>(j);
    position[displaced] = at;
  }
  set.p = inverse(set.order);

  set.r = DenseMatrix::identity(d_ff);
  if (spec.rotate) {
    const auto h = randomized_hadamard(n, spec.hadamard_seed);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        set.r(i, j) = h(i, j);
      }
    }
  }

  set.k = identity_permutation(d_ff);
  std::copy(spec.key_perm.begin(), spec.key_perm.end(), set.k.begin());
  return set;
}

LockedFfn fold_weights(const FfnBlock &ffn, const OrthogonalSet &set, const LockParams &params) {
  ffn.validate();
  const std::size_t d_ff = ffn.d_ff();
  if (set.order.size() != d_ff || set.k.size() != d_ff || set.r.rows() != d_ff ||
      set.r.cols() != d_ff) {
    throw ShapeError("fold_weights: orthogonal set does not match D_ff = " +
                     std::to_string(d_ff));
  }
  LockedFfn locked;
  locked.params = params;
  locked.folded.kind = ffn.kind;
  locked.folded.activation = ffn.activation;
  locked.folded.w_up = gather_columns(ffn.w_up, set.order);
  if (ffn.w_gate) {
    locked.folded.w_gate = gather_columns(*ffn.w_gate, set.order);
  }
  // K^T R^T P^T W_down
  auto down = gather_rows(ffn.w_down, set.order);
  down = matmul(transpose(set.r), down);
  DenseMatrix keyed(d_ff, ffn.d_model());
  for (std::size_t i = 0; i < d_ff; ++i) {
    std::copy_n(down.row(i).begin(), down.cols(), keyed.row(set.k[i]).begin());
  }
  locked.folded.w_down = std::move(keyed);
  return locked;
}

const char *to_string(RotationPath path) { return path == RotationPath::dense ? "dense" : "fwht"; }

RotationPath parse_rotation_path(const std::string &s) {
  if (s == "fwht") {
    return RotationPath::fwht;
  }
  if (s == "dense") {
    return RotationPath::dense;
  }
  throw ConfigError("unknown rotation path '" + s + "' (expected fwht or dense)");
}

DenseMatrix locked_rotated_hidden(const LockedFfn &locked, const DenseMatrix &x,
                                  RotationPath path) {
  auto z = ffn_hidden(locked.folded, x);
  const auto &p = locked.params;
  if (!p.rotate) {
    return z;
  }
  if (path == RotationPath::fwht) {
    rotate_rows(z, p.n, hadamard_signs(p.n, p.hadamard_seed));
    return z;
  }
  const auto h = randomized_hadamard(p.n, p.hadamard_seed);
  DenseMatrix head(z.rows(), p.n);
  for (std::size_t t = 0; t < z.rows(); ++t) {
    std::copy_n(z.row(t).begin(), p.n, head.row(t).begin());
  }
  const auto rotated = matmul(head, h);
  for (std::size_t t = 0; t < z.rows(); ++t) {
    std::copy_n(rotated.row(t).begin(), p.n, z.row(t).begin());
  }
  return z;
}

DenseMatrix run_locked_ffn(const LockedFfn &locked, std::span<const std::uint8_t> key_bits,
                           const DenseMatrix &x, RotationPath path) {
  check_key_length(locked.params, key_bits.size());
  auto u = locked_rotated_hidden(locked, x, path);
  for (std::size_t t = 0; t < u.rows(); ++t) {
    apply_grouped_key<float>(key_bits, locked.params.m, u.row(t).first(locked.params.n));
  }
  return matmul(u, locked.folded.w_down);
}

LockedModel lock_model(const ToyModel &model, const LockSpec &spec) {
  if (spec.protected_block >= model.blocks.size()) {
    throw InputError("protected block " + std::to_string(spec.protected_block) +
                     " out of range");
  }
  const auto &ffn = model.blocks[spec.protected_block].ffn;
  const auto set = build_orthogonal_set(spec, ffn.d_ff());
  LockParams params{spec.n(), spec.group_size, spec.hadamard_seed, spec.rotate};
  // A fabric needs at least two lanes.
  key_bit_count(params.n, params.m);
  auto folded = fold_weights(ffn, set, params);
  LockedModel locked;
  locked.model = model;
  locked.model.blocks[spec.protected_block].ffn = std::move(folded.folded);
  locked.protected_block = spec.protected_block;
  locked.params = params;
  return locked;
}

ForwardResult locked_forward(const LockedModel &locked, std::span<const std::uint8_t> key_bits,
                             std::span<const Token> tokens, bool capture) {
  check_key_length(locked.params, key_bits.size());
  const auto ffn = locked.locked_ffn();
  FfnOverride hook{locked.protected_block,
                   [&](const DenseMatrix &x) { return run_locked_ffn(ffn, key_bits, x); }};
  return model_forward(locked.model, tokens, capture, &hook);
}

LogitsFn locked_logits_fn(const LockedModel &locked, KeyBits key_bits) {
  return [&locked, key = std::move(key_bits)](std::span<const Token> tokens) {
    return locked_forward(locked, key, tokens).logits;
  };
}

void save_locked_model(const LockedModel &locked, const fs::path &dir) {
  json lock;
  lock["protected_block"] = locked.protected_block;
  lock["n"] = locked.params.n;
  lock["m"] = locked.params.m;
  lock["hadamard_seed"] = locked.params.hadamard_seed.value;
  lock["rotate"] = locked.params.rotate;
  save_model_dir(locked.model, dir, json{{"lock", lock}});
}

LockedModel load_locked_model(const fs::path &dir) {
  json manifest;
  LockedModel locked;
  locked.model = load_model_dir(dir, &manifest);
  if (!manifest.contains("lock")) {
    throw FormatError(dir.string() + " is not a locked model (no lock section)");
  }
  try {
    const auto &lock = manifest.at("lock");
    locked.protected_block = lock.at("protected_block").get<std::size_t>();
    locked.params.n = lock.at("n").get<std::size_t>();
    locked.params.m = lock.at("m").get<std::size_t>();
    locked.params.hadamard_seed = Seed{lock.at("hadamard_seed").get<std::uint64_t>()};
    locked.params.rotate = lock.value("rotate", true);
  } catch (const json::exception &e) {
    throw FormatError(std::string("lock section: ") + e.what());
  }
  if (locked.protected_block >= locked.model.blocks.size() ||
      locked.params.n > locked.model.blocks[locked.protected_block].ffn.d_ff()) {
    throw FormatError("lock section does not fit the model");
  }
  try {
    key_bit_count(locked.params.n, locked.params.m);
  } catch (const InputError &e) {
    throw FormatError(std::string("lock section: ") + e.what());
  }
  return locked;
}

bool is_locked_model_dir(const fs::path &dir) {
  try {
    const auto manifest = json::parse(read_text_file(dir / "model.json"));
    return manifest.contains("lock");
  } catch (const std::exception &) {
    return false;
  }
}

LockOutcome lock_with_selection(const ToyModel &model, const LockConfig &cfg) {
  const auto probes = random_probes(model.vocab, cfg.probe_count, cfg.probe_length,
                                    derive_seed(cfg.seed, 3));
  LockOutcome out;
  out.selection = select_protected_neurons(model, probes, cfg.tau, cfg.n);
  out.spec.protected_block = out.selection.outliers.block_index;
  out.spec.protected_neurons = out.selection.neurons.selected;
  out.spec.group_size = cfg.m;
  out.spec.hadamard_seed = derive_seed(cfg.seed, 1);
  check_group_size(cfg.n, cfg.m);
  out.spec.key_perm = random_group_local_permutation(cfg.n, cfg.m, derive_seed(cfg.seed, 2));
  out.spec.tau = cfg.tau;
  out.spec.rotate = cfg.rotate;
  out.key = key_material(out.spec.key_perm, cfg.m);
  out.locked = lock_model(model, out.spec);
  return out;
}

HpnnLockedFfn hpnn_lock(const FfnBlock &ffn, std::span<const std::uint32_t> neurons,
                        std::span<const std::uint8_t> key) {
  ffn.validate();
  if (neurons.size() != key.size()) {
    throw InputError("hpnn_lock: " + std::to_string(neurons.size()) + " neurons but " +
                     std::to_string(key.size()) + " key bits");
  }
  for (auto j : neurons) {
    if (j >= ffn.d_ff()) {
      throw InputError("hpnn_lock: neuron index out of range");
    }
  }
  HpnnLockedFfn locked{ffn, {neurons.begin(), neurons.end()}};
  auto &pre = ffn.kind == FfnKind::gated ? *locked.stored.w_gate : locked.stored.w_up;
  for (std::size_t b = 0; b < neurons.size(); ++b) {
    if (key[b]) {
      for (std::size_t r = 0; r < pre.rows(); ++r) {
        pre(r, neurons[b]) = -pre(r, neurons[b]);
      }
    }
  }
  return locked;
}

DenseMatrix run_hpnn_ffn(const HpnnLockedFfn &locked, std::span<const std::uint8_t> key,
                         const DenseMatrix &x) {
  const auto &ffn = locked.stored;
  if (key.size() != locked.neurons.size()) {
    throw InputError("run_hpnn_ffn: key length does not match the protected neurons");
  }
  if (x.cols() != ffn.d_model()) {
    throw ShapeError("run_hpnn_ffn: input width mismatch");
  }
  auto pre = matmul(x, ffn.kind == FfnKind::gated ? *ffn.w_gate : ffn.w_up);
  for (std::size_t b = 0; b < key.size(); ++b) {
    if (key[b]) {
      for (std::size_t t = 0; t < pre.rows(); ++t) {
        pre(t, locked.neurons[b]) = -pre(t, locked.neurons[b]);
      }
    }
  }
  for (auto &v : pre.values()) {
    v = activate(ffn.activation, v);
  }
  if (ffn.kind == FfnKind::gated) {
    const auto up = matmul(x, ffn.w_up);
    for (std::size_t i = 0; i < pre.size(); ++i) {
      pre.values()[i] *= up.values()[i];
    }
  }
  return matmul(pre, ffn.w_down);
}

HpnnLockedModel hpnn_lock_model(const ToyModel &model, std::size_t block,
                                std::span<const std::uint32_t> neurons,
                                std::span<const std::uint8_t> key) {
  if (block >= model.blocks.size()) {
    throw InputError("hpnn_lock_model: block out of range");
  }
  HpnnLockedModel locked;
  locked.model = model;
  locked.model.blocks[block].ffn = hpnn_lock(model.blocks[block].ffn, neurons, key).stored;
  locked.protected_block = block;
  locked.neurons.assign(neurons.begin(), neurons.end());
  return locked;
}

LogitsFn hpnn_logits_fn(const HpnnLockedModel &locked, KeyBits key) {
  return [&locked, key = std::move(key)](std::span<const Token> tokens) {
    const auto ffn = locked.locked_ffn();
    FfnOverride hook{locked.protected_block,
                     [&](const DenseMatrix &x) { return run_hpnn_ffn(ffn, key, x); }};
    return model_forward(locked.model, tokens, false, &hook).logits;
  };
}

FlopReport flop_overhead_report(std::size_t d_model, std::size_t d_ff, FfnKind kind,
                                std::size_t n, std::size_t m, RotationPath path) {
  if (d_model == 0 || d_ff == 0) {
    throw ConfigError("flop report: D_m and D_ff must be positive");
  }
  if (n > d_ff) {
    throw ConfigError("flop report: n exceeds D_ff");
  }
  FlopReport r;
  const double dm = static_cast<double>(d_model);
  const double dff = static_cast<double>(d_ff);
  r.base_flops = 2.0 * dm * dff * (kind == FfnKind::gated ? 3.0 : 2.0);
  if (n > 0) {
    if (!is_power_of_two(n)) {
      throw ConfigError("flop report: n must be a power of two");
    }
    const double nn = static_cast<double>(n);
    r.rotation_flops = path == RotationPath::dense
                           ? 2.0 * nn * nn
                           : nn * static_cast<double>(log2_exact(n)) + nn;
    r.key_bits = key_bit_count(n, m);
  }
  r.ratio = (r.rotation_flops + r.fabric_flops) / r.base_flops;
  if (r.ratio >= kFlopOverheadBound) {
    r.warning = std::string("overhead ") + std::to_string(r.ratio * 100.0) +
                "% is above 0.1%" +
                (path == RotationPath::dense ? "; only the fwht rotation path stays below it" : "");
  }
  return r;
}

} // namespace lla
