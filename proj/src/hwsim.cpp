#include "lla/hwsim.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>

#include "lla/errors.hpp"
#include "lla/fabric.hpp"

namespace lla {

namespace {

struct Tile {
  std::size_t i0 = 0, i1 = 0; // rows of A (output-stationary only)
  std::size_t k0 = 0, k1 = 0;
  std::size_t n0 = 0, n1 = 0;
  std::size_t kt() const { return k1 - k0; }
  std::size_t mt() const { return i1 - i0; }
  std::size_t nt() const { return n1 - n0; }
};

struct Slot {
  bool valid = false;
  std::uint32_t tile = 0;
  std::uint32_t tag = 0; // item for weight-stationary, k for output-stationary
  float v = 0.0f;
};

// Key fabrics sitting behind the output lanes, armed by the trigger.
struct KeyFabrics {
  std::span<const std::uint8_t> bits;
  std::size_t m = 0;
};

std::vector<std::pair<std::size_t, std::size_t>> split_rounds(std::size_t k, std::size_t rounds) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 0; r < rounds; ++r) {
    out.emplace_back(r * k / rounds, (r + 1) * k / rounds);
  }
  return out;
}

std::vector<Tile> make_tiles(std::size_t m, std::size_t k, std::size_t n,
                             const SystolicConfig &cfg) {
  const auto rounds = split_rounds(k, reduction_rounds(k, cfg));
  std::vector<Tile> tiles;
  const std::size_t row_step = cfg.dataflow == Dataflow::weight_stationary ? m : cfg.rows;
  for (std::size_t i0 = 0; i0 < m; i0 += row_step) {
    for (std::size_t n0 = 0; n0 < n; n0 += cfg.cols) {
      for (const auto &[k0, k1] : rounds) {
        tiles.push_back({i0, std::min(m, i0 + row_step), k0, k1, n0, std::min(n, n0 + cfg.cols)});
      }
    }
  }
  return tiles;
}

// Collects lane outputs, runs the fabrics when armed, and accumulates the
// partial products of every round in the output buffer.
class OutputBuffer {
public:
  OutputBuffer(std::size_t m, std::size_t n, const SystolicConfig &cfg, const KeyFabrics *fabrics,
               SimTrace &trace)
      : c_(m, n), fabrics_(fabrics), trace_(trace),
        delays_(fabrics ? trigger_schedule(cfg) : std::vector<std::size_t>(cfg.cols, 0)) {
    if (fabrics_) {
      fabric_.emplace(fabrics_->m);
    }
  }

  void arm(std::uint64_t cycle, std::uint32_t tile) {
    if (!fabrics_) {
      return;
    }
    trace_.events.push_back({cycle, EventKind::trigger, tile, 0, 1.0f});
    ++trace_.trigger_activations;
  }

  void emit(std::uint64_t cycle, std::uint32_t tile_index, const Tile &tile, std::size_t row,
            std::size_t lane, float value) {
    trace_.events.push_back({cycle, EventKind::lane_out, static_cast<std::uint32_t>(lane),
                             static_cast<std::uint32_t>(row), value});
    ++trace_.lane_outputs;
    trace_.cycles = std::max(trace_.cycles, cycle + 1);
    if (!fabrics_) {
      c_(row, tile.n0 + lane) += value;
      return;
    }
    const std::size_t m = fabrics_->m;
    const std::uint64_t arrival = cycle + delays_[lane];
    auto &group = pending_[{tile_index, row, lane / m}];
    group.resize(m);
    group[lane % m] = {arrival, value, true};
    if (std::all_of(group.begin(), group.end(), [](const Arrival &a) { return a.present; })) {
      fire(tile, row, lane / m, group);
      pending_.erase({tile_index, row, lane / m});
    }
  }

  DenseMatrix finish() {
    if (!pending_.empty()) {
      throw SimulatorError("fabric group left incomplete: lanes of a group never all arrived");
    }
    return std::move(c_);
  }

private:
  struct Arrival {
    std::uint64_t cycle = 0;
    float value = 0.0f;
    bool present = false;
  };

  void fire(const Tile &tile, std::size_t row, std::size_t lane_group,
            const std::vector<Arrival> &group) {
    const std::size_t m = fabrics_->m;
    for (const auto &a : group) {
      if (a.cycle != group.front().cycle) {
        throw SimulatorError("trigger misalignment: lanes of fabric " +
                             std::to_string(lane_group) + " arrived in different cycles");
      }
    }
    // Lane groups of the tile map onto neuron groups of the key.
    const std::size_t key_group = (tile.n0 + lane_group * m) / m;
    const std::size_t per_group = fabric_->bit_count();
    const auto bits = fabrics_->bits.subspan(key_group * per_group, per_group);
    std::vector<float> in(m);
    for (std::size_t i = 0; i < m; ++i) {
      in[i] = group[i].value;
    }
    const auto out = fabric_->eval<float>(bits, in);
    const bool permutes = std::any_of(bits.begin(), bits.end(), [](auto b) { return b != 0; }) &&
                          fabric_->permutation(bits) != identity_permutation(m);
    trace_.events.push_back({group.front().cycle, EventKind::fabric,
                             static_cast<std::uint32_t>(lane_group), 0, permutes ? 1.0f : 0.0f});
    ++trace_.fabric_applications;
    trace_.fabric_permutations += permutes ? 1 : 0;
    for (std::size_t i = 0; i < m; ++i) {
      c_(row, tile.n0 + lane_group * m + i) += out[i];
    }
  }

  DenseMatrix c_;
  const KeyFabrics *fabrics_;
  SimTrace &trace_;
  std::vector<std::size_t> delays_;
  std::optional<BenesFabric> fabric_;
  std::map<std::tuple<std::uint32_t, std::size_t, std::size_t>, std::vector<Arrival>> pending_;
};

void run_weight_stationary(const DenseMatrix &a, const DenseMatrix &b, const SystolicConfig &cfg,
                           const std::vector<Tile> &tiles, OutputBuffer &out, SimTrace &trace) {
  const std::size_t nr = cfg.rows, nc = cfg.cols, m = a.rows();
  const std::size_t items = tiles.size() * m;
  std::vector<Slot> a_reg(nr * nc), p_reg(nr * nc), a_next(nr * nc), p_next(nr * nc);
  const std::uint64_t horizon = items + nr + nc;
  for (std::uint64_t t = 0; t < horizon; ++t) {
    // Bottom-row partial sums registered last cycle leave the array now.
    for (std::size_t c = 0; c < nc; ++c) {
      const auto &s = p_reg[(nr - 1) * nc + c];
      if (s.valid && c < tiles[s.tile].nt()) {
        out.emit(t, s.tile, tiles[s.tile], s.tag % m, c, s.v);
      }
    }
    if (t < items && t % m == 0) {
      out.arm(t, static_cast<std::uint32_t>(t / m));
    }
    for (std::size_t r = 0; r < nr; ++r) {
      for (std::size_t c = 0; c < nc; ++c) {
        Slot in;
        if (c == 0) {
          // Row r of the array sees item s = t - r.
          if (t >= r && t - r < items) {
            const std::size_t s = t - r;
            const auto &tile = tiles[s / m];
            in = {true, static_cast<std::uint32_t>(s / m), static_cast<std::uint32_t>(s),
                  r < tile.kt() ? a(s % m, tile.k0 + r) : 0.0f};
          }
        } else {
          in = a_reg[r * nc + c - 1];
        }
        Slot psum = r == 0 ? Slot{in.valid, in.tile, in.tag, 0.0f} : p_reg[(r - 1) * nc + c];
        if (in.valid != psum.valid || (in.valid && in.tag != psum.tag)) {
          throw SimulatorError("weight-stationary wavefront out of step at PE(" +
                               std::to_string(r) + "," + std::to_string(c) + ")");
        }
        if (in.valid) {
          const auto &tile = tiles[in.tile];
          if (r < tile.kt() && c < tile.nt()) {
            psum.v += in.v * b(tile.k0 + r, tile.n0 + c);
            ++trace.macs;
            if (cfg.record_macs) {
              trace.events.push_back({t, EventKind::mac, static_cast<std::uint32_t>(r),
                                      static_cast<std::uint32_t>(c), psum.v});
            }
          }
        }
        a_next[r * nc + c] = in;
        p_next[r * nc + c] = psum;
      }
    }
    std::swap(a_reg, a_next);
    std::swap(p_reg, p_next);
  }
}

void run_output_stationary(const DenseMatrix &a, const DenseMatrix &b, const SystolicConfig &cfg,
                           const std::vector<Tile> &tiles, OutputBuffer &out, SimTrace &trace) {
  const std::size_t nr = cfg.rows, nc = cfg.cols;
  std::vector<Slot> a_reg(nr * nc), b_reg(nr * nc), a_next(nr * nc), b_next(nr * nc);
  std::vector<float> acc(nr * nc);
  std::uint64_t base = 0;
  for (std::size_t ti = 0; ti < tiles.size(); ++ti) {
    const auto &tile = tiles[ti];
    const std::size_t kt = tile.kt(), mt = tile.mt(), nt = tile.nt();
    std::fill(a_reg.begin(), a_reg.end(), Slot{});
    std::fill(b_reg.begin(), b_reg.end(), Slot{});
    std::fill(acc.begin(), acc.end(), 0.0f);
    out.arm(base, static_cast<std::uint32_t>(ti));
    const std::size_t compute = kt + mt + nt - 1;
    for (std::size_t t = 0; t < compute; ++t) {
      for (std::size_t r = 0; r < nr; ++r) {
        for (std::size_t c = 0; c < nc; ++c) {
          Slot av, bv;
          if (c == 0) {
            if (r < mt && t >= r && t - r < kt) {
              const std::size_t k = t - r;
              av = {true, static_cast<std::uint32_t>(ti), static_cast<std::uint32_t>(k),
                    a(tile.i0 + r, tile.k0 + k)};
            }
          } else {
            av = a_reg[r * nc + c - 1];
          }
          if (r == 0) {
            if (c < nt && t >= c && t - c < kt) {
              const std::size_t k = t - c;
              bv = {true, static_cast<std::uint32_t>(ti), static_cast<std::uint32_t>(k),
                    b(tile.k0 + k, tile.n0 + c)};
            }
          } else {
            bv = b_reg[(r - 1) * nc + c];
          }
          if (r < mt && c < nt) {
            if (av.valid != bv.valid || (av.valid && av.tag != bv.tag)) {
              throw SimulatorError("output-stationary operands out of step at PE(" +
                                   std::to_string(r) + "," + std::to_string(c) + ")");
            }
            if (av.valid) {
              acc[r * nc + c] += av.v * bv.v;
              ++trace.macs;
              if (cfg.record_macs) {
                trace.events.push_back({base + t, EventKind::mac, static_cast<std::uint32_t>(r),
                                        static_cast<std::uint32_t>(c), acc[r * nc + c]});
              }
            }
          }
          a_next[r * nc + c] = av;
          b_next[r * nc + c] = bv;
        }
      }
      std::swap(a_reg, a_next);
      std::swap(b_reg, b_next);
    }
    // Columns shift their results down one row per cycle, bottom row first,
    // all lanes together.
    for (std::size_t d = 0; d < mt; ++d) {
      const std::size_t r = mt - 1 - d;
      for (std::size_t c = 0; c < nt; ++c) {
        out.emit(base + compute + d, static_cast<std::uint32_t>(ti), tile, tile.i0 + r, c,
                 acc[r * nc + c]);
      }
    }
    base += compute + mt;
  }
}

SimResult run_array(const DenseMatrix &a, const DenseMatrix &b, const SystolicConfig &cfg,
                    const KeyFabrics *fabrics) {
  cfg.validate();
  if (a.cols() != b.rows()) {
    throw ShapeError("systolic_matmul: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " times " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
  if (a.empty() || b.empty()) {
    throw ShapeError("systolic_matmul: empty operand");
  }
  const auto tiles = make_tiles(a.rows(), a.cols(), b.cols(), cfg);
  SimResult result;
  OutputBuffer out(a.rows(), b.cols(), cfg, fabrics, result.trace);
  if (cfg.dataflow == Dataflow::weight_stationary) {
    run_weight_stationary(a, b, cfg, tiles, out, result.trace);
  } else {
    run_output_stationary(a, b, cfg, tiles, out, result.trace);
  }
  result.c = out.finish();
  return result;
}

DenseMatrix head_columns(const DenseMatrix &m, std::size_t n) {
  DenseMatrix out(m.rows(), n);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    std::copy_n(m.row(t).begin(), n, out.row(t).begin());
  }
  return out;
}

} // namespace

const char *to_string(Dataflow d) {
  return d == Dataflow::weight_stationary ? "weight_stationary" : "output_stationary";
}

Dataflow parse_dataflow(const std::string &s) {
  if (s == "weight_stationary" || s == "ws") {
    return Dataflow::weight_stationary;
  }
  if (s == "output_stationary" || s == "os") {
    return Dataflow::output_stationary;
  }
  throw ConfigError("unknown dataflow '" + s + "' (expected weight_stationary or output_stationary)");
}

void SystolicConfig::validate() const {
  if (rows == 0 || cols == 0) {
    throw ConfigError("systolic array needs at least one row and one column");
  }
  if (group_size < 2 || !is_power_of_two(group_size)) {
    throw ConfigError("fabric group size " + std::to_string(group_size) +
                      " must be a power of two >= 2");
  }
}

std::size_t reduction_rounds(std::size_t k, const SystolicConfig &cfg) {
  if (cfg.reduction_rounds == 0) {
    return cfg.dataflow == Dataflow::weight_stationary ? (k + cfg.rows - 1) / cfg.rows : 1;
  }
  if (cfg.reduction_rounds > k) {
    throw ConfigError(std::to_string(cfg.reduction_rounds) + " reduction rounds for depth " +
                      std::to_string(k));
  }
  if (cfg.dataflow == Dataflow::weight_stationary &&
      (k + cfg.reduction_rounds - 1) / cfg.reduction_rounds > cfg.rows) {
    throw ConfigError(std::to_string(cfg.reduction_rounds) + " rounds leave a reduction chunk "
                      "taller than the " + std::to_string(cfg.rows) + "-row array");
  }
  return cfg.reduction_rounds;
}

SimResult systolic_matmul(const DenseMatrix &a, const DenseMatrix &b, const SystolicConfig &cfg) {
  return run_array(a, b, cfg, nullptr);
}

std::uint64_t expected_cycles(std::size_t m, std::size_t k, std::size_t n,
                              const SystolicConfig &cfg) {
  cfg.validate();
  const auto tiles = make_tiles(m, k, n, cfg);
  std::uint64_t cycles = 0;
  if (cfg.dataflow == Dataflow::weight_stationary) {
    // Item s = tau * M + i of tile tau leaves lane c at s + N_r + c.
    for (std::size_t tau = 0; tau < tiles.size(); ++tau) {
      const std::uint64_t last = tau * m + m - 1 + cfg.rows + tiles[tau].nt() - 1;
      cycles = std::max(cycles, last + 1);
    }
  } else {
    for (const auto &t : tiles) {
      cycles += t.kt() + 2 * t.mt() + t.nt() - 1;
    }
  }
  return cycles;
}

std::vector<std::size_t> trigger_schedule(const SystolicConfig &cfg) {
  cfg.validate();
  std::vector<std::size_t> delays(cfg.cols, 0);
  if (cfg.dataflow == Dataflow::weight_stationary) {
    for (std::size_t c = 0; c < cfg.cols; ++c) {
      delays[c] = (cfg.group_size - 1) - (c % cfg.group_size);
    }
  }
  return delays;
}

LayerSimResult locked_layer_sim(const LockedFfn &locked, std::span<const std::uint8_t> key_bits,
                                const DenseMatrix &x, const SystolicConfig &cfg) {
  cfg.validate();
  const auto &ffn = locked.folded;
  const auto &p = locked.params;
  if (key_bits.size() != key_bit_count(p.n, p.m)) {
    throw InputError("key has " + std::to_string(key_bits.size()) + " bits, the layer needs " +
                     std::to_string(key_bit_count(p.n, p.m)));
  }
  if (cfg.cols % cfg.group_size != 0) {
    throw ConfigError("fabric group size " + std::to_string(cfg.group_size) +
                      " does not divide the " + std::to_string(cfg.cols) + " array columns");
  }
  if (cfg.group_size != p.m) {
    throw ConfigError("array fabric group size " + std::to_string(cfg.group_size) +
                      " differs from the layer's key group size " + std::to_string(p.m));
  }
  if (x.cols() != ffn.d_model()) {
    throw ShapeError("locked_layer_sim: input width does not match D_m");
  }
  LayerSimResult result;
  auto add_phase = [&](std::string name, bool key_phase, SimResult &sim) {
    result.phases.push_back({std::move(name), key_phase, result.total_cycles, std::move(sim.trace)});
    result.total_cycles += result.phases.back().trace.cycles;
    return std::move(sim.c);
  };

  auto up_sim = run_array(x, ffn.w_up, cfg, nullptr);
  auto hidden = add_phase("up", false, up_sim);
  if (ffn.kind == FfnKind::gated) {
    auto gate_sim = run_array(x, *ffn.w_gate, cfg, nullptr);
    const auto gate = add_phase("gate", false, gate_sim);
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      hidden.values()[i] *= activate(ffn.activation, gate.values()[i]);
    }
  } else {
    for (auto &v : hidden.values()) {
      v = activate(ffn.activation, v);
    }
  }

  const auto r = p.rotate ? randomized_hadamard(p.n, p.hadamard_seed) : DenseMatrix::identity(p.n);
  const KeyFabrics fabrics{key_bits, p.m};
  auto key_sim = run_array(head_columns(hidden, p.n), r, cfg, &fabrics);
  const auto keyed = add_phase("rotate_key", true, key_sim);
  for (std::size_t t = 0; t < hidden.rows(); ++t) {
    std::copy_n(keyed.row(t).begin(), p.n, hidden.row(t).begin());
  }

  auto down_sim = run_array(hidden, ffn.w_down, cfg, nullptr);
  result.y = add_phase("down", false, down_sim);
  return result;
}

std::string trace_text(const SimTrace &trace) {
  std::ostringstream os;
  for (const auto &e : trace.events) {
    switch (e.kind) {
    case EventKind::mac:
      os << e.cycle << " pe" << e.unit << "." << e.sub << " mac " << e.value << '\n';
      break;
    case EventKind::lane_out:
      os << e.cycle << " lane" << e.unit << " out " << e.value << '\n';
      break;
    case EventKind::trigger:
      os << e.cycle << " trigger on " << e.unit << '\n';
      break;
    case EventKind::fabric:
      os << e.cycle << " fabric" << e.unit << " apply " << e.value << '\n';
      break;
    }
  }
  return os.str();
}

nlohmann::json summary_json(const LayerSimResult &r) {
  nlohmann::json phases = nlohmann::json::array();
  std::uint64_t macs = 0, fabric = 0;
  for (const auto &ph : r.phases) {
    phases.push_back({{"name", ph.name},
                      {"key_phase", ph.key_phase},
                      {"start_cycle", ph.start_cycle},
                      {"cycles", ph.trace.cycles},
                      {"macs", ph.trace.macs},
                      {"trigger_activations", ph.trace.trigger_activations},
                      {"fabric_applications", ph.trace.fabric_applications},
                      {"fabric_permutations", ph.trace.fabric_permutations}});
    macs += ph.trace.macs;
    fabric += ph.trace.fabric_applications;
  }
  return {{"cycles", r.total_cycles},
          {"macs", macs},
          {"fabric_activations", fabric},
          {"phases", phases}};
}

} // namespace lla
