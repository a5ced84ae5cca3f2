#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lla/linalg.hpp"
#include "lla/locker.hpp"

namespace lla {

enum class Dataflow { weight_stationary, output_stationary };
const char *to_string(Dataflow d);
Dataflow parse_dataflow(const std::string &s);

struct SystolicConfig {
  std::size_t rows = 4; // N_r
  std::size_t cols = 4; // N_c, output lanes
  Dataflow dataflow = Dataflow::weight_stationary;
  std::size_t group_size = 4; // lanes per permutation fabric
  // Tiles over the reduction dimension, each accumulated in the output
  // buffer. 0 picks the fewest that fit: ceil(K / N_r) weight-stationary,
  // 1 output-stationary.
  std::size_t reduction_rounds = 0;
  bool record_macs = false;

  void validate() const;
};

enum class EventKind { mac, lane_out, trigger, fabric };

struct TraceEvent {
  std::uint64_t cycle = 0;
  EventKind kind = EventKind::mac;
  std::uint32_t unit = 0; // lane, fabric group, or PE row
  std::uint32_t sub = 0;  // PE column for MACs
  float value = 0.0f;     // fabric: 1 when the routing is not the identity
};

struct SimTrace {
  std::vector<TraceEvent> events;
  std::uint64_t cycles = 0;
  std::uint64_t macs = 0;
  std::uint64_t lane_outputs = 0;
  std::uint64_t trigger_activations = 0;
  std::uint64_t fabric_applications = 0;
  std::uint64_t fabric_permutations = 0; // applications with non-identity routing
};

struct SimResult {
  DenseMatrix c;
  SimTrace trace;
};

// Number of reduction rounds the config uses for a K-deep product; throws
// ConfigError when a round would not fit the array.
std::size_t reduction_rounds(std::size_t k, const SystolicConfig &cfg);

// C = A * B on the array. Weight-stationary keeps a K_t x N_t tile of B in
// the PEs and streams rows of A through; output-stationary keeps an
// M_t x N_t tile of C and streams A from the left and B from the top.
SimResult systolic_matmul(const DenseMatrix &a, const DenseMatrix &b, const SystolicConfig &cfg);

// Closed-form cycle count of systolic_matmul for an M x K by K x N product.
std::uint64_t expected_cycles(std::size_t m, std::size_t k, std::size_t n,
                              const SystolicConfig &cfg);

// Per-lane delay inserted by the trigger logic so the m lanes of a group
// reach their fabric in the same cycle. Weight-stationary lane c emerges c
// cycles after lane 0 and waits (m - 1) - (c mod m); output-stationary rows
// drain on all lanes at once and wait 0.
std::vector<std::size_t> trigger_schedule(const SystolicConfig &cfg);

struct PhaseTrace {
  std::string name;
  bool key_phase = false;
  std::uint64_t start_cycle = 0;
  SimTrace trace;
};

struct LayerSimResult {
  DenseMatrix y;
  std::vector<PhaseTrace> phases;
  std::uint64_t total_cycles = 0;
};

// Locked FFN on the array: X W~_up (and X W~_gate) with the activation
// applied as results leave the output buffer, the rotation multiply with
// the trigger armed so every round's partial result passes the key fabrics
// before accumulation, then the W~_down multiply.
LayerSimResult locked_layer_sim(const LockedFfn &locked, std::span<const std::uint8_t> key_bits,
                                const DenseMatrix &x, const SystolicConfig &cfg);

// One line per event: "cycle unit event value".
std::string trace_text(const SimTrace &trace);
nlohmann::json summary_json(const LayerSimResult &r);

} // namespace lla
