#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lla/fabric.hpp"
#include "lla/locker.hpp"
#include "lla/model.hpp"

namespace lla {

// Jensen-Shannon divergence in nats; 0 log 0 = 0. Inputs must be
// non-negative and sum to 1 within 1e-6.
double jsd(std::span<const double> p, std::span<const double> q);

// Mean over rows of jsd(softmax(a_t), softmax(b_t)).
double mean_jsd(const DenseMatrix &a, const DenseMatrix &b);

// Share of positions i with candidate[i] == truth[i].
double fidelity(std::span<const std::uint32_t> candidate, std::span<const std::uint32_t> truth);
double bit_fidelity(std::span<const std::uint8_t> candidate, std::span<const std::uint8_t> truth);

// Query access to the original model: tokens in, logits out.
class Oracle {
public:
  virtual ~Oracle() = default;
  virtual DenseMatrix query(std::span<const Token> tokens) const = 0;
};

class ModelOracle : public Oracle {
public:
  explicit ModelOracle(const ToyModel &model) : model_(model) {}
  DenseMatrix query(std::span<const Token> tokens) const override;

private:
  const ToyModel &model_;
};

// Replays logits recorded from another oracle. Unknown inputs are an error.
class TranscriptOracle : public Oracle {
public:
  static TranscriptOracle record(const Oracle &source, std::span<const TokenSeq> inputs);
  DenseMatrix query(std::span<const Token> tokens) const override;
  std::size_t size() const { return log_.size(); }

private:
  std::map<TokenSeq, DenseMatrix> log_;
};

enum class AttackMode { genetic, gradient };
enum class Guidance { og, ol }; // oracle-guided, oracle-less
enum class GradientInit { noise, diagonal };

const char *to_string(AttackMode m);
const char *to_string(Guidance g);
AttackMode parse_attack_mode(const std::string &s);
Guidance parse_guidance(const std::string &s);
GradientInit parse_gradient_init(const std::string &s);

struct AttackConfig {
  AttackMode mode = AttackMode::gradient;
  Guidance guidance = Guidance::og;
  // Budget. Iterations are Adam steps or generations; evaluations count
  // forward-pass equivalents over the probe set (a gradient step costs 3, a
  // genetic individual 1). Whichever limit is hit first ends the run.
  std::optional<std::size_t> max_iterations = 200;
  std::optional<std::size_t> max_evaluations;
  double time_limit_s = 7200.0;
  Seed seed{0};

  std::size_t population = 64;
  std::size_t tournament = 4;
  std::size_t elite = 2;
  double mutation_rate = 0.5; // chance of one within-group swap per child

  double learning_rate = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  GradientInit init = GradientInit::noise;
  double init_scale = 0.01;    // std of the initial logits (noise)
  double diagonal_init = 10.0; // diagonal logit (diagonal)

  void validate() const;
};

// Inputs an attack may use: oracle queries on `probes` (OG) or next-token
// cross-entropy on `corpus` (OL).
struct AttackData {
  const Oracle *oracle = nullptr;
  std::vector<TokenSeq> probes;
  std::vector<TokenSeq> corpus;
};

struct AttackResult {
  std::string scheme; // "lla" or "hpnn"
  AttackMode mode = AttackMode::gradient;
  Guidance guidance = Guidance::og;
  // Column-wise argmax sources (gradient) or best individual (genetic):
  // literal_sources[j] is the lane the attacker routes to position j. May
  // repeat lanes for the gradient attack.
  std::vector<std::uint32_t> literal_sources;
  bool literal_is_permutation = true;
  Permutation repaired;  // key permutation after greedy assignment
  KeyBits key_bits;      // fabric bits of `repaired`, or recovered HPNN bits
  double loss_initial = 0.0;
  double loss_final = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  double elapsed_s = 0.0;

  // Filled by evaluate_attack when the ground truth is known.
  std::optional<double> fidelity;          // literal projection / recovered bits
  std::optional<double> fidelity_repaired; // repaired permutation
  std::optional<double> jsd_after;
  std::optional<double> perplexity_after;
};

// `timing` adds the wall-clock time, which differs between identical runs.
nlohmann::json to_json(const AttackResult &r, bool timing = true);

// Relaxed objective of the gradient attack over the protected block: every
// group's m x m logit matrix L (group-major, row-major within a group) gives
// G~ with column j = softmax(L[:, j]); the loss runs sigma(X W~_up) R G~
// W~_down through the later blocks and the unembedding. The prefix up to the
// protected block is evaluated once.
class RelaxedObjective {
public:
  RelaxedObjective(const LockedModel &locked, const AttackData &data, Guidance guidance);
  ~RelaxedObjective();
  RelaxedObjective(RelaxedObjective &&) noexcept;

  std::size_t parameter_count() const;
  double loss(std::span<const double> logits) const;
  double loss_and_grad(std::span<const double> logits, std::span<double> grad) const;
  // Loss of a hard group-local key permutation (out[pi[i]] = in[i]).
  double permutation_loss(const Permutation &pi) const;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Negation relaxation for HPNN: the pre-activation of protected neuron j is
// scaled by tanh(theta_j).
class HpnnObjective {
public:
  HpnnObjective(const HpnnLockedModel &locked, const AttackData &data, Guidance guidance);
  ~HpnnObjective();
  HpnnObjective(HpnnObjective &&) noexcept;

  std::size_t parameter_count() const;
  double loss(std::span<const double> theta) const;
  double loss_and_grad(std::span<const double> theta, std::span<double> grad) const;

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

AttackResult genetic_attack(const LockedModel &locked, const AttackData &data,
                            const AttackConfig &cfg);
AttackResult gradient_attack(const LockedModel &locked, const AttackData &data,
                             const AttackConfig &cfg);
AttackResult run_attack(const LockedModel &locked, const AttackData &data, const AttackConfig &cfg);
AttackResult hpnn_gradient_attack(const HpnnLockedModel &locked, const AttackData &data,
                                  const AttackConfig &cfg);

// Ground truth and held-out data used to score a finished attack.
struct AttackEval {
  const ToyModel *original = nullptr;
  std::vector<TokenSeq> probes; // JSD against the original
  std::vector<TokenSeq> corpus; // perplexity
  Permutation truth;            // LLA key permutation
  KeyBits truth_bits;           // HPNN embedded key
};

void evaluate_attack(AttackResult &r, const LockedModel &locked, const AttackEval &eval);
void evaluate_attack(AttackResult &r, const HpnnLockedModel &locked, const AttackEval &eval);

// Position j -> argmax_i G[i][j] for one group-major relaxed matrix set.
std::vector<std::uint32_t> argmax_sources(std::span<const double> logits, std::size_t n,
                                          std::size_t m);
// Greedy assignment: repeatedly take the largest remaining entry whose row
// and column are both free. Returns sources (position -> lane).
std::vector<std::uint32_t> greedy_sources(std::span<const double> logits, std::size_t n,
                                          std::size_t m);

} // namespace lla
