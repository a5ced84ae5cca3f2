#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lla/linalg.hpp"
#include "lla/rng.hpp"

namespace lla {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

enum class FfnKind { standard, gated };
enum class Activation { relu, silu };

const char *to_string(FfnKind kind);
const char *to_string(Activation act);
FfnKind parse_ffn_kind(const std::string &s);
Activation parse_activation(const std::string &s);

float activate(Activation act, float x);
// d activate / dx
float activate_grad(Activation act, float x);

struct FfnBlock {
  FfnKind kind = FfnKind::standard;
  DenseMatrix w_up;                  // D_m x D_ff
  std::optional<DenseMatrix> w_gate; // D_m x D_ff, gated only
  DenseMatrix w_down;                // D_ff x D_m
  Activation activation = Activation::relu;

  std::size_t d_model() const { return w_up.rows(); }
  std::size_t d_ff() const { return w_up.cols(); }
  void validate() const;
};

struct Block {
  DenseMatrix mix; // per-token D_m x D_m stand-in for attention
  FfnBlock ffn;
};

struct ToyModel {
  std::size_t vocab = 0;
  std::size_t d_model = 0;
  DenseMatrix embed; // V x D_m
  std::vector<Block> blocks;
  DenseMatrix unembed; // D_m x V

  void validate() const;
};

struct HiddenCapture {
  DenseMatrix y;            // FFN output, T x D_m
  std::vector<float> u_bar; // mean |down-projection input| per neuron
};

struct ForwardResult {
  DenseMatrix logits; // T x V
  std::vector<HiddenCapture> captures;
};

// Replaces the FFN of one block during a forward pass.
struct FfnOverride {
  std::size_t block = 0;
  std::function<DenseMatrix(const DenseMatrix &)> run;
};

// Input of the down projection: sigma(X W_up) for standard blocks,
// sigma(X W_gate) .* (X W_up) for gated blocks.
DenseMatrix ffn_hidden(const FfnBlock &block, const DenseMatrix &x);
DenseMatrix ffn_forward(const FfnBlock &block, const DenseMatrix &x);

DenseMatrix embed_tokens(const ToyModel &model, std::span<const Token> tokens);
// h <- h + h * mix
void apply_mix(const Block &block, DenseMatrix &h);
// h <- h + y
void add_in_place(DenseMatrix &h, const DenseMatrix &y);

ForwardResult model_forward(const ToyModel &model, std::span<const Token> tokens,
                            bool capture = true, const FfnOverride *override_ffn = nullptr);

using LogitsFn = std::function<DenseMatrix(std::span<const Token>)>;
LogitsFn logits_fn(const ToyModel &model);

struct SynthConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 32;
  std::size_t d_ff = 256;
  std::size_t n_blocks = 3;
  std::vector<std::uint32_t> outlier_dims{3, 17};
  std::size_t outlier_block = 1;
  float outlier_gain = 50.0f;
  FfnKind kind = FfnKind::standard;
  Activation activation = Activation::relu;
  // Neurons per planted block that drive the outlier features.
  std::size_t hot_neurons = 4;
  // Mean pre-activation of a hot neuron, in units of the typical
  // pre-activation spread.
  float hot_boost = 12.0f;
  // RMS of the row-centred logits on random probes.
  float logit_scale = 3.0f;
  // Threshold used to verify the planting.
  float tau = 5.0f;
};

// Random toy model. For outlier_gain > 1 the blocks from outlier_block on get
// hot neurons whose down-projection rows write into outlier_dims, calibrated
// on random probes so the feature means there are about outlier_gain times
// the typical feature mean. Throws ConstructionError if the planted features
// are not exactly the outlier set at cfg.tau.
ToyModel synth_model(const SynthConfig &cfg, Seed seed);

// `count` sequences of `length` tokens drawn uniformly from the vocabulary.
std::vector<TokenSeq> random_probes(std::size_t vocab, std::size_t count, std::size_t length,
                                    Seed seed);

// Token streams sampled from the model's own next-token distribution. The mix
// stub is per-token, so the model is first-order Markov over tokens and the
// transition table is one forward pass over the vocabulary.
std::vector<TokenSeq> sample_corpus(const ToyModel &model, std::size_t count, std::size_t length,
                                    Seed seed);

// exp of the mean next-token negative log-likelihood (natural log).
double perplexity(const LogitsFn &logits, std::span<const TokenSeq> corpus);
double perplexity(const ToyModel &model, std::span<const TokenSeq> corpus);

// Row-wise softmax in double precision.
std::vector<double> softmax_row(std::span<const float> logits);

} // namespace lla
