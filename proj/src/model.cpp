#include "lla/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>

#include "lla/errors.hpp"

namespace lla {

namespace {

void fill_gaussian(DenseMatrix &m, SplitMix64 &rng, double stddev) {
  for (auto &x : m.values()) {
    x = static_cast<float>(stddev * rng.normal());
  }
}

// Mean |value| per column over all rows.
std::vector<double> column_mean_abs(const DenseMatrix &m) {
  std::vector<double> mean(m.cols(), 0.0);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    const auto row = m.row(t);
    for (std::size_t i = 0; i < m.cols(); ++i) {
      mean[i] += std::abs(static_cast<double>(row[i]));
    }
  }
  for (auto &v : mean) {
    v /= static_cast<double>(std::max<std::size_t>(m.rows(), 1));
  }
  return mean;
}

std::vector<std::uint32_t> features_above(const std::vector<double> &means, double tau) {
  const double mu = std::accumulate(means.begin(), means.end(), 0.0) /
                    static_cast<double>(std::max<std::size_t>(means.size(), 1));
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < means.size(); ++i) {
    if (means[i] > tau * mu) {
      out.push_back(static_cast<std::uint32_t>(i));
    }
  }
  return out;
}

DenseMatrix stack_rows(const std::vector<DenseMatrix> &parts) {
  std::size_t rows = 0;
  const std::size_t cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto &p : parts) {
    rows += p.rows();
  }
  DenseMatrix out(rows, cols);
  std::size_t r = 0;
  for (const auto &p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.row(r).begin());
    r += p.rows();
  }
  return out;
}

// FFN inputs of block `target` for every probe, stacked.
DenseMatrix ffn_inputs(const ToyModel &model, std::size_t target,
                       const std::vector<TokenSeq> &probes) {
  std::vector<DenseMatrix> parts;
  parts.reserve(probes.size());
  for (const auto &seq : probes) {
    auto h = embed_tokens(model, seq);
    for (std::size_t b = 0; b < target; ++b) {
      apply_mix(model.blocks[b], h);
      add_in_place(h, ffn_forward(model.blocks[b].ffn, h));
    }
    apply_mix(model.blocks[target], h);
    parts.push_back(std::move(h));
  }
  return stack_rows(parts);
}

void scale_row(DenseMatrix &m, std::size_t r, float s) {
  for (auto &x : m.row(r)) {
    x *= s;
  }
}

std::string format_dims(const std::vector<std::uint32_t> &dims) {
  std::ostringstream os;
  os << "{";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    os << (i ? "," : "") << dims[i];
  }
  os << "}";
  return os.str();
}

} // namespace

const char *to_string(FfnKind kind) { return kind == FfnKind::gated ? "gated" : "standard"; }

const char *to_string(Activation act) { return act == Activation::silu ? "silu" : "relu"; }

FfnKind parse_ffn_kind(const std::string &s) {
  if (s == "standard") {
    return FfnKind::standard;
  }
  if (s == "gated") {
    return FfnKind::gated;
  }
  throw ConfigError("unknown FFN kind '" + s + "'");
}

Activation parse_activation(const std::string &s) {
  if (s == "relu") {
    return Activation::relu;
  }
  if (s == "silu") {
    return Activation::silu;
  }
  throw ConfigError("unknown activation '" + s + "'");
}

float activate(Activation act, float x) {
  if (act == Activation::relu) {
    return x > 0.0f ? x : 0.0f;
  }
  return x / (1.0f + std::exp(-x));
}

float activate_grad(Activation act, float x) {
  if (act == Activation::relu) {
    return x > 0.0f ? 1.0f : 0.0f;
  }
  const float s = 1.0f / (1.0f + std::exp(-x));
  return s * (1.0f + x * (1.0f - s));
}

void FfnBlock::validate() const {
  if (w_up.rows() != w_down.cols() || w_up.cols() != w_down.rows()) {
    throw ShapeError("FfnBlock: W_up is " + std::to_string(w_up.rows()) + "x" +
                     std::to_string(w_up.cols()) + " but W_down is " +
                     std::to_string(w_down.rows()) + "x" + std::to_string(w_down.cols()));
  }
  if ((kind == FfnKind::gated) != w_gate.has_value()) {
    throw ShapeError("FfnBlock: gated blocks need W_gate, standard blocks must not have one");
  }
  if (w_gate && (w_gate->rows() != w_up.rows() || w_gate->cols() != w_up.cols())) {
    throw ShapeError("FfnBlock: W_gate shape differs from W_up");
  }
}

void ToyModel::validate() const {
  if (embed.rows() != vocab || embed.cols() != d_model) {
    throw ShapeError("ToyModel: embedding must be V x D_m");
  }
  if (unembed.rows() != d_model || unembed.cols() != vocab) {
    throw ShapeError("ToyModel: unembedding must be D_m x V");
  }
  for (const auto &b : blocks) {
    b.ffn.validate();
    if (b.ffn.d_model() != d_model || b.mix.rows() != d_model || b.mix.cols() != d_model) {
      throw ShapeError("ToyModel: block width differs from D_m");
    }
  }
}

DenseMatrix ffn_hidden(const FfnBlock &block, const DenseMatrix &x) {
  if (x.cols() != block.d_model()) {
    throw ShapeError("ffn_forward: input has " + std::to_string(x.cols()) +
                     " features, block expects " + std::to_string(block.d_model()));
  }
  if (block.kind == FfnKind::standard) {
    auto z = matmul(x, block.w_up);
    for (auto &v : z.values()) {
      v = activate(block.activation, v);
    }
    return z;
  }
  auto gate = matmul(x, *block.w_gate);
  const auto up = matmul(x, block.w_up);
  for (std::size_t i = 0; i < gate.size(); ++i) {
    gate.values()[i] = activate(block.activation, gate.values()[i]) * up.values()[i];
  }
  return gate;
}

DenseMatrix ffn_forward(const FfnBlock &block, const DenseMatrix &x) {
  return matmul(ffn_hidden(block, x), block.w_down);
}

DenseMatrix embed_tokens(const ToyModel &model, std::span<const Token> tokens) {
  DenseMatrix h(tokens.size(), model.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= model.vocab) {
      throw InputError("token id " + std::to_string(tokens[t]) + " out of range for vocabulary " +
                       std::to_string(model.vocab));
    }
    std::copy_n(model.embed.row(tokens[t]).begin(), model.d_model, h.row(t).begin());
  }
  return h;
}

void apply_mix(const Block &block, DenseMatrix &h) { add_in_place(h, matmul(h, block.mix)); }

void add_in_place(DenseMatrix &h, const DenseMatrix &y) {
  if (h.rows() != y.rows() || h.cols() != y.cols()) {
    throw ShapeError("residual add: shape mismatch");
  }
  for (std::size_t i = 0; i < h.size(); ++i) {
    h.values()[i] += y.values()[i];
  }
}

ForwardResult model_forward(const ToyModel &model, std::span<const Token> tokens, bool capture,
                            const FfnOverride *override_ffn) {
  ForwardResult result;
  auto h = embed_tokens(model, tokens);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto &block = model.blocks[b];
    apply_mix(block, h);
    DenseMatrix y;
    if (override_ffn && override_ffn->block == b) {
      y = override_ffn->run(h);
      if (capture) {
        result.captures.push_back({y, {}});
      }
    } else if (capture) {
      const auto z = ffn_hidden(block.ffn, h);
      y = matmul(z, block.ffn.w_down);
      auto means = column_mean_abs(z);
      result.captures.push_back({y, std::vector<float>(means.begin(), means.end())});
    } else {
      y = ffn_forward(block.ffn, h);
    }
    add_in_place(h, y);
  }
  result.logits = matmul(h, model.unembed);
  return result;
}

LogitsFn logits_fn(const ToyModel &model) {
  return [&model](std::span<const Token> tokens) {
    return model_forward(model, tokens, false).logits;
  };
}

namespace {

// Rescale the unembedding so the row-centred logits on the probes have RMS
// `target`. Without this the residual stream's growth through the blocks
// saturates the softmax.
void calibrate_unembed(ToyModel &model, const std::vector<TokenSeq> &probes, double target) {
  double sq = 0.0;
  std::size_t count = 0;
  for (const auto &seq : probes) {
    const auto logits = model_forward(model, seq, false).logits;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
      double mean = 0.0;
      for (std::size_t k = 0; k < logits.cols(); ++k) {
        mean += logits(t, k);
      }
      mean /= static_cast<double>(logits.cols());
      for (std::size_t k = 0; k < logits.cols(); ++k) {
        const double c = logits(t, k) - mean;
        sq += c * c;
      }
      count += logits.cols();
    }
  }
  const double rms = std::sqrt(sq / static_cast<double>(std::max<std::size_t>(count, 1)));
  if (rms == 0.0) {
    return;
  }
  const auto f = static_cast<float>(target / rms);
  for (auto &v : model.unembed.values()) {
    v *= f;
  }
}

} // namespace

ToyModel synth_model(const SynthConfig &cfg, Seed seed) {
  if (cfg.n_blocks == 0) {
    throw ConstructionError("synth_model: n_blocks must be at least 1");
  }
  if (cfg.vocab < 2 || cfg.d_model == 0 || cfg.d_ff == 0) {
    throw ConstructionError("synth_model: vocab >= 2, d_model >= 1 and d_ff >= 1 required");
  }
  const bool plant = cfg.outlier_gain > 1.0f && !cfg.outlier_dims.empty();
  if (plant) {
    if (cfg.outlier_block >= cfg.n_blocks) {
      throw ConstructionError("synth_model: outlier_block out of range");
    }
    std::vector<bool> seen(cfg.d_model, false);
    for (auto d : cfg.outlier_dims) {
      if (d >= cfg.d_model || seen[d]) {
        throw ConstructionError("synth_model: outlier dims must be distinct and < d_model");
      }
      seen[d] = true;
    }
    if (cfg.hot_neurons == 0 || cfg.hot_neurons > cfg.d_ff) {
      throw ConstructionError("synth_model: hot_neurons must be in [1, d_ff]");
    }
  }

  SplitMix64 rng(seed);
  ToyModel model;
  model.vocab = cfg.vocab;
  model.d_model = cfg.d_model;
  const double dm = static_cast<double>(cfg.d_model);
  const double dff = static_cast<double>(cfg.d_ff);

  // Token embeddings share a common component, as in trained models; hot
  // neurons key on it.
  std::vector<double> common(cfg.d_model);
  for (auto &c : common) {
    c = rng.normal();
  }
  model.embed = DenseMatrix(cfg.vocab, cfg.d_model);
  for (std::size_t t = 0; t < cfg.vocab; ++t) {
    for (std::size_t j = 0; j < cfg.d_model; ++j) {
      model.embed(t, j) = static_cast<float>(common[j] + rng.normal());
    }
  }
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    Block block;
    block.mix = DenseMatrix(cfg.d_model, cfg.d_model);
    fill_gaussian(block.mix, rng, 0.25 / std::sqrt(dm));
    block.ffn.kind = cfg.kind;
    block.ffn.activation = cfg.activation;
    block.ffn.w_up = DenseMatrix(cfg.d_model, cfg.d_ff);
    fill_gaussian(block.ffn.w_up, rng, 1.0 / std::sqrt(dm));
    if (cfg.kind == FfnKind::gated) {
      block.ffn.w_gate = DenseMatrix(cfg.d_model, cfg.d_ff);
      fill_gaussian(*block.ffn.w_gate, rng, 1.0 / std::sqrt(dm));
    }
    block.ffn.w_down = DenseMatrix(cfg.d_ff, cfg.d_model);
    fill_gaussian(block.ffn.w_down, rng, 1.0 / std::sqrt(dff));
    model.blocks.push_back(std::move(block));
  }
  model.unembed = DenseMatrix(cfg.d_model, cfg.vocab);
  fill_gaussian(model.unembed, rng, 1.0 / std::sqrt(dm));

  const auto probes = random_probes(cfg.vocab, 8, 64, derive_seed(seed, 101));
  if (!plant) {
    calibrate_unembed(model, probes, cfg.logit_scale);
    return model;
  }

  const float damp = 1.0f / cfg.outlier_gain;
  for (std::size_t b = cfg.outlier_block; b < cfg.n_blocks; ++b) {
    auto &block = model.blocks[b];
    if (b > cfg.outlier_block) {
      // The residual stream already carries the outliers; downstream readers
      // see them at normal scale.
      for (auto d : cfg.outlier_dims) {
        scale_row(block.mix, d, damp);
        scale_row(block.ffn.w_up, d, damp);
        if (block.ffn.w_gate) {
          scale_row(*block.ffn.w_gate, d, damp);
        }
      }
    }
    const auto x = ffn_inputs(model, b, probes);

    std::vector<std::uint32_t> hot(cfg.d_ff);
    std::iota(hot.begin(), hot.end(), 0u);
    rng.shuffle(std::span<std::uint32_t>(hot));
    hot.resize(cfg.hot_neurons);
    std::sort(hot.begin(), hot.end());

    std::vector<double> dir(cfg.d_model, 0.0);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        dir[j] += x(t, j);
      }
    }
    // Downstream of the planted block the mean direction would be all
    // outlier; hot neurons key on the ordinary features instead.
    for (auto d : cfg.outlier_dims) {
      dir[d] = 0.0;
    }
    const double norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
    if (norm == 0.0) {
      throw ConstructionError("synth_model: probe inputs have no common direction");
    }
    for (auto &v : dir) {
      v /= norm;
    }
    double mean_proj = 0.0;
    for (std::size_t t = 0; t < x.rows(); ++t) {
      for (std::size_t j = 0; j < cfg.d_model; ++j) {
        mean_proj += x(t, j) * dir[j];
      }
    }
    mean_proj /= static_cast<double>(x.rows());
    const auto pre = matmul(x, block.ffn.w_up);
    double spread = 0.0;
    for (float v : pre.values()) {
      spread += static_cast<double>(v) * v;
    }
    spread = std::sqrt(spread / static_cast<double>(pre.size()));
    if (mean_proj <= 0.0 || spread <= 0.0) {
      throw ConstructionError("synth_model: degenerate probe statistics");
    }
    const double lift = cfg.hot_boost * spread / mean_proj;
    // Gated blocks multiply gate by up; lifting both fully would square the
    // boost, so the up side only gets a unit-spread bias.
    const double up_lift = block.ffn.w_gate ? lift / cfg.hot_boost : lift;
    for (auto j : hot) {
      for (std::size_t r = 0; r < cfg.d_model; ++r) {
        block.ffn.w_up(r, j) += static_cast<float>(up_lift * dir[r]);
        if (block.ffn.w_gate) {
          (*block.ffn.w_gate)(r, j) += static_cast<float>(lift * dir[r]);
        }
      }
      for (std::size_t d = 0; d < cfg.d_model; ++d) {
        block.ffn.w_down(j, d) = 0.0f;
      }
    }

    const auto z = ffn_hidden(block.ffn, x);
    const auto y = matmul(z, block.ffn.w_down);
    const auto ybar = column_mean_abs(y);
    double typical = 0.0;
    std::size_t normal = 0;
    for (std::size_t i = 0; i < cfg.d_model; ++i) {
      if (std::find(cfg.outlier_dims.begin(), cfg.outlier_dims.end(), i) ==
          cfg.outlier_dims.end()) {
        typical += ybar[i];
        ++normal;
      }
    }
    typical /= static_cast<double>(std::max<std::size_t>(normal, 1));
    double drive = 0.0;
    for (std::size_t t = 0; t < z.rows(); ++t) {
      for (auto j : hot) {
        drive += z(t, j);
      }
    }
    drive /= static_cast<double>(z.rows());
    if (drive <= 0.0) {
      throw ConstructionError("synth_model: hot neurons are inactive on the probes");
    }
    const auto weight = static_cast<float>(cfg.outlier_gain * typical / drive);
    for (auto j : hot) {
      for (auto d : cfg.outlier_dims) {
        block.ffn.w_down(j, d) = weight;
      }
    }
  }
  for (auto d : cfg.outlier_dims) {
    scale_row(model.unembed, d, damp);
  }
  calibrate_unembed(model, probes, cfg.logit_scale);

  // Verify: no outliers before the planted block, exactly the planted set
  // from it on.
  auto expected = cfg.outlier_dims;
  std::sort(expected.begin(), expected.end());
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const auto x = ffn_inputs(model, b, probes);
    const auto means = column_mean_abs(ffn_forward(model.blocks[b].ffn, x));
    const auto found = features_above(means, cfg.tau);
    const auto want = b < cfg.outlier_block ? std::vector<std::uint32_t>{} : expected;
    if (found != want) {
      const double mu = std::accumulate(means.begin(), means.end(), 0.0) /
                        static_cast<double>(means.size());
      std::ostringstream os;
      os << "synth_model: block " << b << " outlier set " << format_dims(found) << " != "
         << format_dims(want) << " at tau=" << cfg.tau << " (ratios to mean:";
      for (auto d : expected) {
        os << " dim" << d << "=" << means[d] / mu;
      }
      os << "); outlier_gain " << cfg.outlier_gain << " is too small for this threshold";
      throw ConstructionError(os.str());
    }
  }
  return model;
}

std::vector<TokenSeq> random_probes(std::size_t vocab, std::size_t count, std::size_t length,
                                    Seed seed) {
  SplitMix64 rng(seed);
  std::vector<TokenSeq> probes(count, TokenSeq(length));
  for (auto &seq : probes) {
    for (auto &tok : seq) {
      tok = static_cast<Token>(rng.below(vocab));
    }
  }
  return probes;
}

std::vector<TokenSeq> sample_corpus(const ToyModel &model, std::size_t count, std::size_t length,
                                    Seed seed) {
  TokenSeq all(model.vocab);
  std::iota(all.begin(), all.end(), 0u);
  const auto logits = model_forward(model, all, false).logits;
  std::vector<std::vector<double>> cdf(model.vocab);
  for (std::size_t t = 0; t < model.vocab; ++t) {
    const auto p = softmax_row(logits.row(t));
    cdf[t].resize(p.size());
    std::partial_sum(p.begin(), p.end(), cdf[t].begin());
  }
  SplitMix64 rng(seed);
  std::vector<TokenSeq> corpus(count, TokenSeq(length));
  for (auto &seq : corpus) {
    for (std::size_t i = 0; i < length; ++i) {
      if (i == 0) {
        seq[i] = static_cast<Token>(rng.below(model.vocab));
        continue;
      }
      const auto &c = cdf[seq[i - 1]];
      const double u = rng.uniform() * c.back();
      const auto it = std::upper_bound(c.begin(), c.end(), u);
      seq[i] = static_cast<Token>(std::min<std::size_t>(it - c.begin(), model.vocab - 1));
    }
  }
  return corpus;
}

std::vector<double> softmax_row(std::span<const float> logits) {
  double peak = -INFINITY;
  for (float v : logits) {
    peak = std::max(peak, static_cast<double>(v));
  }
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - peak);
    total += p[i];
  }
  for (auto &v : p) {
    v /= total;
  }
  return p;
}

double perplexity(const LogitsFn &logits, std::span<const TokenSeq> corpus) {
  if (corpus.empty()) {
    throw InputError("perplexity: empty corpus");
  }
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto &seq : corpus) {
    if (seq.size() < 2) {
      throw InputError("perplexity: every sequence needs at least two tokens");
    }
    const auto out = logits(seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      const auto row = out.row(t);
      double peak = -INFINITY;
      for (float v : row) {
        peak = std::max(peak, static_cast<double>(v));
      }
      double total = 0.0;
      for (float v : row) {
        total += std::exp(static_cast<double>(v) - peak);
      }
      nll += peak + std::log(total) - static_cast<double>(row[seq[t + 1]]);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

double perplexity(const ToyModel &model, std::span<const TokenSeq> corpus) {
  return perplexity(logits_fn(model), corpus);
}

} // namespace lla
