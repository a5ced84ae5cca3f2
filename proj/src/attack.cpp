#include "lla/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "lla/errors.hpp"

namespace lla {

namespace {

// Double-precision dense matrix for the attack objectives. Finite-difference
// checks of the hand-written gradients need more than float resolution.
struct MatD {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  MatD() = default;
  MatD(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  explicit MatD(const DenseMatrix &m) : rows(m.rows()), cols(m.cols()), v(m.size()) {
    std::copy(m.values().begin(), m.values().end(), v.begin());
  }
  double &operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  double *row(std::size_t r) { return v.data() + r * cols; }
  const double *row(std::size_t r) const { return v.data() + r * cols; }
};

// A * B
MatD mul(const MatD &a, const MatD &b) {
  MatD c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double *ci = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) {
        continue;
      }
      const double *bk = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        ci[j] += aik * bk[j];
      }
    }
  }
  return c;
}

// A * B^T
MatD mul_bt(const MatD &a, const MatD &b) {
  MatD c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double *ai = a.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double *bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        s += ai[k] * bj[k];
      }
      c(i, j) = s;
    }
  }
  return c;
}

double act(Activation a, double x) {
  if (a == Activation::relu) {
    return x > 0.0 ? x : 0.0;
  }
  return x / (1.0 + std::exp(-x));
}

double act_grad(Activation a, double x) {
  if (a == Activation::relu) {
    return x > 0.0 ? 1.0 : 0.0;
  }
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

std::vector<double> softmax(const double *z, std::size_t n) {
  const double mx = *std::max_element(z, z + n);
  std::vector<double> q(n);
  double sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    q[k] = std::exp(z[k] - mx);
    sum += q[k];
  }
  for (auto &x : q) {
    x /= sum;
  }
  return q;
}

double jsd_unchecked(const double *p, const double *q, std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double m = 0.5 * (p[k] + q[k]);
    if (p[k] > 0.0) {
      s += 0.5 * p[k] * std::log(p[k] / m);
    }
    if (q[k] > 0.0) {
      s += 0.5 * q[k] * std::log(q[k] / m);
    }
  }
  return std::max(s, 0.0);
}

struct LaterBlock {
  MatD mix, w_up, w_gate, w_down;
  FfnKind kind = FfnKind::standard;
  Activation activation = Activation::relu;
};

struct Sample {
  MatD h_in; // input of the protected FFN (after the mix)
  MatD a;    // protected block: U (LLA) or stored pre-activation (HPNN)
  MatD up;   // HPNN gated: X W_up
  std::vector<std::vector<double>> target; // OG: oracle distributions
  std::vector<std::uint32_t> next;          // OL: next tokens
};

// Everything after the protected block's down projection.
class Tail {
public:
  Tail(const ToyModel &model, std::size_t block, const DenseMatrix &w_down, Guidance guidance)
      : guidance_(guidance), w_down_(w_down), unembed_(model.unembed) {
    for (std::size_t b = block + 1; b < model.blocks.size(); ++b) {
      const auto &blk = model.blocks[b];
      LaterBlock lb;
      lb.mix = MatD(blk.mix);
      lb.w_up = MatD(blk.ffn.w_up);
      if (blk.ffn.w_gate) {
        lb.w_gate = MatD(*blk.ffn.w_gate);
      }
      lb.w_down = MatD(blk.ffn.w_down);
      lb.kind = blk.ffn.kind;
      lb.activation = blk.ffn.activation;
      later_.push_back(std::move(lb));
    }
  }

  // Loss summed over the sample's scored positions; dv (if given) receives
  // d loss / d V where V is the protected block's down-projection input.
  double run(const Sample &s, const MatD &v, MatD *dv) const {
    struct Cache {
      MatD h_mid, pre, up, hidden;
    };
    MatD h = s.h_in;
    {
      const MatD y = mul(v, w_down_);
      for (std::size_t i = 0; i < h.v.size(); ++i) {
        h.v[i] += y.v[i];
      }
    }
    std::vector<Cache> caches(later_.size());
    for (std::size_t b = 0; b < later_.size(); ++b) {
      const auto &lb = later_[b];
      auto &c = caches[b];
      c.h_mid = mul(h, lb.mix);
      for (std::size_t i = 0; i < h.v.size(); ++i) {
        c.h_mid.v[i] += h.v[i];
      }
      if (lb.kind == FfnKind::standard) {
        c.pre = mul(c.h_mid, lb.w_up);
        c.hidden = c.pre;
        for (auto &x : c.hidden.v) {
          x = act(lb.activation, x);
        }
      } else {
        c.pre = mul(c.h_mid, lb.w_gate);
        c.up = mul(c.h_mid, lb.w_up);
        c.hidden = c.pre;
        for (std::size_t i = 0; i < c.hidden.v.size(); ++i) {
          c.hidden.v[i] = act(lb.activation, c.pre.v[i]) * c.up.v[i];
        }
      }
      h = mul(c.hidden, lb.w_down);
      for (std::size_t i = 0; i < h.v.size(); ++i) {
        h.v[i] += c.h_mid.v[i];
      }
    }
    const MatD logits = mul(h, unembed_);
    const std::size_t vocab = logits.cols;
    const std::size_t scored = positions(s);
    MatD dz(logits.rows, vocab);
    double loss = 0.0;
    for (std::size_t t = 0; t < scored; ++t) {
      const auto q = softmax(logits.row(t), vocab);
      if (guidance_ == Guidance::og) {
        const auto &p = s.target[t];
        loss += jsd_unchecked(p.data(), q.data(), vocab);
        if (dv) {
          // d JSD / d q_k = 1/2 log(q_k / m_k); then through the softmax.
          std::vector<double> g(vocab, 0.0);
          double qg = 0.0;
          for (std::size_t k = 0; k < vocab; ++k) {
            if (q[k] > 0.0) {
              g[k] = 0.5 * std::log(q[k] / (0.5 * (p[k] + q[k])));
              qg += q[k] * g[k];
            }
          }
          for (std::size_t k = 0; k < vocab; ++k) {
            dz(t, k) = q[k] * (g[k] - qg);
          }
        }
      } else {
        const auto y = s.next[t];
        loss -= std::log(std::max(q[y], std::numeric_limits<double>::min()));
        if (dv) {
          for (std::size_t k = 0; k < vocab; ++k) {
            dz(t, k) = q[k];
          }
          dz(t, y) -= 1.0;
        }
      }
    }
    if (!dv) {
      return loss;
    }
    MatD dh = mul_bt(dz, unembed_);
    for (std::size_t b = later_.size(); b-- > 0;) {
      const auto &lb = later_[b];
      const auto &c = caches[b];
      MatD dhidden = mul_bt(dh, lb.w_down);
      MatD dh_mid = dh;
      if (lb.kind == FfnKind::standard) {
        for (std::size_t i = 0; i < dhidden.v.size(); ++i) {
          dhidden.v[i] *= act_grad(lb.activation, c.pre.v[i]);
        }
        const MatD back = mul_bt(dhidden, lb.w_up);
        for (std::size_t i = 0; i < dh_mid.v.size(); ++i) {
          dh_mid.v[i] += back.v[i];
        }
      } else {
        MatD dgate(dhidden.rows, dhidden.cols), dup(dhidden.rows, dhidden.cols);
        for (std::size_t i = 0; i < dhidden.v.size(); ++i) {
          dgate.v[i] = dhidden.v[i] * c.up.v[i] * act_grad(lb.activation, c.pre.v[i]);
          dup.v[i] = dhidden.v[i] * act(lb.activation, c.pre.v[i]);
        }
        const MatD bg = mul_bt(dgate, lb.w_gate);
        const MatD bu = mul_bt(dup, lb.w_up);
        for (std::size_t i = 0; i < dh_mid.v.size(); ++i) {
          dh_mid.v[i] += bg.v[i] + bu.v[i];
        }
      }
      // h_mid = h + h * mix
      dh = mul_bt(dh_mid, lb.mix);
      for (std::size_t i = 0; i < dh.v.size(); ++i) {
        dh.v[i] += dh_mid.v[i];
      }
    }
    *dv = mul_bt(dh, w_down_);
    return loss;
  }

  std::size_t positions(const Sample &s) const {
    return guidance_ == Guidance::og ? s.target.size() : s.next.size();
  }

private:
  Guidance guidance_;
  MatD w_down_;
  MatD unembed_;
  std::vector<LaterBlock> later_;
};

// Hidden state entering the protected FFN for every input sequence.
std::vector<Sample> prefix_samples(const ToyModel &model, std::size_t block,
                                   const AttackData &data, Guidance guidance) {
  const auto &inputs = guidance == Guidance::og ? data.probes : data.corpus;
  if (inputs.empty()) {
    throw InputError(guidance == Guidance::og ? "attack: empty probe set"
                                              : "attack: empty corpus");
  }
  if (guidance == Guidance::og && data.oracle == nullptr) {
    throw InputError("oracle-guided attack needs an oracle");
  }
  std::vector<Sample> samples(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto &seq = inputs[i];
    if (seq.empty() || (guidance == Guidance::ol && seq.size() < 2)) {
      throw InputError("attack: sequence " + std::to_string(i) + " is too short");
    }
    auto h = embed_tokens(model, seq);
    for (std::size_t b = 0; b < block; ++b) {
      apply_mix(model.blocks[b], h);
      add_in_place(h, ffn_forward(model.blocks[b].ffn, h));
    }
    apply_mix(model.blocks[block], h);
    samples[i].h_in = MatD(h);
    if (guidance == Guidance::og) {
      const auto logits = data.oracle->query(seq);
      if (logits.rows() != seq.size() || logits.cols() != model.vocab) {
        throw InputError("oracle returned logits of the wrong shape");
      }
      for (std::size_t t = 0; t < logits.rows(); ++t) {
        samples[i].target.push_back(softmax_row(logits.row(t)));
      }
    } else {
      samples[i].next.assign(seq.begin() + 1, seq.end());
    }
  }
  return samples;
}

std::size_t total_positions(const Tail &tail, const std::vector<Sample> &samples) {
  std::size_t n = 0;
  for (const auto &s : samples) {
    n += tail.positions(s);
  }
  return n;
}

// Column-softmax of every group's logit matrix.
std::vector<double> column_softmax(std::span<const double> logits, std::size_t n, std::size_t m) {
  std::vector<double> g(logits.size());
  for (std::size_t grp = 0; grp < n / m; ++grp) {
    const double *l = logits.data() + grp * m * m;
    double *out = g.data() + grp * m * m;
    for (std::size_t j = 0; j < m; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) {
        mx = std::max(mx, l[i * m + j]);
      }
      double sum = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        out[i * m + j] = std::exp(l[i * m + j] - mx);
        sum += out[i * m + j];
      }
      for (std::size_t i = 0; i < m; ++i) {
        out[i * m + j] /= sum;
      }
    }
  }
  return g;
}

Permutation sources_to_permutation(const std::vector<std::uint32_t> &src) {
  return inverse(src);
}

bool is_perm(const std::vector<std::uint32_t> &v) { return is_permutation(v); }

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Remaining-budget test shared by the attack loops.
struct Budget {
  const AttackConfig &cfg;
  Clock::time_point start = Clock::now();

  bool allows(std::size_t iterations, std::size_t evaluations, std::size_t step_cost) const {
    if (cfg.max_iterations && iterations >= *cfg.max_iterations) {
      return false;
    }
    if (cfg.max_evaluations && evaluations + step_cost > *cfg.max_evaluations) {
      return false;
    }
    return seconds_since(start) < cfg.time_limit_s;
  }
};

struct Adam {
  const AttackConfig &cfg;
  std::vector<double> m, v;
  std::size_t t = 0;

  Adam(const AttackConfig &c, std::size_t size) : cfg(c), m(size, 0.0), v(size, 0.0) {}

  void step(std::vector<double> &params, const std::vector<double> &grad) {
    ++t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      params[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
};

[[noreturn]] void non_finite(const char *who, std::size_t iteration, double loss,
                             const std::vector<double> &params) {
  double mx = 0.0;
  for (double p : params) {
    mx = std::max(mx, std::abs(p));
  }
  std::ostringstream os;
  os << who << ": non-finite loss at iteration " << iteration << " (loss " << loss
     << ", max |param| " << mx << ", " << params.size() << " parameters)";
  throw AttackError(os.str());
}

} // namespace

double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) {
    throw InputError("jsd: distributions must have the same non-zero length");
  }
  for (auto dist : {p, q}) {
    double sum = 0.0;
    for (double x : dist) {
      if (!(x >= 0.0) || !std::isfinite(x)) {
        throw InputError("jsd: negative or non-finite probability");
      }
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw InputError("jsd: probabilities sum to " + std::to_string(sum));
    }
  }
  return jsd_unchecked(p.data(), q.data(), p.size());
}

double mean_jsd(const DenseMatrix &a, const DenseMatrix &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
    throw ShapeError("mean_jsd: logits shapes differ");
  }
  double s = 0.0;
  for (std::size_t t = 0; t < a.rows(); ++t) {
    const auto p = softmax_row(a.row(t));
    const auto q = softmax_row(b.row(t));
    s += jsd_unchecked(p.data(), q.data(), p.size());
  }
  return s / static_cast<double>(a.rows());
}

double fidelity(std::span<const std::uint32_t> candidate, std::span<const std::uint32_t> truth) {
  if (candidate.size() != truth.size()) {
    throw InputError("fidelity: candidate and truth differ in length");
  }
  if (truth.empty()) {
    return 0.0;
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    hit += candidate[i] == truth[i] ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

double bit_fidelity(std::span<const std::uint8_t> candidate, std::span<const std::uint8_t> truth) {
  if (candidate.size() != truth.size()) {
    throw InputError("bit_fidelity: length mismatch");
  }
  if (truth.empty()) {
    return 0.0;
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    hit += (candidate[i] != 0) == (truth[i] != 0) ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

DenseMatrix ModelOracle::query(std::span<const Token> tokens) const {
  return model_forward(model_, tokens, false).logits;
}

TranscriptOracle TranscriptOracle::record(const Oracle &source, std::span<const TokenSeq> inputs) {
  TranscriptOracle t;
  for (const auto &seq : inputs) {
    t.log_[seq] = source.query(seq);
  }
  return t;
}

DenseMatrix TranscriptOracle::query(std::span<const Token> tokens) const {
  const auto it = log_.find(TokenSeq(tokens.begin(), tokens.end()));
  if (it == log_.end()) {
    throw InputError("transcript oracle: no recorded answer for this input");
  }
  return it->second;
}

const char *to_string(AttackMode m) { return m == AttackMode::genetic ? "genetic" : "gradient"; }
const char *to_string(Guidance g) { return g == Guidance::og ? "OG" : "OL"; }

AttackMode parse_attack_mode(const std::string &s) {
  if (s == "genetic") {
    return AttackMode::genetic;
  }
  if (s == "gradient") {
    return AttackMode::gradient;
  }
  throw ConfigError("unknown attack mode '" + s + "' (expected genetic or gradient)");
}

Guidance parse_guidance(const std::string &s) {
  if (s == "OG" || s == "og") {
    return Guidance::og;
  }
  if (s == "OL" || s == "ol") {
    return Guidance::ol;
  }
  throw ConfigError("unknown guidance '" + s + "' (expected OG or OL)");
}

GradientInit parse_gradient_init(const std::string &s) {
  if (s == "noise") {
    return GradientInit::noise;
  }
  if (s == "diagonal") {
    return GradientInit::diagonal;
  }
  throw ConfigError("unknown gradient init '" + s + "' (expected noise or diagonal)");
}

void AttackConfig::validate() const {
  if (!(time_limit_s > 0.0)) {
    throw ConfigError("attack time limit must be positive");
  }
  if (max_evaluations && *max_evaluations == 0) {
    throw ConfigError("attack evaluation budget must be positive");
  }
  if (!(learning_rate > 0.0)) {
    throw ConfigError("learning rate must be positive");
  }
  if (population < 2 || tournament == 0 || elite >= population) {
    throw ConfigError("genetic attack needs population >= 2, tournament >= 1, elite < population");
  }
  if (mutation_rate < 0.0 || mutation_rate > 1.0) {
    throw ConfigError("mutation rate must lie in [0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
    throw ConfigError("Adam needs 0 <= beta < 1 and epsilon > 0");
  }
}

nlohmann::json to_json(const AttackResult &r, bool timing) {
  nlohmann::json j = {{"scheme", r.scheme},
                      {"mode", to_string(r.mode)},
                      {"guidance", to_string(r.guidance)},
                      {"literal_sources", r.literal_sources},
                      {"literal_is_permutation", r.literal_is_permutation},
                      {"repaired_permutation", r.repaired},
                      {"key_bits", r.key_bits.size()},
                      {"loss_initial", r.loss_initial},
                      {"loss_final", r.loss_final},
                      {"iterations", r.iterations},
                      {"evaluations", r.evaluations}};
  if (timing) {
    j["elapsed_s"] = r.elapsed_s;
  }
  std::string bits;
  for (auto b : r.key_bits) {
    bits.push_back(b ? '1' : '0');
  }
  j["recovered_bits"] = bits;
  auto put = [&](const char *name, const std::optional<double> &v) {
    j[name] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  put("fidelity", r.fidelity);
  put("fidelity_repaired", r.fidelity_repaired);
  put("jsd_after", r.jsd_after);
  put("perplexity_after", r.perplexity_after);
  return j;
}

std::vector<std::uint32_t> argmax_sources(std::span<const double> logits, std::size_t n,
                                          std::size_t m) {
  std::vector<std::uint32_t> src(n);
  for (std::size_t grp = 0; grp < n / m; ++grp) {
    const double *l = logits.data() + grp * m * m;
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < m; ++i) {
        if (l[i * m + j] > l[best * m + j]) {
          best = i;
        }
      }
      src[grp * m + j] = static_cast<std::uint32_t>(grp * m + best);
    }
  }
  return src;
}

std::vector<std::uint32_t> greedy_sources(std::span<const double> logits, std::size_t n,
                                          std::size_t m) {
  const auto g = column_softmax(logits, n, m);
  std::vector<std::uint32_t> src(n);
  for (std::size_t grp = 0; grp < n / m; ++grp) {
    const double *gg = g.data() + grp * m * m;
    std::vector<std::size_t> order(m * m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return gg[a] > gg[b]; });
    std::vector<bool> row_used(m, false), col_used(m, false);
    for (auto e : order) {
      const std::size_t i = e / m, j = e % m;
      if (!row_used[i] && !col_used[j]) {
        row_used[i] = col_used[j] = true;
        src[grp * m + j] = static_cast<std::uint32_t>(grp * m + i);
      }
    }
  }
  return src;
}

// ---------------------------------------------------------------------------
// LLA objective

struct RelaxedObjective::Impl {
  std::size_t n = 0, m = 0, d_ff = 0;
  Tail tail;
  std::vector<Sample> samples;
  double scale = 1.0;

  Impl(const LockedModel &locked, const AttackData &data, Guidance guidance)
      : n(locked.params.n), m(locked.params.m),
        d_ff(locked.model.blocks[locked.protected_block].ffn.d_ff()),
        tail(locked.model, locked.protected_block,
             locked.model.blocks[locked.protected_block].ffn.w_down, guidance),
        samples(prefix_samples(locked.model, locked.protected_block, data, guidance)) {
    const auto ffn = locked.locked_ffn();
    for (auto &s : samples) {
      DenseMatrix h(s.h_in.rows, s.h_in.cols);
      std::copy(s.h_in.v.begin(), s.h_in.v.end(), h.values().begin());
      s.a = MatD(locked_rotated_hidden(ffn, h));
    }
    scale = 1.0 / static_cast<double>(total_positions(tail, samples));
  }

  // V = U with the first n lanes mixed by the block-diagonal G.
  MatD mixed(const Sample &s, const std::vector<double> &g) const {
    MatD v = s.a;
    for (std::size_t t = 0; t < v.rows; ++t) {
      const double *u = s.a.row(t);
      double *out = v.row(t);
      for (std::size_t grp = 0; grp < n / m; ++grp) {
        const double *gg = g.data() + grp * m * m;
        for (std::size_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            acc += u[grp * m + i] * gg[i * m + j];
          }
          out[grp * m + j] = acc;
        }
      }
    }
    return v;
  }

  double evaluate(const std::vector<double> &g, std::vector<double> *dg) const {
    const auto count = static_cast<std::int64_t>(samples.size());
    std::vector<double> losses(samples.size());
    std::vector<std::vector<double>> grads(dg ? samples.size() : 0);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t k = 0; k < count; ++k) {
      const auto &s = samples[static_cast<std::size_t>(k)];
      const MatD v = mixed(s, g);
      if (!dg) {
        losses[static_cast<std::size_t>(k)] = tail.run(s, v, nullptr);
        continue;
      }
      MatD dv;
      losses[static_cast<std::size_t>(k)] = tail.run(s, v, &dv);
      // dG = U_g^T dV_g per group.
      auto &gk = grads[static_cast<std::size_t>(k)];
      gk.assign(g.size(), 0.0);
      for (std::size_t t = 0; t < v.rows; ++t) {
        const double *u = s.a.row(t);
        const double *d = dv.row(t);
        for (std::size_t grp = 0; grp < n / m; ++grp) {
          double *out = gk.data() + grp * m * m;
          for (std::size_t i = 0; i < m; ++i) {
            const double ui = u[grp * m + i];
            for (std::size_t j = 0; j < m; ++j) {
              out[i * m + j] += ui * d[grp * m + j];
            }
          }
        }
      }
    }
    double loss = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      loss += losses[k];
      if (dg) {
        for (std::size_t i = 0; i < dg->size(); ++i) {
          (*dg)[i] += grads[k][i];
        }
      }
    }
    return loss * scale;
  }
};

RelaxedObjective::RelaxedObjective(const LockedModel &locked, const AttackData &data,
                                   Guidance guidance)
    : impl_(std::make_unique<Impl>(locked, data, guidance)) {}
RelaxedObjective::~RelaxedObjective() = default;
RelaxedObjective::RelaxedObjective(RelaxedObjective &&) noexcept = default;

std::size_t RelaxedObjective::parameter_count() const { return impl_->n * impl_->m; }

double RelaxedObjective::loss(std::span<const double> logits) const {
  if (logits.size() != parameter_count()) {
    throw InputError("relaxed objective: wrong parameter count");
  }
  return impl_->evaluate(column_softmax(logits, impl_->n, impl_->m), nullptr);
}

double RelaxedObjective::loss_and_grad(std::span<const double> logits,
                                       std::span<double> grad) const {
  const std::size_t n = impl_->n, m = impl_->m;
  if (logits.size() != parameter_count() || grad.size() != parameter_count()) {
    throw InputError("relaxed objective: wrong parameter count");
  }
  const auto g = column_softmax(logits, n, m);
  std::vector<double> dg(g.size(), 0.0);
  const double loss = impl_->evaluate(g, &dg);
  // Column softmax: dL_ij = G_ij (dG_ij - sum_k G_kj dG_kj).
  for (std::size_t grp = 0; grp < n / m; ++grp) {
    const double *gg = g.data() + grp * m * m;
    const double *dd = dg.data() + grp * m * m;
    double *out = grad.data() + grp * m * m;
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        dot += gg[k * m + j] * dd[k * m + j];
      }
      for (std::size_t i = 0; i < m; ++i) {
        out[i * m + j] = gg[i * m + j] * (dd[i * m + j] - dot) * impl_->scale;
      }
    }
  }
  return loss;
}

double RelaxedObjective::permutation_loss(const Permutation &pi) const {
  const std::size_t n = impl_->n, m = impl_->m;
  if (pi.size() != n || !is_group_local(pi, m)) {
    throw InputError("permutation_loss: not a group-local permutation of the protected lanes");
  }
  std::vector<double> g(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t grp = i / m;
    g[grp * m * m + (i % m) * m + (pi[i] % m)] = 1.0;
  }
  return impl_->evaluate(g, nullptr);
}

// ---------------------------------------------------------------------------
// HPNN objective

struct HpnnObjective::Impl {
  std::vector<std::uint32_t> neurons;
  FfnKind kind = FfnKind::standard;
  Activation activation = Activation::relu;
  Tail tail;
  std::vector<Sample> samples;
  double scale = 1.0;

  Impl(const HpnnLockedModel &locked, const AttackData &data, Guidance guidance)
      : neurons(locked.neurons), kind(locked.model.blocks[locked.protected_block].ffn.kind),
        activation(locked.model.blocks[locked.protected_block].ffn.activation),
        tail(locked.model, locked.protected_block,
             locked.model.blocks[locked.protected_block].ffn.w_down, guidance),
        samples(prefix_samples(locked.model, locked.protected_block, data, guidance)) {
    const auto &ffn = locked.model.blocks[locked.protected_block].ffn;
    const MatD pre_w(kind == FfnKind::gated ? *ffn.w_gate : ffn.w_up);
    const MatD up_w(ffn.w_up);
    for (auto &s : samples) {
      s.a = mul(s.h_in, pre_w);
      if (kind == FfnKind::gated) {
        s.up = mul(s.h_in, up_w);
      }
    }
    scale = 1.0 / static_cast<double>(total_positions(tail, samples));
  }

  double evaluate(std::span<const double> theta, std::span<double> grad) const {
    const bool want_grad = !grad.empty();
    std::vector<double> mult(samples.empty() ? 0 : samples.front().a.cols, 1.0);
    for (std::size_t b = 0; b < neurons.size(); ++b) {
      mult[neurons[b]] = std::tanh(theta[b]);
    }
    const auto count = static_cast<std::int64_t>(samples.size());
    std::vector<double> losses(samples.size());
    std::vector<std::vector<double>> grads(want_grad ? samples.size() : 0);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t k = 0; k < count; ++k) {
      const auto &s = samples[static_cast<std::size_t>(k)];
      MatD v(s.a.rows, s.a.cols);
      for (std::size_t t = 0; t < v.rows; ++t) {
        for (std::size_t j = 0; j < v.cols; ++j) {
          const double pre = mult[j] * s.a(t, j);
          v(t, j) = act(activation, pre) * (kind == FfnKind::gated ? s.up(t, j) : 1.0);
        }
      }
      if (!want_grad) {
        losses[static_cast<std::size_t>(k)] = tail.run(s, v, nullptr);
        continue;
      }
      MatD dv;
      losses[static_cast<std::size_t>(k)] = tail.run(s, v, &dv);
      auto &gk = grads[static_cast<std::size_t>(k)];
      gk.assign(neurons.size(), 0.0);
      for (std::size_t b = 0; b < neurons.size(); ++b) {
        const std::size_t j = neurons[b];
        double acc = 0.0;
        for (std::size_t t = 0; t < v.rows; ++t) {
          const double a = s.a(t, j);
          const double up = kind == FfnKind::gated ? s.up(t, j) : 1.0;
          acc += dv(t, j) * up * act_grad(activation, mult[j] * a) * a;
        }
        gk[b] = acc;
      }
    }
    double loss = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      loss += losses[k];
      if (want_grad) {
        for (std::size_t b = 0; b < neurons.size(); ++b) {
          grad[b] += grads[k][b];
        }
      }
    }
    if (want_grad) {
      for (std::size_t b = 0; b < neurons.size(); ++b) {
        grad[b] *= scale * (1.0 - mult[neurons[b]] * mult[neurons[b]]);
      }
    }
    return loss * scale;
  }
};

HpnnObjective::HpnnObjective(const HpnnLockedModel &locked, const AttackData &data,
                             Guidance guidance)
    : impl_(std::make_unique<Impl>(locked, data, guidance)) {}
HpnnObjective::~HpnnObjective() = default;
HpnnObjective::HpnnObjective(HpnnObjective &&) noexcept = default;

std::size_t HpnnObjective::parameter_count() const { return impl_->neurons.size(); }

double HpnnObjective::loss(std::span<const double> theta) const {
  if (theta.size() != parameter_count()) {
    throw InputError("hpnn objective: wrong parameter count");
  }
  return impl_->evaluate(theta, {});
}

double HpnnObjective::loss_and_grad(std::span<const double> theta, std::span<double> grad) const {
  if (theta.size() != parameter_count() || grad.size() != parameter_count()) {
    throw InputError("hpnn objective: wrong parameter count");
  }
  std::fill(grad.begin(), grad.end(), 0.0);
  return impl_->evaluate(theta, grad);
}

// ---------------------------------------------------------------------------
// Attacks

AttackResult gradient_attack(const LockedModel &locked, const AttackData &data,
                             const AttackConfig &cfg) {
  cfg.validate();
  const Budget budget{cfg};
  const RelaxedObjective objective(locked, data, cfg.guidance);
  const std::size_t n = locked.params.n, m = locked.params.m;

  std::vector<double> l(n * m, 0.0);
  SplitMix64 rng(derive_seed(cfg.seed, 11));
  for (std::size_t grp = 0; grp < n / m; ++grp) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        auto &x = l[grp * m * m + i * m + j];
        if (cfg.init == GradientInit::diagonal) {
          x = i == j ? cfg.diagonal_init : 0.0;
        } else {
          x = cfg.init_scale * rng.normal();
        }
      }
    }
  }

  AttackResult r;
  r.scheme = "lla";
  r.mode = AttackMode::gradient;
  r.guidance = cfg.guidance;
  std::vector<double> grad(l.size());
  Adam adam(cfg, l.size());
  constexpr std::size_t kStepCost = 3;
  r.loss_initial = objective.loss(l);
  r.loss_final = r.loss_initial;
  r.evaluations = 1;
  while (budget.allows(r.iterations, r.evaluations, kStepCost)) {
    const double loss = objective.loss_and_grad(l, grad);
    if (!std::isfinite(loss)) {
      non_finite("gradient attack", r.iterations, loss, l);
    }
    adam.step(l, grad);
    ++r.iterations;
    r.evaluations += kStepCost;
    r.loss_final = loss;
  }
  if (r.iterations > 0) {
    r.loss_final = objective.loss(l);
    if (!std::isfinite(r.loss_final)) {
      non_finite("gradient attack", r.iterations, r.loss_final, l);
    }
  }

  r.literal_sources = argmax_sources(l, n, m);
  r.literal_is_permutation = is_perm(r.literal_sources);
  r.repaired = sources_to_permutation(greedy_sources(l, n, m));
  r.key_bits = key_material(r.repaired, m).bits;
  r.elapsed_s = seconds_since(budget.start);
  return r;
}

AttackResult genetic_attack(const LockedModel &locked, const AttackData &data,
                            const AttackConfig &cfg) {
  cfg.validate();
  const Budget budget{cfg};
  const RelaxedObjective objective(locked, data, cfg.guidance);
  const std::size_t n = locked.params.n, m = locked.params.m, groups = n / m;
  const std::size_t pop_size = cfg.population;

  std::vector<Permutation> pop(pop_size);
  pop[0] = identity_permutation(n);
  for (std::size_t k = 1; k < pop_size; ++k) {
    pop[k] = random_group_local_permutation(n, m, derive_seed(cfg.seed, 1 + k));
  }
  std::vector<double> fit(pop_size);
  auto evaluate = [&](std::size_t from) {
    const auto count = static_cast<std::int64_t>(pop_size);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t k = static_cast<std::int64_t>(from); k < count; ++k) {
      fit[static_cast<std::size_t>(k)] = objective.permutation_loss(pop[static_cast<std::size_t>(k)]);
    }
  };
  evaluate(0);

  AttackResult r;
  r.scheme = "lla";
  r.mode = AttackMode::genetic;
  r.guidance = cfg.guidance;
  r.evaluations = pop_size;

  auto ranking = [&] {
    std::vector<std::size_t> order(pop_size);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return fit[a] < fit[b]; });
    return order;
  };
  auto order = ranking();
  r.loss_initial = fit[order[0]];

  const std::size_t children = pop_size - cfg.elite;
  while (budget.allows(r.iterations, r.evaluations, children)) {
    std::vector<Permutation> next(pop_size);
    std::vector<double> next_fit(pop_size);
    for (std::size_t e = 0; e < cfg.elite; ++e) {
      next[e] = pop[order[e]];
      next_fit[e] = fit[order[e]];
    }
    const auto count = static_cast<std::int64_t>(pop_size);
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t kk = static_cast<std::int64_t>(cfg.elite); kk < count; ++kk) {
      const auto k = static_cast<std::size_t>(kk);
      SplitMix64 child_rng(derive_seed(cfg.seed, 1'000'000 + r.iterations * pop_size + k));
      auto pick = [&] {
        std::size_t best = child_rng.below(pop_size);
        for (std::size_t t = 1; t < cfg.tournament; ++t) {
          const std::size_t c = child_rng.below(pop_size);
          if (fit[c] < fit[best] || (fit[c] == fit[best] && c < best)) {
            best = c;
          }
        }
        return best;
      };
      const auto &pa = pop[pick()];
      const auto &pb = pop[pick()];
      Permutation child(n);
      for (std::size_t g = 0; g < groups; ++g) {
        const auto &src = (child_rng.next() >> 63) ? pb : pa;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(g * m), m,
                    child.begin() + static_cast<std::ptrdiff_t>(g * m));
      }
      if (child_rng.uniform() < cfg.mutation_rate) {
        const std::size_t g = child_rng.below(groups);
        const std::size_t a = child_rng.below(m);
        std::size_t b = child_rng.below(m - 1);
        b += b >= a ? 1 : 0;
        std::swap(child[g * m + a], child[g * m + b]);
      }
      next[k] = std::move(child);
    }
    pop = std::move(next);
    fit = std::move(next_fit);
    evaluate(cfg.elite);
    r.evaluations += children;
    ++r.iterations;
    order = ranking();
  }

  const auto &best = pop[order[0]];
  r.loss_final = fit[order[0]];
  r.repaired = best;
  r.literal_sources = inverse(best);
  r.literal_is_permutation = true;
  r.key_bits = key_material(best, m).bits;
  r.elapsed_s = seconds_since(budget.start);
  return r;
}

AttackResult run_attack(const LockedModel &locked, const AttackData &data,
                        const AttackConfig &cfg) {
  return cfg.mode == AttackMode::genetic ? genetic_attack(locked, data, cfg)
                                         : gradient_attack(locked, data, cfg);
}

AttackResult hpnn_gradient_attack(const HpnnLockedModel &locked, const AttackData &data,
                                  const AttackConfig &cfg) {
  cfg.validate();
  const Budget budget{cfg};
  const HpnnObjective objective(locked, data, cfg.guidance);
  std::vector<double> theta(objective.parameter_count());
  SplitMix64 rng(derive_seed(cfg.seed, 11));
  for (auto &t : theta) {
    t = cfg.init == GradientInit::diagonal ? cfg.diagonal_init : cfg.init_scale * rng.normal();
  }
  AttackResult r;
  r.scheme = "hpnn";
  r.mode = AttackMode::gradient;
  r.guidance = cfg.guidance;
  std::vector<double> grad(theta.size());
  Adam adam(cfg, theta.size());
  constexpr std::size_t kStepCost = 3;
  r.loss_initial = objective.loss(theta);
  r.loss_final = r.loss_initial;
  r.evaluations = 1;
  while (budget.allows(r.iterations, r.evaluations, kStepCost)) {
    const double loss = objective.loss_and_grad(theta, grad);
    if (!std::isfinite(loss)) {
      non_finite("hpnn gradient attack", r.iterations, loss, theta);
    }
    adam.step(theta, grad);
    ++r.iterations;
    r.evaluations += kStepCost;
  }
  if (r.iterations > 0) {
    r.loss_final = objective.loss(theta);
  }
  // Negative scalars mean "negate": those bits are set.
  r.key_bits.resize(theta.size());
  for (std::size_t b = 0; b < theta.size(); ++b) {
    r.key_bits[b] = theta[b] < 0.0 ? 1 : 0;
  }
  r.elapsed_s = seconds_since(budget.start);
  return r;
}

void evaluate_attack(AttackResult &r, const LockedModel &locked, const AttackEval &eval) {
  if (!eval.truth.empty()) {
    const auto truth_src = inverse(eval.truth);
    r.fidelity = fidelity(r.literal_sources, truth_src);
    r.fidelity_repaired = fidelity(inverse(r.repaired), truth_src);
  }
  const auto fn = locked_logits_fn(locked, r.key_bits);
  if (eval.original && !eval.probes.empty()) {
    double s = 0.0;
    for (const auto &seq : eval.probes) {
      s += mean_jsd(model_forward(*eval.original, seq, false).logits, fn(seq));
    }
    r.jsd_after = s / static_cast<double>(eval.probes.size());
  }
  if (!eval.corpus.empty()) {
    r.perplexity_after = perplexity(fn, eval.corpus);
  }
}

void evaluate_attack(AttackResult &r, const HpnnLockedModel &locked, const AttackEval &eval) {
  if (!eval.truth_bits.empty()) {
    r.fidelity = bit_fidelity(r.key_bits, eval.truth_bits);
  }
  const auto fn = hpnn_logits_fn(locked, r.key_bits);
  if (eval.original && !eval.probes.empty()) {
    double s = 0.0;
    for (const auto &seq : eval.probes) {
      s += mean_jsd(model_forward(*eval.original, seq, false).logits, fn(seq));
    }
    r.jsd_after = s / static_cast<double>(eval.probes.size());
  }
  if (!eval.corpus.empty()) {
    r.perplexity_after = perplexity(fn, eval.corpus);
  }
}

} // namespace lla
