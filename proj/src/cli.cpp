#include "lla/cli.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lla/attack.hpp"
#include "lla/errors.hpp"
#include "lla/fabric.hpp"
#include "lla/hwsim.hpp"
#include "lla/locker.hpp"
#include "lla/model.hpp"
#include "lla/outlier.hpp"
#include "lla/tensor_io.hpp"

namespace lla::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// JSON config files. Top-level scalars and arrays fill options of the
// selected subcommand; an object named after a subcommand fills that one.
class JsonConfig : public CLI::Config {
public:
  explicit JsonConfig(const CLI::App *app) : app_(app) {}

  std::string to_config(const CLI::App *, bool, bool, std::string) const override { return {}; }

  std::vector<CLI::ConfigItem> from_config(std::istream &input) const override {
    json j;
    try {
      j = json::parse(input);
    } catch (const json::exception &e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) {
      throw CLI::ConversionError("config file must hold a JSON object");
    }
    std::string active;
    for (const auto *sub : app_->get_subcommands()) {
      active = sub->get_name();
    }
    std::vector<CLI::ConfigItem> items;
    for (const auto &[key, value] : j.items()) {
      if (value.is_object()) {
        if (key != active) {
          continue;
        }
        for (const auto &[k2, v2] : value.items()) {
          items.push_back(item({key}, k2, v2));
        }
      } else {
        items.push_back(item({active}, key, value));
      }
    }
    return items;
  }

private:
  static std::string scalar(const json &v) {
    if (v.is_string()) {
      return v.get<std::string>();
    }
    if (v.is_boolean()) {
      return v.get<bool>() ? "true" : "false";
    }
    return v.dump();
  }

  static CLI::ConfigItem item(std::vector<std::string> parents, const std::string &name,
                              const json &value) {
    CLI::ConfigItem it;
    it.parents = std::move(parents);
    it.name = name;
    if (value.is_array()) {
      for (const auto &v : value) {
        it.inputs.push_back(scalar(v));
      }
    } else {
      it.inputs.push_back(scalar(value));
    }
    return it;
  }

  const CLI::App *app_;
};

fs::path strip_slash(const fs::path &p) {
  auto q = p.lexically_normal();
  if (!q.has_filename() && q.has_parent_path()) {
    q = q.parent_path();
  }
  return q;
}

fs::path sibling(const fs::path &p, const std::string &suffix) {
  const auto q = strip_slash(p);
  return q.parent_path() / (q.filename().string() + suffix);
}

bool inside(const fs::path &child, const fs::path &dir) {
  const auto c = fs::weakly_canonical(child);
  const auto d = fs::weakly_canonical(strip_slash(dir));
  auto ci = c.begin();
  for (auto di = d.begin(); di != d.end(); ++di, ++ci) {
    if (ci == c.end() || *ci != *di) {
      return false;
    }
  }
  return true;
}

std::string dump(const json &j) { return j.dump(2) + "\n"; }

// Snapshot of every option of a subcommand after flags and config merged.
json option_snapshot(const CLI::App &sub) {
  json snap = json::object();
  for (const auto *opt : sub.get_options()) {
    if (opt->get_lnames().empty()) {
      continue;
    }
    const auto &name = opt->get_lnames().front();
    if (name == "help" || name == "config") {
      continue;
    }
    if (opt->count() > 0) {
      const auto &res = opt->results();
      snap[name] = res.size() == 1 ? json(res.front()) : json(res);
    } else if (!opt->get_default_str().empty()) {
      snap[name] = opt->get_default_str();
    }
  }
  return snap;
}

struct Manifest {
  std::string command;
  json config;
  json inputs = json::object();
  json outputs = json::object();
  json seeds = json::object();
  json stats = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  json to_json() const {
    return {{"command", command},
            {"tool_version", kToolVersion},
            {"config", config},
            {"seeds", seeds},
            {"inputs", inputs},
            {"outputs", outputs},
            {"stats", stats},
            {"wall_clock_s",
             std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}};
  }
};

void emit_manifest(const Manifest &m, const std::string &path, const fs::path &fallback) {
  const auto text = dump(m.to_json());
  if (!path.empty()) {
    write_text_file(path, text);
  } else if (!fallback.empty()) {
    write_text_file(fallback, text);
  } else {
    std::cerr << "manifest: " << m.to_json().dump() << "\n";
  }
}

// A model to run: plain, or locked plus its key.
struct Runner {
  std::optional<ToyModel> plain;
  std::optional<LockedModel> locked;
  KeyBits key;

  const ToyModel &model() const { return locked ? locked->model : *plain; }
  DenseMatrix logits(std::span<const Token> tokens) const {
    if (locked) {
      return locked_forward(*locked, key, tokens).logits;
    }
    return model_forward(*plain, tokens, false).logits;
  }
  LogitsFn fn() const {
    return [this](std::span<const Token> t) { return logits(t); };
  }
};

KeyFile load_matching_key(const std::string &path, const LockParams &params) {
  const auto key = load_key(path);
  if (key.n != params.n || key.m != params.m) {
    throw InputError("key file " + path + " is for n = " + std::to_string(key.n) + ", m = " +
                     std::to_string(key.m) + "; the model needs n = " + std::to_string(params.n) +
                     ", m = " + std::to_string(params.m));
  }
  return key;
}

std::unique_ptr<Runner> load_runner(const std::string &dir, const std::string &key_path) {
  auto r = std::make_unique<Runner>();
  if (is_locked_model_dir(dir)) {
    r->locked = load_locked_model(dir);
    if (key_path.empty()) {
      throw ConfigError(dir + " is locked; pass --key");
    }
    r->key = load_matching_key(key_path, r->locked->params).bits;
  } else {
    r->plain = load_model_dir(dir);
  }
  return r;
}

double sequence_jsd(const Runner &a, const Runner &b, const std::vector<TokenSeq> &seqs) {
  double s = 0.0;
  for (const auto &seq : seqs) {
    s += mean_jsd(a.logits(seq), b.logits(seq));
  }
  return s / static_cast<double>(seqs.size());
}

std::vector<TokenSeq> scored_sequences(const std::vector<TokenSeq> &seqs) {
  std::vector<TokenSeq> out;
  for (const auto &s : seqs) {
    if (s.size() >= 2) {
      out.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SynthOpts {
  std::string out;
  std::uint64_t seed = 0;
  SynthConfig cfg;
  std::string kind = "standard";
  std::string activation = "relu";
};

void run_synth(const SynthOpts &o, Manifest &man) {
  auto cfg = o.cfg;
  cfg.kind = parse_ffn_kind(o.kind);
  cfg.activation = parse_activation(o.activation);
  const auto model = synth_model(cfg, Seed{o.seed});
  save_model_dir(model, o.out);
  man.seeds["seed"] = o.seed;
  man.outputs["model"] = o.out;
  std::cout << dump({{"model", o.out},
                     {"vocab", model.vocab},
                     {"d_model", model.d_model},
                     {"d_ff", cfg.d_ff},
                     {"blocks", model.blocks.size()},
                     {"outlier_dims", cfg.outlier_dims},
                     {"outlier_block", cfg.outlier_block}});
}

struct LockOpts {
  std::string model, out, key;
  std::uint64_t seed = 0;
  double tau = kDefaultTau;
  std::size_t n = 64, m = 16;
  std::optional<std::size_t> block;
  bool no_rotate = false;
  std::size_t probe_count = 8, probe_len = 64;
};

void run_lock(const LockOpts &o, Manifest &man) {
  const auto model = load_model_dir(o.model);
  const fs::path key_path = o.key.empty() ? sibling(o.out, ".llak") : fs::path(o.key);
  if (inside(key_path, o.out)) {
    throw ConfigError("the key file must not be written inside the locked model directory");
  }
  LockConfig cfg;
  cfg.n = o.n;
  cfg.m = o.m;
  cfg.tau = o.tau;
  cfg.seed = Seed{o.seed};
  cfg.rotate = !o.no_rotate;
  cfg.probe_count = o.probe_count;
  cfg.probe_length = o.probe_len;

  LockOutcome outcome;
  if (!o.block) {
    outcome = lock_with_selection(model, cfg);
  } else {
    // Forced block: outlier-weighted scores when the block has outliers,
    // otherwise every feature counts.
    if (*o.block >= model.blocks.size()) {
      throw ConfigError("--block out of range");
    }
    const auto probes =
        random_probes(model.vocab, cfg.probe_count, cfg.probe_length, derive_seed(cfg.seed, 3));
    const auto stats = collect_probe_stats(model, probes);
    auto report = outliers_from_means(stats.feature_means[*o.block], cfg.tau, *o.block);
    const auto &ffn = model.blocks[*o.block].ffn;
    NeuronScores scores;
    if (report.outlier_set.empty()) {
      std::cerr << "warning: block " << *o.block << " shows no feature outliers at tau = "
                << cfg.tau << "; wrong keys may barely degrade this model\n";
      std::vector<std::uint32_t> all(model.d_model);
      for (std::uint32_t i = 0; i < all.size(); ++i) {
        all[i] = i;
      }
      scores = score_neurons(ffn, all, stats.neuron_means[*o.block], cfg.n);
    } else {
      scores = score_neurons(ffn, report.outlier_set, stats.neuron_means[*o.block], cfg.n);
    }
    scores.block_index = *o.block;
    outcome.selection = {std::move(report), std::move(scores)};
    outcome.spec.protected_block = *o.block;
    outcome.spec.protected_neurons = outcome.selection.neurons.selected;
    outcome.spec.group_size = cfg.m;
    outcome.spec.hadamard_seed = derive_seed(cfg.seed, 1);
    outcome.spec.key_perm = random_group_local_permutation(cfg.n, cfg.m, derive_seed(cfg.seed, 2));
    outcome.spec.tau = cfg.tau;
    outcome.spec.rotate = cfg.rotate;
    outcome.key = key_material(outcome.spec.key_perm, cfg.m);
    outcome.locked = lock_model(model, outcome.spec);
  }
  save_locked_model(outcome.locked, o.out);
  save_key(key_path, outcome.key.bits, outcome.key.n, outcome.key.m);
  man.seeds["seed"] = o.seed;
  man.inputs["model"] = o.model;
  man.outputs["locked_model"] = o.out;
  man.outputs["key"] = key_path.string();
  std::cout << dump({{"locked_model", o.out},
                     {"key", key_path.string()},
                     {"protected_block", outcome.spec.protected_block},
                     {"outlier_set", outcome.selection.outliers.outlier_set},
                     {"n", outcome.key.n},
                     {"m", outcome.key.m},
                     {"key_bits", outcome.key.bit_count()},
                     {"bits_per_neuron", outcome.key.bits_per_neuron()},
                     {"rotate", cfg.rotate}});
}

struct RunOpts {
  std::string model, key, tokens, original, logits_out;
};

void run_run(const RunOpts &o, Manifest &man) {
  const auto runner = load_runner(o.model, o.key);
  const auto seqs = read_token_file(o.tokens);
  if (seqs.empty()) {
    throw InputError(o.tokens + " holds no token sequences");
  }
  json out = {{"model", o.model}, {"sequences", seqs.size()}};
  const auto scored = scored_sequences(seqs);
  if (!scored.empty()) {
    out["perplexity"] = perplexity(runner->fn(), scored);
  }
  if (!o.original.empty()) {
    const auto original = load_runner(o.original, "");
    out["jsd_vs_original"] = sequence_jsd(*runner, *original, seqs);
    man.inputs["original"] = o.original;
  }
  if (!o.logits_out.empty()) {
    std::vector<float> all;
    std::size_t rows = 0, cols = 0;
    for (const auto &s : seqs) {
      const auto l = runner->logits(s);
      all.insert(all.end(), l.values().begin(), l.values().end());
      rows += l.rows();
      cols = l.cols();
    }
    save_tensor(DenseMatrix(rows, cols, std::move(all)), o.logits_out);
    man.outputs["logits"] = o.logits_out;
  }
  man.inputs["model"] = o.model;
  man.inputs["key"] = o.key;
  man.inputs["tokens"] = o.tokens;
  std::cout << dump(out);
}

struct AttackOpts {
  std::string locked, key_truth, oracle, corpus, probes, out;
  std::string mode = "gradient", guidance = "OG", init = "noise";
  std::uint64_t seed = 0;
  std::size_t probe_count = 4, probe_len = 32;
  std::optional<std::size_t> iterations, evaluations;
  AttackConfig cfg;
};

void run_attack_cmd(const AttackOpts &o, Manifest &man) {
  auto cfg = o.cfg;
  cfg.mode = parse_attack_mode(o.mode);
  cfg.guidance = parse_guidance(o.guidance);
  cfg.init = parse_gradient_init(o.init);
  cfg.seed = Seed{o.seed};
  if (o.iterations || o.evaluations) {
    cfg.max_iterations = o.iterations;
    cfg.max_evaluations = o.evaluations;
  }
  cfg.validate();
  const auto locked = load_locked_model(o.locked);
  std::optional<ToyModel> original;
  std::unique_ptr<ModelOracle> oracle;
  if (!o.oracle.empty()) {
    original = load_model_dir(o.oracle);
    oracle = std::make_unique<ModelOracle>(*original);
  }
  AttackData data;
  data.oracle = oracle.get();
  data.probes = o.probes.empty()
                    ? random_probes(locked.model.vocab, o.probe_count, o.probe_len,
                                    derive_seed(cfg.seed, 5))
                    : read_token_file(o.probes);
  if (!o.corpus.empty()) {
    data.corpus = scored_sequences(read_token_file(o.corpus));
  }
  if (cfg.guidance == Guidance::og && !oracle) {
    throw ConfigError("OG attack needs --oracle (the original model directory)");
  }
  if (cfg.guidance == Guidance::ol && data.corpus.empty()) {
    throw ConfigError("OL attack needs --corpus");
  }
  auto result = run_attack(locked, data, cfg);

  AttackEval eval;
  eval.original = original ? &*original : nullptr;
  eval.probes = data.probes;
  eval.corpus = data.corpus;
  if (!o.key_truth.empty()) {
    const auto truth = load_matching_key(o.key_truth, locked.params);
    eval.truth = decode_key(truth.bits, truth.n, truth.m);
  }
  evaluate_attack(result, locked, eval);

  man.seeds["seed"] = o.seed;
  man.inputs["locked_model"] = o.locked;
  man.inputs["oracle"] = o.oracle;
  man.inputs["corpus"] = o.corpus;
  man.inputs["probes"] = o.probes;
  man.stats["attack_elapsed_s"] = result.elapsed_s;
  const auto text = dump(to_json(result, false));
  if (o.out.empty()) {
    std::cout << text;
  } else {
    write_text_file(o.out, text);
    man.outputs["result"] = o.out;
  }
}

struct SimOpts {
  std::string locked, key, tokens, trace_out, summary_out;
  std::size_t seq_len = 4;
  std::uint64_t seed = 0;
  std::size_t rows = 16, cols = 16, rounds = 0;
  std::string dataflow = "weight_stationary";
  bool record_macs = false;
};

void run_simulate(const SimOpts &o, Manifest &man) {
  const auto dataflow = parse_dataflow(o.dataflow);
  const auto locked = load_locked_model(o.locked);
  const auto key = load_matching_key(o.key, locked.params);
  TokenSeq seq;
  if (!o.tokens.empty()) {
    const auto seqs = read_token_file(o.tokens);
    if (seqs.empty()) {
      throw InputError(o.tokens + " holds no token sequences");
    }
    seq = seqs.front();
  } else {
    seq = random_probes(locked.model.vocab, 1, o.seq_len, derive_seed(Seed{o.seed}, 7)).front();
  }
  auto h = embed_tokens(locked.model, seq);
  for (std::size_t b = 0; b < locked.protected_block; ++b) {
    apply_mix(locked.model.blocks[b], h);
    add_in_place(h, ffn_forward(locked.model.blocks[b].ffn, h));
  }
  apply_mix(locked.model.blocks[locked.protected_block], h);

  SystolicConfig cfg;
  cfg.rows = o.rows;
  cfg.cols = o.cols;
  cfg.dataflow = dataflow;
  cfg.group_size = locked.params.m;
  cfg.reduction_rounds = o.rounds;
  cfg.record_macs = o.record_macs;
  const auto ffn = locked.locked_ffn();
  const auto sim = locked_layer_sim(ffn, key.bits, h, cfg);
  const auto software = run_locked_ffn(ffn, key.bits, h);

  auto summary = summary_json(sim);
  summary["tokens"] = seq.size();
  summary["dataflow"] = to_string(cfg.dataflow);
  summary["array"] = {cfg.rows, cfg.cols};
  summary["max_rel_error_vs_software"] = max_relative_error(sim.y, software);
  if (!o.trace_out.empty()) {
    std::string text;
    for (const auto &ph : sim.phases) {
      text += "# phase " + ph.name + " start " + std::to_string(ph.start_cycle) + "\n";
      text += trace_text(ph.trace);
    }
    write_text_file(o.trace_out, text);
    man.outputs["trace"] = o.trace_out;
  }
  man.seeds["seed"] = o.seed;
  man.inputs["locked_model"] = o.locked;
  man.inputs["key"] = o.key;
  if (o.summary_out.empty()) {
    std::cout << dump(summary);
  } else {
    write_text_file(o.summary_out, dump(summary));
    man.outputs["summary"] = o.summary_out;
  }
}

struct FlopsOpts {
  std::size_t dm = 4096, dff = 16384, n = 2048, m = 16;
  std::string kind = "standard", path = "fwht";
};

void run_flops(const FlopsOpts &o, Manifest &) {
  const auto r =
      flop_overhead_report(o.dm, o.dff, parse_ffn_kind(o.kind), o.n, o.m, parse_rotation_path(o.path));
  json out = {{"d_model", o.dm},
              {"d_ff", o.dff},
              {"kind", o.kind},
              {"n", o.n},
              {"m", o.m},
              {"path", o.path},
              {"base_flops", r.base_flops},
              {"rotation_flops", r.rotation_flops},
              {"fabric_flops", r.fabric_flops},
              {"key_bits", r.key_bits},
              {"ratio", r.ratio},
              {"ratio_percent", r.ratio * 100.0}};
  if (!r.warning.empty()) {
    out["warning"] = r.warning;
    std::cerr << "warning: " << r.warning << "\n";
  }
  std::cout << dump(out);
}

struct EvalOpts {
  std::string a, key_a, b, key_b, tokens, candidate_key, truth_key;
};

void run_eval(const EvalOpts &o, Manifest &man) {
  json out = json::object();
  if (!o.a.empty() || !o.b.empty()) {
    if (o.a.empty() || o.b.empty() || o.tokens.empty()) {
      throw ConfigError("comparing models needs --a, --b and --tokens");
    }
    const auto ra = load_runner(o.a, o.key_a);
    const auto rb = load_runner(o.b, o.key_b);
    const auto seqs = read_token_file(o.tokens);
    if (seqs.empty()) {
      throw InputError(o.tokens + " holds no token sequences");
    }
    out["jsd"] = sequence_jsd(*ra, *rb, seqs);
    const auto scored = scored_sequences(seqs);
    if (!scored.empty()) {
      out["perplexity_a"] = perplexity(ra->fn(), scored);
      out["perplexity_b"] = perplexity(rb->fn(), scored);
    }
    man.inputs["a"] = o.a;
    man.inputs["b"] = o.b;
    man.inputs["tokens"] = o.tokens;
  }
  if (!o.candidate_key.empty() || !o.truth_key.empty()) {
    if (o.candidate_key.empty() || o.truth_key.empty()) {
      throw ConfigError("key fidelity needs --candidate-key and --truth-key");
    }
    const auto c = load_key(o.candidate_key);
    const auto t = load_key(o.truth_key);
    if (c.n != t.n || c.m != t.m) {
      throw InputError("candidate and truth keys differ in (n, m)");
    }
    out["fidelity"] = fidelity(decode_key(c.bits, c.n, c.m), decode_key(t.bits, t.n, t.m));
    out["bit_agreement"] = bit_fidelity(c.bits, t.bits);
  }
  if (out.empty()) {
    throw ConfigError("eval: nothing to compare; pass --a/--b/--tokens or key files");
  }
  std::cout << dump(out);
}

} // namespace

int dispatch(const std::vector<std::string> &args) {
  CLI::App app{"Locking toy transformer FFNs with key-controlled permutation fabrics", "lla"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "JSON config file; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  std::string manifest_path;
  app.add_option("--manifest", manifest_path, "Where to write the run manifest");

  SynthOpts synth;
  auto *s = app.add_subcommand("synth", "Build a random toy model with planted feature outliers");
  s->add_option("-o,--out", synth.out, "Output model directory")->required();
  s->add_option("--seed", synth.seed)->capture_default_str();
  s->add_option("--vocab", synth.cfg.vocab)->capture_default_str();
  s->add_option("--d-model", synth.cfg.d_model)->capture_default_str();
  s->add_option("--d-ff", synth.cfg.d_ff)->capture_default_str();
  s->add_option("--blocks", synth.cfg.n_blocks)->capture_default_str();
  s->add_option("--outlier-dims", synth.cfg.outlier_dims)->capture_default_str();
  s->add_option("--outlier-block", synth.cfg.outlier_block)->capture_default_str();
  s->add_option("--gain", synth.cfg.outlier_gain)->capture_default_str();
  s->add_option("--hot-neurons", synth.cfg.hot_neurons)->capture_default_str();
  s->add_option("--hot-boost", synth.cfg.hot_boost)->capture_default_str();
  s->add_option("--logit-scale", synth.cfg.logit_scale)->capture_default_str();
  s->add_option("--tau", synth.cfg.tau, "Threshold the planting is verified at")
      ->capture_default_str();
  s->add_option("--kind", synth.kind, "standard or gated")->capture_default_str();
  s->add_option("--activation", synth.activation, "relu or silu")->capture_default_str();

  LockOpts lock;
  auto *l = app.add_subcommand("lock", "Select protected neurons, fold the key transforms, write model and key");
  l->add_option("model,--model", lock.model, "Model directory")->required();
  l->add_option("-o,--out", lock.out, "Locked model directory")->required();
  l->add_option("--key", lock.key, "Key file (default: <out>.llak next to the model)");
  l->add_option("--seed", lock.seed)->capture_default_str();
  l->add_option("--tau", lock.tau)->capture_default_str();
  l->add_option("--n", lock.n, "Protected neurons")->capture_default_str();
  l->add_option("--m", lock.m, "Fabric group size")->capture_default_str();
  l->add_option("--block", lock.block, "Force the protected block");
  l->add_flag("--no-rotate", lock.no_rotate, "Skip the Hadamard rotation (ablation)");
  l->add_option("--probe-count", lock.probe_count)->capture_default_str();
  l->add_option("--probe-len", lock.probe_len)->capture_default_str();

  RunOpts run;
  auto *r = app.add_subcommand("run", "Run a (locked) model on token sequences");
  r->add_option("model,--model", run.model, "Model directory")->required();
  r->add_option("--key", run.key, "Key file for locked models");
  r->add_option("--tokens", run.tokens, "Token file, one sequence per line")->required();
  r->add_option("--original", run.original, "Original model for JSD");
  r->add_option("--logits-out", run.logits_out, "LLAT file for the stacked logits");

  AttackOpts atk;
  auto *a = app.add_subcommand("attack", "Key-recovery attack on a locked model");
  a->add_option("locked,--locked", atk.locked, "Locked model directory")->required();
  a->add_option("--mode", atk.mode, "genetic or gradient")->capture_default_str();
  a->add_option("--guidance", atk.guidance, "OG or OL")->capture_default_str();
  a->add_option("--oracle", atk.oracle, "Original model answering OG queries");
  a->add_option("--corpus", atk.corpus, "Token file for OL cross-entropy and perplexity");
  a->add_option("--probes", atk.probes, "Token file of OG probes (default: random)");
  a->add_option("--probe-count", atk.probe_count)->capture_default_str();
  a->add_option("--probe-len", atk.probe_len)->capture_default_str();
  a->add_option("--truth-key", atk.key_truth, "True key, used only to score fidelity");
  a->add_option("--seed", atk.seed)->capture_default_str();
  a->add_option("--iterations", atk.iterations, "Adam steps or generations (default 200)");
  a->add_option("--evaluations", atk.evaluations, "Forward-pass budget");
  a->add_option("--time-limit", atk.cfg.time_limit_s, "Seconds")->capture_default_str();
  a->add_option("--population", atk.cfg.population)->capture_default_str();
  a->add_option("--tournament", atk.cfg.tournament)->capture_default_str();
  a->add_option("--elite", atk.cfg.elite)->capture_default_str();
  a->add_option("--mutation-rate", atk.cfg.mutation_rate)->capture_default_str();
  a->add_option("--lr", atk.cfg.learning_rate)->capture_default_str();
  a->add_option("--init", atk.init, "noise or diagonal")->capture_default_str();
  a->add_option("--init-scale", atk.cfg.init_scale)->capture_default_str();
  a->add_option("-o,--out", atk.out, "Result JSON (default: stdout)");

  SimOpts sim;
  auto *m = app.add_subcommand("simulate", "Run the protected layer on the systolic-array model");
  m->add_option("locked,--locked", sim.locked, "Locked model directory")->required();
  m->add_option("--key", sim.key, "Key file")->required();
  m->add_option("--tokens", sim.tokens, "Token file; the first sequence is simulated");
  m->add_option("--seq-len", sim.seq_len, "Random sequence length without --tokens")
      ->capture_default_str();
  m->add_option("--seed", sim.seed)->capture_default_str();
  m->add_option("--rows", sim.rows)->capture_default_str();
  m->add_option("--cols", sim.cols)->capture_default_str();
  m->add_option("--dataflow", sim.dataflow, "weight_stationary or output_stationary")
      ->capture_default_str();
  m->add_option("--rounds", sim.rounds, "Reduction rounds, 0 = fewest that fit")
      ->capture_default_str();
  m->add_flag("--record-macs", sim.record_macs, "Include every MAC in the trace");
  m->add_option("--trace-out", sim.trace_out, "Event trace text file");
  m->add_option("--summary-out", sim.summary_out, "Summary JSON (default: stdout)");

  FlopsOpts flops;
  auto *f = app.add_subcommand("flops", "Per-token FLOP overhead of a locked FFN");
  f->add_option("--dm", flops.dm)->capture_default_str();
  f->add_option("--dff", flops.dff)->capture_default_str();
  f->add_option("--n", flops.n)->capture_default_str();
  f->add_option("--m", flops.m)->capture_default_str();
  f->add_option("--kind", flops.kind)->capture_default_str();
  f->add_option("--path", flops.path, "fwht or dense")->capture_default_str();

  EvalOpts ev;
  auto *e = app.add_subcommand("eval", "JSD, perplexity and key fidelity between two runs");
  e->add_option("--a", ev.a, "First model directory");
  e->add_option("--key-a", ev.key_a);
  e->add_option("--b", ev.b, "Second model directory");
  e->add_option("--key-b", ev.key_b);
  e->add_option("--tokens", ev.tokens);
  e->add_option("--candidate-key", ev.candidate_key);
  e->add_option("--truth-key", ev.truth_key);

  for (auto *sub : app.get_subcommands({})) {
    sub->allow_config_extras(CLI::config_extras_mode::error);
  }

  std::vector<const char *> argv;
  for (const auto &arg : args) {
    argv.push_back(arg.c_str());
  }
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError &err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  CLI::App *cmd = app.get_subcommands().front();
  Manifest man;
  man.command = cmd->get_name();
  man.config = option_snapshot(*cmd);
  try {
    fs::path fallback;
    if (cmd == s) {
      run_synth(synth, man);
      fallback = sibling(synth.out, ".run.json");
    } else if (cmd == l) {
      run_lock(lock, man);
      fallback = sibling(lock.out, ".run.json");
    } else if (cmd == r) {
      run_run(run, man);
    } else if (cmd == a) {
      run_attack_cmd(atk, man);
      if (!atk.out.empty()) {
        fallback = sibling(atk.out, ".run.json");
      }
    } else if (cmd == m) {
      run_simulate(sim, man);
      if (!sim.summary_out.empty()) {
        fallback = sibling(sim.summary_out, ".run.json");
      }
    } else if (cmd == f) {
      run_flops(flops, man);
    } else {
      run_eval(ev, man);
    }
    emit_manifest(man, manifest_path, fallback);
  } catch (const ConfigError &err) {
    std::cerr << "lla " << man.command << ": " << err.what() << "\n";
    return 2;
  } catch (const std::exception &err) {
    std::cerr << "lla " << man.command << ": " << err.what() << "\n";
    return 3;
  }
  return 0;
}

} // namespace lla::cli
