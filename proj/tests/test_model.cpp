#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>

#include "lla/errors.hpp"
#include "lla/model.hpp"
#include "lla/outlier.hpp"
#include "lla/tensor_io.hpp"
#include "oracles.hpp"

using namespace lla;
namespace fs = std::filesystem;

namespace {

FfnBlock random_ffn(FfnKind kind, Activation act, std::size_t dm, std::size_t dff,
                    std::uint64_t seed) {
  FfnBlock b;
  b.kind = kind;
  b.activation = act;
  b.w_up = oracle::random_matrix(dm, dff, seed, 0.5);
  if (kind == FfnKind::gated) {
    b.w_gate = oracle::random_matrix(dm, dff, seed + 1, 0.5);
  }
  b.w_down = oracle::random_matrix(dff, dm, seed + 2, 0.5);
  return b;
}

fs::path scratch(const std::string &name) {
  auto p = fs::temp_directory_path() / ("lla_test_model_" + name);
  fs::remove_all(p);
  return p;
}

} // namespace

TEST_CASE("FFN forward matches the double-precision reference") {
  for (auto kind : {FfnKind::standard, FfnKind::gated}) {
    for (auto act : {Activation::relu, Activation::silu}) {
      const auto b = random_ffn(kind, act, 6, 24, 11);
      const auto x = oracle::random_matrix(5, 6, 12);
      const auto ref = oracle::ffn(b, oracle::to_mat(x));
      CHECK(oracle::rel_error(ffn_forward(b, x), ref) < 1e-5);
    }
  }
}

TEST_CASE("activation derivatives match central differences") {
  for (auto act : {Activation::relu, Activation::silu}) {
    for (float x : {-2.5f, -0.7f, 0.3f, 1.9f}) {
      const double h = 1e-3;
      const double fd = (activate(act, x + static_cast<float>(h)) -
                         activate(act, x - static_cast<float>(h))) /
                        (2 * h);
      CHECK(activate_grad(act, x) == doctest::Approx(fd).epsilon(1e-2));
    }
  }
}

TEST_CASE("kind and activation names round-trip") {
  CHECK(parse_ffn_kind(to_string(FfnKind::gated)) == FfnKind::gated);
  CHECK(parse_activation(to_string(Activation::silu)) == Activation::silu);
  CHECK_THROWS_AS(parse_ffn_kind("moe"), ConfigError);
}

TEST_CASE("FFN shape checks") {
  auto b = random_ffn(FfnKind::standard, Activation::relu, 4, 8, 1);
  CHECK_THROWS_AS(ffn_forward(b, oracle::random_matrix(2, 5, 1)), ShapeError);
  b.w_gate = oracle::random_matrix(4, 8, 2);
  CHECK_THROWS_AS(b.validate(), ShapeError);
}

TEST_CASE("embedding rejects out-of-vocabulary tokens") {
  const auto model = synth_model(SynthConfig{}, Seed{1});
  const TokenSeq bad{1, 2, 64};
  CHECK_THROWS_AS(model_forward(model, bad), InputError);
}

TEST_CASE("forward shapes, captures and override hook") {
  const auto model = synth_model(SynthConfig{}, Seed{2});
  const TokenSeq seq{1, 5, 9, 3};
  const auto fwd = model_forward(model, seq);
  CHECK(fwd.logits.rows() == 4);
  CHECK(fwd.logits.cols() == 64);
  REQUIRE(fwd.captures.size() == 3);
  CHECK(fwd.captures[1].u_bar.size() == 256);
  CHECK(logits_fn(model)(seq) == fwd.logits);

  // Overriding a block with its own FFN changes nothing.
  const FfnOverride same{1, [&](const DenseMatrix &x) { return ffn_forward(model.blocks[1].ffn, x); }};
  CHECK(model_forward(model, seq, false, &same).logits == fwd.logits);
}

TEST_CASE("synthetic planting yields exactly the requested outlier features") {
  SynthConfig cfg;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto model = synth_model(cfg, Seed{seed});
    const auto probes = random_probes(model.vocab, 8, 64, Seed{seed + 100});
    CHECK(find_feature_outliers(model, 0, probes).outlier_set.empty());
    CHECK(find_feature_outliers(model, 1, probes).outlier_set == cfg.outlier_dims);
  }
}

TEST_CASE("synth_model error paths") {
  SynthConfig cfg;
  cfg.n_blocks = 0;
  CHECK_THROWS_AS(synth_model(cfg, Seed{1}), ConstructionError);
  cfg = SynthConfig{};
  cfg.outlier_dims = {40};
  CHECK_THROWS_AS(synth_model(cfg, Seed{1}), ConstructionError);
  cfg = SynthConfig{};
  cfg.outlier_gain = 2.0f;
  CHECK_THROWS_AS(synth_model(cfg, Seed{1}), ConstructionError);
}

TEST_CASE("gain of one plants nothing") {
  SynthConfig cfg;
  cfg.outlier_gain = 1.0f;
  const auto model = synth_model(cfg, Seed{4});
  const auto probes = random_probes(model.vocab, 4, 32, Seed{5});
  CHECK_THROWS_AS(select_protected_block(model, probes), SelectionError);
}

TEST_CASE("perplexity matches a direct next-token computation") {
  SynthConfig cfg;
  cfg.vocab = 8;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.n_blocks = 1;
  cfg.outlier_gain = 1.0f;
  const auto model = synth_model(cfg, Seed{6});
  const std::vector<TokenSeq> corpus{{1, 4, 2, 7}, {0, 3}};
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto &seq : corpus) {
    const auto logits = oracle::to_mat(model_forward(model, seq, false).logits);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      nll -= std::log(oracle::softmax(logits[t])[seq[t + 1]]);
      ++count;
    }
  }
  CHECK(perplexity(model, corpus) == doctest::Approx(std::exp(nll / count)).epsilon(1e-6));
  CHECK_THROWS_AS(perplexity(model, std::vector<TokenSeq>{}), InputError);
  CHECK_THROWS_AS(perplexity(model, std::vector<TokenSeq>{TokenSeq{3}}), InputError);
}

TEST_CASE("sampled corpora are reproducible and in range") {
  const auto model = synth_model(SynthConfig{}, Seed{7});
  const auto a = sample_corpus(model, 4, 20, Seed{8});
  const auto b = sample_corpus(model, 4, 20, Seed{8});
  CHECK(a == b);
  REQUIRE(a.size() == 4);
  for (const auto &s : a) {
    CHECK(s.size() == 20);
    for (auto t : s) {
      CHECK(t < 64);
    }
  }
  // The model predicts its own samples far better than uniform guessing.
  CHECK(perplexity(model, a) < 64.0);
}

TEST_CASE("LLAT encoding is bit-exact") {
  const DenseMatrix m{{1, 2}, {3, 4}, {5, 6}};
  const auto bytes = encode_tensor(m);
  // magic + version + ndims, two u64 dims, six floats
  CHECK(bytes.size() == 52);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "LLAT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 3);
  CHECK(bytes[20] == 2);
  // 1.0f little-endian
  CHECK(bytes[28] == 0x00);
  CHECK(bytes[31] == 0x3f);
  CHECK(decode_tensor(bytes) == m);
}

TEST_CASE("LLAT decoding rejects malformed input") {
  const DenseMatrix m{{1, 2}, {3, 4}};
  auto bytes = encode_tensor(m);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(decode_tensor(bad), FormatError);

  // A one-dimensional tensor loads as a single row.
  std::vector<unsigned char> vec{'L', 'L', 'A', 'T', 1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0};
  for (float f : {1.0f, 2.0f, 3.0f}) {
    unsigned char raw[4];
    std::memcpy(raw, &f, 4);
    vec.insert(vec.end(), raw, raw + 4);
  }
  CHECK(decode_tensor(vec) == DenseMatrix{{1, 2, 3}});
}

TEST_CASE("model directories round-trip") {
  for (auto kind : {FfnKind::standard, FfnKind::gated}) {
    SynthConfig cfg;
    cfg.kind = kind;
    cfg.activation = kind == FfnKind::gated ? Activation::silu : Activation::relu;
    const auto model = synth_model(cfg, Seed{9});
    const auto dir = scratch(kind == FfnKind::gated ? "gated" : "standard");
    save_model_dir(model, dir);
    const auto back = load_model_dir(dir);
    const TokenSeq seq{3, 1, 4, 1, 5};
    CHECK(model_forward(back, seq, false).logits == model_forward(model, seq, false).logits);
    CHECK(back.blocks[0].ffn.kind == kind);
  }
  CHECK_THROWS_AS(load_model_dir(scratch("missing")), InputError);
}

TEST_CASE("token files round-trip") {
  const auto dir = scratch("tokens");
  fs::create_directories(dir);
  const std::vector<TokenSeq> seqs{{1, 2, 3}, {40, 0}};
  write_token_file(dir / "t.txt", seqs);
  CHECK(read_token_file(dir / "t.txt") == seqs);
  write_text_file(dir / "bad.txt", "1 two 3\n");
  CHECK_THROWS_AS(read_token_file(dir / "bad.txt"), FormatError);
}
