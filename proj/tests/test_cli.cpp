#include "doctest.h"

#include <filesystem>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "lla/cli.hpp"
#include "lla/fabric.hpp"
#include "lla/locker.hpp"
#include "lla/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Captured {
  int code = 0;
  std::string out;
  std::string err;
};

Captured lla_run(std::vector<std::string> args) {
  args.insert(args.begin(), "lla");
  std::ostringstream out, err;
  auto *old_out = std::cout.rdbuf(out.rdbuf());
  auto *old_err = std::cerr.rdbuf(err.rdbuf());
  Captured c;
  c.code = lla::cli::dispatch(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  c.out = out.str();
  c.err = err.str();
  return c;
}

fs::path workdir(const std::string &name) {
  auto p = fs::temp_directory_path() / ("lla_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string s(const fs::path &p) { return p.string(); }

} // namespace

TEST_CASE("synth, lock, run and eval chain together") {
  const auto dir = workdir("chain");
  REQUIRE(lla_run({"synth", "-o", s(dir / "model"), "--seed", "3"}).code == 0);
  CHECK(fs::exists(dir / "model" / "model.json"));
  CHECK(fs::exists(dir / "model.run.json"));

  const auto lock = lla_run({"lock", s(dir / "model"), "-o", s(dir / "locked"), "--seed", "4"});
  REQUIRE(lock.code == 0);
  const auto summary = json::parse(lock.out);
  CHECK(summary["key_bits"] == 224);
  CHECK(fs::exists(dir / "locked.llak"));
  const auto key = lla::load_key(dir / "locked.llak");
  CHECK(key.n == 64);
  CHECK(key.m == 16);
  CHECK(lla::is_locked_model_dir(dir / "locked"));

  lla::write_token_file(dir / "tokens.txt", {{1, 2, 3, 4, 5, 6}, {7, 8, 9, 10}});
  const auto good = lla_run({"run", s(dir / "locked"), "--key", s(dir / "locked.llak"), "--tokens",
                             s(dir / "tokens.txt"), "--original", s(dir / "model")});
  REQUIRE(good.code == 0);
  CHECK(json::parse(good.out)["jsd_vs_original"].get<double>() < 1e-8);

  const auto ev = lla_run({"eval", "--a", s(dir / "model"), "--b", s(dir / "locked"), "--key-b",
                           s(dir / "locked.llak"), "--tokens", s(dir / "tokens.txt"),
                           "--candidate-key", s(dir / "locked.llak"), "--truth-key",
                           s(dir / "locked.llak")});
  REQUIRE(ev.code == 0);
  const auto e = json::parse(ev.out);
  CHECK(e["jsd"].get<double>() < 1e-8);
  CHECK(e["fidelity"] == 1.0);
}

TEST_CASE("locked models without their key are a config error") {
  const auto dir = workdir("nokey");
  REQUIRE(lla_run({"synth", "-o", s(dir / "model")}).code == 0);
  REQUIRE(lla_run({"lock", s(dir / "model"), "-o", s(dir / "locked")}).code == 0);
  lla::write_token_file(dir / "t.txt", {{1, 2, 3}});
  CHECK(lla_run({"run", s(dir / "locked"), "--tokens", s(dir / "t.txt")}).code == 2);
}

TEST_CASE("exit codes") {
  const auto dir = workdir("codes");
  CHECK(lla_run({}).code == 2);
  CHECK(lla_run({"--help"}).code == 0);
  CHECK(lla_run({"--version"}).code == 0);
  CHECK(lla_run({"synth"}).code == 2);
  CHECK(lla_run({"synth", "-o", s(dir / "m"), "--bogus"}).code == 2);
  CHECK(lla_run({"synth", "-o", s(dir / "m"), "--kind", "moe"}).code == 2);
  CHECK(lla_run({"lock", s(dir / "missing"), "-o", s(dir / "l")}).code == 3);
  CHECK(lla_run({"flops", "--n", "24"}).code == 2);
  CHECK(lla_run({"simulate", s(dir / "missing"), "--key", s(dir / "k.llak"), "--dataflow", "rs"}).code ==
        2);
}

TEST_CASE("the key file may not live inside the locked model directory") {
  const auto dir = workdir("keyinside");
  REQUIRE(lla_run({"synth", "-o", s(dir / "model")}).code == 0);
  const auto r = lla_run(
      {"lock", s(dir / "model"), "-o", s(dir / "locked"), "--key", s(dir / "locked" / "k.llak")});
  CHECK(r.code == 2);
  CHECK_FALSE(fs::exists(dir / "locked" / "k.llak"));
}

TEST_CASE("json config files fill options and flags take precedence") {
  const auto dir = workdir("config");
  lla::write_text_file(dir / "flat.json", R"({"dff": 8192, "n": 128})");
  auto r = lla_run({"--config", s(dir / "flat.json"), "flops"});
  REQUIRE(r.code == 0);
  auto j = json::parse(r.out);
  CHECK(j["d_ff"] == 8192);
  CHECK(j["n"] == 128);

  r = lla_run({"--config", s(dir / "flat.json"), "flops", "--n", "256"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["n"] == 256);

  lla::write_text_file(dir / "nested.json", R"({"flops": {"n": 32}, "synth": {"seed": 9}})");
  r = lla_run({"--config", s(dir / "nested.json"), "flops"});
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["n"] == 32);

  lla::write_text_file(dir / "extra.json", R"({"n": 32, "colour": "blue"})");
  CHECK(lla_run({"--config", s(dir / "extra.json"), "flops"}).code == 2);
  lla::write_text_file(dir / "broken.json", "{n: 3");
  CHECK(lla_run({"--config", s(dir / "broken.json"), "flops"}).code == 2);
}

TEST_CASE("flops reports the overhead ratio") {
  const auto r = lla_run({"flops", "--dm", "4096", "--dff", "11008", "--n", "64", "--m", "16"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  const double expect = 100.0 * (64.0 * 6 + 64) / (2.0 * 4096 * 11008 * 2);
  CHECK(j["ratio_percent"].get<double>() == doctest::Approx(expect));
  CHECK(j["key_bits"] == 224);
}

TEST_CASE("simulate matches the software path and writes a trace") {
  const auto dir = workdir("sim");
  REQUIRE(lla_run({"synth", "-o", s(dir / "model"), "--d-ff", "64", "--seed", "2"}).code == 0);
  REQUIRE(lla_run({"lock", s(dir / "model"), "-o", s(dir / "locked"), "--n", "16", "--m", "4"}).code == 0);
  const auto r = lla_run({"simulate", s(dir / "locked"), "--key", s(dir / "locked.llak"), "--seq-len",
                          "4", "--rows", "8", "--cols", "8", "--dataflow", "os", "--trace-out",
                          s(dir / "trace.txt"), "--summary-out", s(dir / "sum.json")});
  REQUIRE(r.code == 0);
  const auto j = json::parse(lla::read_text_file(dir / "sum.json"));
  CHECK(j["max_rel_error_vs_software"].get<double>() < 1e-4);
  CHECK(lla::read_text_file(dir / "trace.txt").find("fabric") != std::string::npos);
}

TEST_CASE("attack artifacts are byte-identical across reruns") {
  const auto dir = workdir("rerun");
  REQUIRE(lla_run({"synth", "-o", s(dir / "model"), "--d-ff", "64", "--seed", "5"}).code == 0);
  REQUIRE(lla_run({"lock", s(dir / "model"), "-o", s(dir / "locked"), "--n", "8", "--m", "4"}).code == 0);
  for (const char *mode : {"gradient", "genetic"}) {
    std::vector<std::string> args{"attack",         s(dir / "locked"),       "--mode",   mode,
                                  "--oracle",       s(dir / "model"),        "--seed",   "7",
                                  "--iterations",   "4",                     "--population", "8",
                                  "--probe-count",  "2",                     "--probe-len", "8",
                                  "--truth-key",    s(dir / "locked.llak"),  "-o"};
    auto a = args, b = args;
    a.push_back(s(dir / (std::string(mode) + "_a.json")));
    b.push_back(s(dir / (std::string(mode) + "_b.json")));
    REQUIRE(lla_run(a).code == 0);
    REQUIRE(lla_run(b).code == 0);
    const auto ja = lla::read_text_file(dir / (std::string(mode) + "_a.json"));
    CHECK(ja == lla::read_text_file(dir / (std::string(mode) + "_b.json")));
    CHECK(json::parse(ja).contains("fidelity"));
  }
}

TEST_CASE("manifests record command, seeds and outputs") {
  const auto dir = workdir("manifest");
  REQUIRE(lla_run({"--manifest", s(dir / "man.json"), "synth", "-o", s(dir / "model"), "--seed", "11"})
              .code == 0);
  const auto j = json::parse(lla::read_text_file(dir / "man.json"));
  CHECK(j["command"] == "synth");
  CHECK(j.contains("seeds"));
  CHECK(j.contains("outputs"));
  CHECK(j["config"].contains("seed"));
}
