// Parallel kernels against their serial references.

#include <benchmark/benchmark.h>

#include "lla/attack.hpp"
#include "lla/linalg.hpp"
#include "lla/locker.hpp"
#include "lla/model.hpp"
#include "lla/outlier.hpp"

namespace {

lla::DenseMatrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  lla::SplitMix64 rng(lla::Seed{seed});
  lla::DenseMatrix m(r, c);
  for (auto &v : m.values()) {
    v = static_cast<float>(rng.normal());
  }
  return m;
}

void BM_matmul(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(lla::matmul(a, b));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void BM_matmul_serial(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(lla::matmul_serial(a, b));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

void BM_rotate_rows(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto signs = lla::hadamard_signs(n, lla::Seed{3});
  auto m = random_matrix(256, n, 4);
  for (auto _ : state) {
    lla::rotate_rows(m, n, signs);
    benchmark::ClobberMemory();
  }
}

void BM_rotate_rows_serial(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto signs = lla::hadamard_signs(n, lla::Seed{3});
  auto m = random_matrix(256, n, 4);
  for (auto _ : state) {
    lla::rotate_rows_serial(m, n, signs);
    benchmark::ClobberMemory();
  }
}

// Dense rotation for comparison with the FWHT path.
void BM_rotate_dense(benchmark::State &state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto h = lla::randomized_hadamard(n, lla::Seed{3});
  const auto m = random_matrix(256, n, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(lla::matmul(m, h));
  }
}

void BM_probe_stats(benchmark::State &state) {
  const auto model = lla::synth_model(lla::SynthConfig{}, lla::Seed{5});
  const auto probes = lla::random_probes(model.vocab, 8, 64, lla::Seed{6});
  for (auto _ : state) {
    benchmark::DoNotOptimize(lla::collect_probe_stats(model, probes));
  }
}

void BM_genetic_generation(benchmark::State &state) {
  const auto model = lla::synth_model(lla::SynthConfig{}, lla::Seed{5});
  lla::LockConfig cfg;
  cfg.seed = lla::Seed{7};
  const auto outcome = lla::lock_with_selection(model, cfg);
  const lla::ModelOracle oracle(model);
  lla::AttackData data;
  data.oracle = &oracle;
  data.probes = lla::random_probes(model.vocab, 4, 32, lla::Seed{8});
  lla::AttackConfig acfg;
  acfg.mode = lla::AttackMode::genetic;
  acfg.max_iterations = 1;
  for (auto _ : state) {
    benchmark::DoNotOptimize(lla::genetic_attack(outcome.locked, data, acfg));
  }
}

} // namespace

BENCHMARK(BM_matmul)->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_serial)->Arg(64)->Arg(256);
BENCHMARK(BM_rotate_rows)->Arg(64)->Arg(1024);
BENCHMARK(BM_rotate_rows_serial)->Arg(64)->Arg(1024);
BENCHMARK(BM_rotate_dense)->Arg(64)->Arg(1024);
BENCHMARK(BM_probe_stats);
BENCHMARK(BM_genetic_generation)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
