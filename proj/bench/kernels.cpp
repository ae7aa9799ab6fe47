// Tiled OpenMP GEMM against the serial reference, plus end-to-end costs of a
// training step and a streaming feed at the desk configuration.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "cemformer/episodes.hpp"
#include "cemformer/kernel/gemm.hpp"
#include "cemformer/runtime.hpp"
#include "cemformer/train.hpp"

namespace {

using namespace cem;

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

using GemmFn = void (*)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

// tn reduces over m: B is m x n and C is k x n
void run_gemm(benchmark::State& state, GemmFn fn, bool tn = false) {
  const auto m = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1)),
             k = static_cast<std::size_t>(state.range(2));
  auto a = random_buffer(m * k, 1), b = random_buffer((tn ? m : k) * n, 2);
  std::vector<double> c((tn ? k : m) * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    fn(m, n, k, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * m * n * k, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

// (rows, cols, inner): desk qkv projection, MLP up-projection, a square case
void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({36, 192, 64})->Args({36, 128, 64})->Args({256, 256, 256});
}

void BM_gemm_nn_tiled(benchmark::State& s) { run_gemm(s, kernel::gemm::nn); }
void BM_gemm_nn_reference(benchmark::State& s) { run_gemm(s, kernel::reference::gemm_nn); }
void BM_gemm_nt_tiled(benchmark::State& s) { run_gemm(s, kernel::gemm::nt); }
void BM_gemm_nt_reference(benchmark::State& s) { run_gemm(s, kernel::reference::gemm_nt); }
void BM_gemm_tn_tiled(benchmark::State& s) { run_gemm(s, kernel::gemm::tn, true); }
void BM_gemm_tn_reference(benchmark::State& s) { run_gemm(s, kernel::reference::gemm_tn, true); }

BENCHMARK(BM_gemm_nn_tiled)->Apply(gemm_shapes);
BENCHMARK(BM_gemm_nn_reference)->Apply(gemm_shapes);
BENCHMARK(BM_gemm_nt_tiled)->Apply(gemm_shapes);
BENCHMARK(BM_gemm_nt_reference)->Apply(gemm_shapes);
BENCHMARK(BM_gemm_tn_tiled)->Apply(gemm_shapes);
BENCHMARK(BM_gemm_tn_reference)->Apply(gemm_shapes);

// One optimizer step over a batch of 10 desk episodes, at 1 thread and at
// the machine's thread count.
void BM_train_batch(benchmark::State& state) {
  const int threads = static_cast<int>(state.range(0));
  const int saved = omp_get_max_threads();
  omp_set_num_threads(threads);
  auto data = episodes::generate_dataset(10, 3, episodes::GeneratorConfig{});
  train::TrainConfig cfg;
  cfg.epochs = 1;
  encoder::Model model(train::model_config_for(cfg, data, rules::default_maneuvers()), 1);
  train::Trainer trainer(model, cfg, rules::default_ruleset());
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_epoch(data));
  omp_set_num_threads(saved);
  state.counters["episodes/s"] = benchmark::Counter(10.0, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_train_batch)->Arg(1)->Arg(omp_get_num_procs())->Unit(benchmark::kMillisecond);

void BM_stream_feed(benchmark::State& state) {
  auto ep = episodes::generate_episode(4, episodes::GeneratorConfig{});
  encoder::ModelConfig cfg;
  cfg.class_names = rules::default_maneuvers();
  cfg.views.resize(static_cast<std::size_t>(state.range(0)));
  for (auto& f : ep.frames) f.views.resize(cfg.views.size());
  encoder::Model model(cfg, 1);
  runtime::InferenceSession session(model);
  std::size_t i = 0;
  for (auto _ : state) {
    if (i % ep.frames.size() == 0) session.reset();
    benchmark::DoNotOptimize(session.feed(ep.frames[i++ % ep.frames.size()]));
  }
  state.counters["fps"] = benchmark::Counter(1.0, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_stream_feed)->Arg(1)->Arg(2)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
