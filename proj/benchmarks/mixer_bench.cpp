// Microbenchmarks for the token mixers and the full backbone. Single-threaded.
// MAC counts are attached as counters so throughput reads directly.

#include <benchmark/benchmark.h>

#include "evim/bench.hpp"
#include "evim/io.hpp"

using namespace evim;

namespace {

constexpr std::size_t kN = 16, kD = 128;

template <class Layer>
void mixer_loop(benchmark::State& state, std::string_view mixer, Layer&& layer) {
  const MixerConfig cfg{static_cast<std::size_t>(state.range(0)), kN, kD};
  Rng rng(0);
  const auto x = rng.normal_tensor<float>({cfg.tokens, cfg.channels});
  const Grid grid = grid_for_tokens(cfg.tokens);
  layer(state, cfg, x, grid, rng);
  const double macs = double(bench::mixer_macs(mixer, cfg));
  state.counters["MACs/s"] = benchmark::Counter(macs, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_hsm_ssd(benchmark::State& state) {
  mixer_loop(state, "hsm_ssd", [](auto& st, const MixerConfig& cfg, const auto& x, const Grid& g, Rng& rng) {
    const auto p = init_mixer_params<float>(cfg, rng, false);
    for (auto _ : st) benchmark::DoNotOptimize(hsm_ssd_layer(x, p, g));
  });
}

void BM_ncssd(benchmark::State& state) {
  mixer_loop(state, "ncssd", [](auto& st, const MixerConfig& cfg, const auto& x, const Grid& g, Rng& rng) {
    const auto p = init_mixer_params<float>(cfg, rng, true);
    for (auto _ : st) benchmark::DoNotOptimize(ncssd_layer(x, p, g));
  });
}

void BM_causal_ssd(benchmark::State& state) {
  mixer_loop(state, "causal_ssd", [](auto& st, const MixerConfig& cfg, const auto& x, const Grid& g, Rng& rng) {
    const auto p = init_mixer_params<float>(cfg, rng, true);
    for (auto _ : st) benchmark::DoNotOptimize(causal_ssd_layer(x, p, g));
  });
}

void BM_attention_ref(benchmark::State& state) {
  mixer_loop(state, "attention_ref", [](auto& st, const MixerConfig& cfg, const auto& x, const Grid&, Rng& rng) {
    const auto ap = init_attention_params<float>(cfg.channels, rng);
    for (auto _ : st) benchmark::DoNotOptimize(attention_ref(x, ap));
  });
}

void BM_model_forward(benchmark::State& state, const char* variant) {
  const auto cfg = ModelConfig::preset(variant);
  Rng rng(0);
  const auto w = init_model<float>(cfg, rng);
  const auto img = rng.normal_tensor<float>({cfg.height, cfg.width, 3});
  for (auto _ : state) benchmark::DoNotOptimize(model_forward(img, w, cfg).logits);
  state.counters["MACs/s"] =
      benchmark::Counter(double(count_flops(cfg)), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_weight_encode(benchmark::State& state) {
  Rng rng(0);
  const auto f = io::to_weight_file(init_model<float>(ModelConfig::preset("M1"), rng));
  std::size_t bytes = 0;
  for (auto _ : state) {
    const auto s = io::encode(f);
    bytes = s.size();
    benchmark::DoNotOptimize(s.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * bytes));
}

}  // namespace

BENCHMARK(BM_hsm_ssd)->RangeMultiplier(2)->Range(256, 4096)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ncssd)->RangeMultiplier(2)->Range(256, 4096)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_causal_ssd)->RangeMultiplier(2)->Range(256, 4096)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_attention_ref)->RangeMultiplier(2)->Range(256, 2048)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_model_forward, M1, "M1")->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_model_forward, M4, "M4")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_weight_encode)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
