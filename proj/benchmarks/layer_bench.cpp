#include <benchmark/benchmark.h>

#include <numeric>

#include "pcmoe/committee.hpp"
#include "pcmoe/workload.hpp"

namespace {

using namespace pcmoe;

struct Fixture {
  MoEModelSpec model;
  Trace trace;
  std::vector<double> mags;

  explicit Fixture(std::size_t experts) {
    ModelGenParams p;
    p.experts = experts;
    p.layers = 1;
    p.seed = 7;
    model = gen_model(p);
    TraceSpec s;
    s.num_samples = 32;
    s.seed = 8;
    trace = gen_trace(s, &model);
    for (const auto& e : model.layers[0].experts) mags.push_back(e.cached_magnitude);
  }
};

void BM_LayerReference(benchmark::State& state) {
  const Fixture f(static_cast<std::size_t>(state.range(0)));
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& tokens = f.trace.samples[i++ % f.trace.samples.size()].tokens;
    benchmark::DoNotOptimize(layer_forward_reference(f.model.layers[0], tokens));
  }
}
BENCHMARK(BM_LayerReference)->Arg(8)->Arg(32);

void BM_LayerCommittee(benchmark::State& state) {
  const Fixture f(static_cast<std::size_t>(state.range(0)));
  const auto strategy = state.range(1) == 0 ? Strategy::Skip : Strategy::Exchange;
  const std::size_t n = f.model.layers[0].num_experts();
  const PCConfig config{4, {n / 2}, {strategy}};
  CommitteeState committee = initial_committee(f.model, config);
  const auto table = make_expert_table(f.model.layers[0], committee.layers[0].resident);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& tokens = f.trace.samples[i++ % f.trace.samples.size()].tokens;
    benchmark::DoNotOptimize(
        layer_forward_pc(f.model.layers[0], 0, tokens, committee, config, f.mags, table));
    ++committee.sample_counter;
  }
}
BENCHMARK(BM_LayerCommittee)->Args({8, 0})->Args({8, 1})->Args({32, 0})->Args({32, 1});

void BM_ImportanceScores(benchmark::State& state) {
  const Fixture f(static_cast<std::size_t>(state.range(0)));
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& tokens = f.trace.samples[i++ % f.trace.samples.size()].tokens;
    benchmark::DoNotOptimize(importance_scores(f.model.layers[0], tokens, f.mags, f.model.layers[0].k));
  }
}
BENCHMARK(BM_ImportanceScores)->Arg(8)->Arg(32);

}  // namespace
