#include <benchmark/benchmark.h>

#include <random>

#include "cocomix/concept_select.hpp"
#include "cocomix/params.hpp"
#include "cocomix/sae.hpp"
#include "cocomix/tensor.hpp"
#include "cocomix/trainer.hpp"

namespace {

using namespace cocomix;

GraphTensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, bool grad = false) {
  std::mt19937_64 rng(seed);
  return normal_leaf({r, c}, 1.0, rng, grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const GraphTensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b).values().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const std::size_t batch = 2, d = 64;
  const GraphTensor qkv = random_matrix(batch * t, 3 * d, 3, true);
  AttentionLayout layout{4, t, {}};
  for (auto _ : state) {
    GraphTensor y = ops::reduce_sum(ops::attention(qkv, layout));
    y.backward();
    benchmark::DoNotOptimize(y.item());
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(32)->Arg(64);

void BM_TrainStep(benchmark::State& state) {
  const Method m = static_cast<Method>(state.range(0));
  CorpusSpec spec;
  spec.n_docs = 64;
  const Corpus corpus = gen_corpus(spec);
  const auto windows = make_windows(corpus, 32, 0, 64);
  ModelConfig mc;
  const TransformerModel teacher(mc);
  const SaeModel sae(64, 128, 8, 1);
  LabelSet labels;
  if (uses_concepts(m)) labels = label_batch(teacher, sae, windows, 4, SelectMode::kAttribution);
  Student s(m, mc, 128, 8, 64);
  TrainConfig tc;
  tc.method = m;
  tc.steps = 1'000'000;
  tc.eval_every = 1'000'000;
  Trainer trainer(s, tc, TrainData{&windows, &windows, uses_concepts(m) ? &labels : nullptr, &teacher});
  for (auto _ : state) trainer.run(trainer.step() + 1);
  state.SetLabel(method_name(m));
}
BENCHMARK(BM_TrainStep)
    ->Arg(static_cast<int>(Method::kNtp))
    ->Arg(static_cast<int>(Method::kCocomix))
    ->Arg(static_cast<int>(Method::kKd))
    ->Unit(benchmark::kMillisecond);

void BM_AttributionWindow(benchmark::State& state) {
  CorpusSpec spec;
  spec.n_docs = 4;
  const Corpus corpus = gen_corpus(spec);
  const auto windows = make_windows(corpus, 32, 0, 1);
  const TransformerModel teacher(ModelConfig{});
  const SaeModel sae(64, 128, 8, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(label_batch(teacher, sae, windows, 4, SelectMode::kAttribution).indices.data());
  }
}
BENCHMARK(BM_AttributionWindow)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
