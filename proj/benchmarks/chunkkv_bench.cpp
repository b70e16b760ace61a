// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "chunkkv/kv_store.hpp"
#include "chunkkv/model.hpp"
#include "chunkkv/prefill.hpp"
#include "chunkkv/sequence.hpp"

namespace {

using namespace chunkkv;

const ModelBundle& bench_model() {
  static const ModelBundle model = init_model(ModelConfig::make(2, 2, 8, 256, 256, 7));
  return model;
}

SequenceLayout bench_layout(std::size_t groups, std::size_t tokens_per_group) {
  const VocabLayout vocab = VocabLayout::for_vocab(256);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<TokenId> visual(vocab.visual_begin, 255);
  std::vector<TokenId> system{1, 2, 3, 4};
  std::vector<std::vector<TokenId>> ids(groups);
  std::vector<double> times(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t t = 0; t < tokens_per_group; ++t) ids[g].push_back(visual(rng));
    times[g] = static_cast<double>(4 * g);
  }
  return assemble_layout(system, ids, times, {}, vocab, 1 << 20);
}

void BM_ForwardSegment(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<TokenId> tokens(n);
  std::vector<Position> pos(n);
  for (std::size_t i = 0; i < n; ++i) {
    tokens[i] = static_cast<TokenId>(1 + i % 255);
    pos[i] = static_cast<Position>(i);
  }
  const VisibilitySpec vis = VisibilitySpec::full_causal({}, pos);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward_segment(bench_model(), tokens, pos, {}, vis));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ForwardSegment)->RangeMultiplier(2)->Range(64, 1024)->Complexity();

void BM_ChunkedPrefill(benchmark::State& state) {
  const SequenceLayout layout = bench_layout(static_cast<std::size_t>(state.range(0)), 32);
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_prefill(bench_model(), layout, ChunkConfig{8, 4, true}, PrefillOptions{false}));
  }
  state.counters["tokens"] = static_cast<double>(layout.size());
}
BENCHMARK(BM_ChunkedPrefill)->RangeMultiplier(2)->Range(16, 128);

void BM_FullPrefill(benchmark::State& state) {
  const SequenceLayout layout = bench_layout(static_cast<std::size_t>(state.range(0)), 32);
  for (auto _ : state) benchmark::DoNotOptimize(full_oracle(bench_model(), layout.tokens));
  state.counters["tokens"] = static_cast<double>(layout.size());
}
BENCHMARK(BM_FullPrefill)->RangeMultiplier(2)->Range(16, 128);

BiLevelKvStore bench_store(std::size_t groups) {
  return run_prefill(bench_model(), bench_layout(groups, 32), ChunkConfig{8, 8, true}, PrefillOptions{false}).store;
}

void BM_PoolChunk(benchmark::State& state) {
  const BiLevelKvStore store = bench_store(8);
  const KvLayers& dense = store.dense.at(0);
  for (auto _ : state) benchmark::DoNotOptimize(pool_chunk(dense, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_PoolChunk)->Arg(2)->Arg(4)->Arg(16);

void BM_AssembleMixed(benchmark::State& state) {
  BiLevelKvStore store = bench_store(128);
  store.build_sparse(4);
  std::vector<RelevanceScore> scores;
  for (std::size_t id = 0; id < store.n_chunks(); ++id) scores.push_back({id, static_cast<double>(id % 7)});
  for (auto _ : state) benchmark::DoNotOptimize(assemble_mixed(store, scores, state.range(0)));
}
BENCHMARK(BM_AssembleMixed)->Arg(0)->Arg(2)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
