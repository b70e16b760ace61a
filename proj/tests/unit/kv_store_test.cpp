// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "chunkkv/checkpoint.hpp"
#include "chunkkv/cost_model.hpp"
#include "chunkkv/kv_store.hpp"
#include "chunkkv/prefill.hpp"
#include "test_support.hpp"

namespace chunkkv {
namespace {

LayerKv random_kv(std::size_t heads, std::size_t dim, std::vector<Position> positions, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  LayerKv kv = LayerKv::empty(heads, dim);
  kv.positions = std::move(positions);
  kv.keys.resize(heads * kv.n_tokens() * dim);
  kv.values.resize(kv.keys.size());
  for (auto& x : kv.keys) x = u(rng);
  for (auto& x : kv.values) x = u(rng);
  return kv;
}

KvLayers random_chunk(std::size_t layers, std::size_t n, std::mt19937_64& rng, Position first = 10) {
  KvLayers out;
  for (std::size_t l = 0; l < layers; ++l) out.push_back(random_kv(2, 3, testing::iota_positions(first, n), rng));
  return out;
}

TEST(PoolChunk, FactorOneIsBitwiseIdentity) {
  std::mt19937_64 rng(1);
  const KvLayers dense = random_chunk(2, 9, rng);
  const KvLayers pooled = pool_chunk(dense, 1);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(pooled[l].keys, dense[l].keys);
    EXPECT_EQ(pooled[l].values, dense[l].values);
    EXPECT_EQ(pooled[l].positions, dense[l].positions);
  }
}

TEST(PoolChunk, EightTokensFactorFourMatchesDirectMean) {
  std::mt19937_64 rng(2);
  const KvLayers dense = random_chunk(1, 8, rng);
  const KvLayers pooled = pool_chunk(dense, 4);
  ASSERT_EQ(pooled[0].n_tokens(), 2u);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 3; ++i) {
      double k = 0.0, v = 0.0;
      for (std::size_t t = 0; t < 4; ++t) {
        k += dense[0].key(h, t)[i];
        v += dense[0].value(h, t)[i];
      }
      EXPECT_NEAR(pooled[0].key(h, 0)[i], k / 4.0, 1e-6);
      EXPECT_NEAR(pooled[0].value(h, 0)[i], v / 4.0, 1e-6);
    }
  }
  EXPECT_EQ(pooled[0].positions, (std::vector<Position>{11, 15}));  // floor(11.5), floor(15.5)
}

TEST(PoolChunk, PartialTailPooledAtItsSize) {
  std::mt19937_64 rng(3);
  const KvLayers dense = random_chunk(1, 7, rng);
  const KvLayers pooled = pool_chunk(dense, 4);
  ASSERT_EQ(pooled[0].n_tokens(), 2u);
  for (std::size_t i = 0; i < 3; ++i) {
    const double mean = (static_cast<double>(dense[0].key(1, 4)[i]) + dense[0].key(1, 5)[i] + dense[0].key(1, 6)[i]) / 3.0;
    EXPECT_NEAR(pooled[0].key(1, 1)[i], mean, 1e-6);
  }
  EXPECT_EQ(pooled[0].positions[1], 15);
}

TEST(PoolChunk, ContractionAndIncreasingPositions) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    const std::size_t p = 1 + rng() % 9;
    std::vector<Position> pos;
    Position at = static_cast<Position>(rng() % 5);
    for (std::size_t i = 0; i < n; ++i) pos.push_back(at += 1 + static_cast<Position>(rng() % 3));
    const KvLayers dense{random_kv(2, 4, pos, rng)};
    const LayerKv sparse = pool_chunk(dense, p)[0];
    ASSERT_EQ(sparse.n_tokens(), (n + p - 1) / p);
    EXPECT_NO_THROW(sparse.validate());
    for (std::size_t g = 0; g < sparse.n_tokens(); ++g) {
      const std::size_t b = g * p, e = std::min(n, b + p);
      for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t i = 0; i < 4; ++i) {
          float lo = std::numeric_limits<float>::max(), hi = -lo;
          for (std::size_t t = b; t < e; ++t) {
            lo = std::min(lo, dense[0].key(h, t)[i]);
            hi = std::max(hi, dense[0].key(h, t)[i]);
          }
          ASSERT_GE(sparse.key(h, g)[i], lo);
          ASSERT_LE(sparse.key(h, g)[i], hi);
        }
      }
      Position sum = 0;
      for (std::size_t t = b; t < e; ++t) sum += pos[t];
      ASSERT_EQ(sparse.positions[g], sum / static_cast<Position>(e - b));
    }
  }
}

TEST(PoolChunk, Errors) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(pool_chunk(random_chunk(1, 4, rng), 0), std::invalid_argument);
  EXPECT_THROW(pool_chunk(KvLayers{LayerKv::empty(2, 3)}, 2), std::invalid_argument);
}

// Store with n chunks of c visual tokens each, one timestamp before every chunk.
BiLevelKvStore synthetic_store(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  BiLevelKvStore s(1, 2, 3);
  s.set_system(KvLayers{random_kv(2, 3, {0, 1}, rng)});
  Position at = 2;
  for (std::size_t id = 0; id < n; ++id) {
    s.append_timestamps(KvLayers{random_kv(2, 3, {at}, rng)});
    ++at;
    s.set_dense(id, TokenRange{at, at + static_cast<Position>(c)}, random_chunk(1, c, rng, at));
    at += static_cast<Position>(c);
  }
  return s;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa == 0 || bb == 0 ? 0.0 : ab / std::sqrt(aa * bb);
}

QueryRepr random_repr(std::size_t heads, std::size_t dim, std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  QueryRepr r{heads, dim, n, std::vector<float>(heads * n * dim), std::vector<float>(heads * n * dim)};
  for (auto& x : r.queries) x = u(rng);
  for (auto& x : r.keys) x = u(rng);
  return r;
}

TEST(ScoreChunks, CentroidMatchesBruteForce) {
  std::mt19937_64 rng(6);
  BiLevelKvStore s = synthetic_store(5, 8, rng);
  s.build_sparse(3);
  const QueryRepr q = random_repr(2, 3, 4, rng);
  const auto scores = score_chunks(s, q, OracleKind::Centroid, 0);
  ASSERT_EQ(scores.size(), 5u);
  std::vector<double> qmean(6, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t d = 0; d < 3; ++d) qmean[h * 3 + d] += q.key(h, i)[d] / 4.0;
  for (const auto& sc : scores) {
    const LayerKv& kv = s.sparse.at(sc.chunk_id)[0];
    std::vector<double> kmean(6, 0.0);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t t = 0; t < kv.n_tokens(); ++t)
        for (std::size_t d = 0; d < 3; ++d) kmean[h * 3 + d] += kv.key(h, t)[d] / static_cast<double>(kv.n_tokens());
    EXPECT_NEAR(sc.score, cosine(kmean, qmean), 1e-9);
  }
}

TEST(ScoreChunks, AttentionMatchesBruteForce) {
  std::mt19937_64 rng(7);
  BiLevelKvStore s = synthetic_store(2, 6, rng);
  s.build_sparse(2);
  const QueryRepr q = random_repr(2, 3, 3, rng);
  const auto scores = score_chunks(s, q, OracleKind::AttentionScore, 0);
  for (const auto& sc : scores) {
    const LayerKv& kv = s.sparse.at(sc.chunk_id)[0];
    double total = 0.0;
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 3; ++i) {
        double best = -1e300;
        for (std::size_t t = 0; t < kv.n_tokens(); ++t) {
          double dot = 0.0;
          for (std::size_t d = 0; d < 3; ++d) dot += static_cast<double>(q.query(h, i)[d]) * kv.key(h, t)[d];
          best = std::max(best, dot / std::sqrt(3.0));
        }
        total += best;
      }
    }
    EXPECT_NEAR(sc.score, total / 6.0, 1e-6);
  }
}

TEST(ScoreChunks, CentroidSeparatesAlignedChunk) {
  // Chunk 2's key centroid points along +e0 in both heads; others are orthogonal.
  BiLevelKvStore s(1, 2, 3);
  s.set_system(KvLayers{LayerKv::empty(2, 3)});
  s.system_kvs[0].positions.clear();
  for (std::size_t id = 0; id < 4; ++id) {
    LayerKv kv = LayerKv::empty(2, 3);
    kv.positions = {static_cast<Position>(4 * id), static_cast<Position>(4 * id + 1)};
    kv.keys.assign(2 * 2 * 3, 0.0f);
    kv.values.assign(2 * 2 * 3, 0.5f);
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t t = 0; t < 2; ++t) kv.key(h, t)[id == 2 ? 0 : 1 + t] = 1.0f;
    }
    s.set_dense(id, TokenRange{kv.positions[0], kv.positions[1] + 1}, KvLayers{kv});
  }
  s.build_sparse(2);
  QueryRepr q{2, 3, 1, std::vector<float>(6, 0.0f), {1, 0, 0, 1, 0, 0}};
  const auto scores = score_chunks(s, q, OracleKind::Centroid, 0);
  for (const auto& sc : scores) {
    if (sc.chunk_id == 2) EXPECT_NEAR(sc.score, 1.0, 1e-12);
    else EXPECT_EQ(sc.score, 0.0);
  }
}

TEST(ScoreChunks, IdenticalChunksScoreEqual) {
  std::mt19937_64 rng(8);
  BiLevelKvStore s(1, 2, 3);
  s.set_system(KvLayers{random_kv(2, 3, {0}, rng)});
  const LayerKv proto = random_kv(2, 3, {1, 2, 3, 4}, rng);
  for (std::size_t id = 0; id < 3; ++id) {
    LayerKv kv = proto;
    for (auto& p : kv.positions) p += static_cast<Position>(4 * id);
    s.set_dense(id, TokenRange{kv.positions.front(), kv.positions.back() + 1}, KvLayers{kv});
  }
  s.build_sparse(2);
  const QueryRepr q = random_repr(2, 3, 2, rng);
  for (OracleKind kind : {OracleKind::Centroid, OracleKind::AttentionScore}) {
    const auto scores = score_chunks(s, q, kind, 0);
    EXPECT_EQ(scores[0].score, scores[1].score);
    EXPECT_EQ(scores[1].score, scores[2].score);
  }
}

TEST(OracleKind, Parsing) {
  EXPECT_EQ(oracle_kind_from_string("centroid"), OracleKind::Centroid);
  EXPECT_EQ(oracle_kind_from_string("attn"), OracleKind::AttentionScore);
  EXPECT_THROW(oracle_kind_from_string("embedder"), std::invalid_argument);
}

TEST(AssembleMixed, EightChunksTopTwoPoolFour) {
  std::mt19937_64 rng(9);
  BiLevelKvStore s = synthetic_store(8, 64, rng);
  s.build_sparse(4);
  std::vector<RelevanceScore> scores;
  for (std::size_t id = 0; id < 8; ++id) scores.push_back({id, static_cast<double>(id % 3)});
  ModelConfig cfg = ModelConfig::make(1, 2, 3, 4, 64, 1);
  CostMeter meter(cfg, Phase::Decode);
  const MixedCache m = assemble_mixed(s, scores, 2, &meter);
  EXPECT_EQ(m.selection, (std::vector<std::size_t>{2, 5}));
  EXPECT_DOUBLE_EQ(m.visual_fraction(), 0.4375);
  EXPECT_EQ(m.visual_tokens(), 2u * 64 + 6u * 16);
  EXPECT_EQ(meter.report().kv_tokens_loaded_decode, m.total_tokens());
  EXPECT_EQ(meter.report().kv_bytes_loaded_decode, kv_bytes_for_tokens(cfg, m.total_tokens()));
  const std::uint64_t overhead = s.system_tokens() + s.timestamp_tokens();
  EXPECT_DOUBLE_EQ(m.kv_fraction(), predict_decode_kv_fraction(8, 64, 2, 4, overhead));
  for (const auto& layer : m.layers) EXPECT_NO_THROW(layer.validate());
}

TEST(AssembleMixed, TopKZeroAndAll) {
  std::mt19937_64 rng(10);
  BiLevelKvStore s = synthetic_store(5, 12, rng);
  s.build_sparse(4);
  std::vector<RelevanceScore> scores;
  for (std::size_t id = 0; id < 5; ++id) scores.push_back({id, 1.0});
  const MixedCache none = assemble_mixed(s, scores, 0);
  EXPECT_TRUE(none.selection.empty());
  EXPECT_DOUBLE_EQ(none.visual_fraction(), 0.25);
  const MixedCache all = assemble_mixed(s, scores, 99);
  EXPECT_EQ(all.selection.size(), 5u);
  EXPECT_DOUBLE_EQ(all.kv_fraction(), 1.0);
  // All-dense cache is the merged prefill store.
  const KvLayers* parts[] = {&s.system_kvs, &s.timestamp_kvs, &s.dense.at(0), &s.dense.at(1), &s.dense.at(2),
                             &s.dense.at(3), &s.dense.at(4)};
  const KvLayers merged = merge_layers(parts);
  EXPECT_EQ(all.layers[0].keys, merged[0].keys);
  EXPECT_EQ(all.layers[0].positions, merged[0].positions);
  EXPECT_THROW(assemble_mixed(s, scores, -1), std::invalid_argument);
}

TEST(AssembleMixed, TiesGoToLowerChunkIdAndNanLast) {
  std::mt19937_64 rng(11);
  BiLevelKvStore s = synthetic_store(4, 4, rng);
  s.build_sparse(2);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<RelevanceScore> scores{{0, nan}, {1, 0.5}, {2, 0.5}, {3, 0.5}};
  EXPECT_EQ(assemble_mixed(s, scores, 2).selection, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(assemble_mixed(s, scores, 3).selection, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(AssembleMixed, SelectionInvariantUnderPositiveScaling) {
  std::mt19937_64 rng(12);
  BiLevelKvStore s = synthetic_store(10, 4, rng);
  s.build_sparse(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<RelevanceScore> scores, scaled;
    const double factor = std::exp(u(rng) * 5.0);
    for (std::size_t id = 0; id < 10; ++id) {
      const double v = u(rng);
      scores.push_back({id, v});
      scaled.push_back({id, v * factor});
    }
    const auto k = static_cast<std::int64_t>(rng() % 11);
    EXPECT_EQ(assemble_mixed(s, scores, k).selection, assemble_mixed(s, scaled, k).selection);
  }
}

TEST(AssembleMixed, CacheSizeFormulaRandomized) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 8, c = 1 + rng() % 20, p = 1 + rng() % 8;
    const auto k = static_cast<std::int64_t>(rng() % (n + 2));
    BiLevelKvStore s = synthetic_store(n, c, rng);
    s.build_sparse(p);
    std::vector<RelevanceScore> scores;
    for (std::size_t id = 0; id < n; ++id) scores.push_back({id, static_cast<double>(rng() % 5)});
    const MixedCache m = assemble_mixed(s, scores, k);
    EXPECT_EQ(m.visual_tokens(), predict_mixed_visual_tokens(n, c, static_cast<std::uint64_t>(k), p));
    EXPECT_EQ(m.selection.size(), std::min<std::size_t>(n, static_cast<std::size_t>(k)));
    EXPECT_EQ(kv_tokens(m.layers), m.total_tokens());
  }
}

TEST(BuildSparse, ShiftsPooledPositionOffTimestamp) {
  // Chunk tokens at 3,4 then 6,7 around a timestamp at 5: mean of {4,6} would be 5.
  std::mt19937_64 rng(14);
  BiLevelKvStore s(1, 2, 3);
  s.set_system(KvLayers{random_kv(2, 3, {0, 1}, rng)});
  s.append_timestamps(KvLayers{random_kv(2, 3, {2}, rng)});
  s.append_timestamps(KvLayers{random_kv(2, 3, {5}, rng)});
  s.set_dense(0, TokenRange{2, 8}, KvLayers{random_kv(2, 3, {3, 4, 6, 7}, rng)});
  s.build_sparse(4);
  EXPECT_EQ(s.sparse.at(0)[0].positions, std::vector<Position>{4});
  EXPECT_NO_THROW(s.validate());
  s.build_sparse(2);
  EXPECT_EQ(s.sparse.at(0)[0].positions, (std::vector<Position>{3, 6}));
}

TEST(Decode, AllDenseSingleChunkMatchesFullOracleGreedy) {
  const ModelBundle m = init_model(ModelConfig::make(2, 2, 8, 32, 64, 5));
  const VocabLayout vocab = VocabLayout::for_vocab(64);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SequenceLayout l = testing::random_layout(vocab, 2, 4, 3, 3, seed);
    PrefillOutput out = run_prefill(m, l, ChunkConfig{4, 4, true}, PrefillOptions{false});
    out.store.build_sparse(2);
    const std::vector<RelevanceScore> scores{{0, 0.0}};
    const auto query = std::span(l.tokens).subspan(static_cast<std::size_t>(l.prefix_end()));
    const DecodeResult r = decode(m, assemble_mixed(out.store, scores, 1), query, l.prefix_end(), 5);
    EXPECT_EQ(r.generated, full_oracle_greedy(m, l.tokens, 5)) << "seed " << seed;
    const Logits ref = full_oracle(m, l.tokens);
    for (std::size_t i = 0; i < query.size(); ++i) {
      const auto row = ref.row(static_cast<std::size_t>(l.prefix_end()) + i);
      for (std::size_t v = 0; v < row.size(); ++v) ASSERT_NEAR(r.query_logits.row(i)[v], row[v], 1e-5);
    }
  }
}

TEST(Decode, ZeroNewTokensAndCosts) {
  const ModelBundle m = init_model(ModelConfig::make(2, 2, 8, 32, 64, 5));
  const SequenceLayout l = testing::random_layout(VocabLayout::for_vocab(64), 2, 8, 4, 2, 3);
  PrefillOutput out = run_prefill(m, l, ChunkConfig{2, 2, true}, PrefillOptions{false});
  out.store.build_sparse(4);
  std::vector<RelevanceScore> scores;
  for (std::size_t id = 0; id < out.store.n_chunks(); ++id) scores.push_back({id, -static_cast<double>(id)});
  const MixedCache cache = assemble_mixed(out.store, scores, 2);
  const auto query = std::span(l.tokens).subspan(static_cast<std::size_t>(l.prefix_end()));
  const DecodeResult none = decode(m, cache, query, l.prefix_end(), 0);
  EXPECT_TRUE(none.generated.empty());
  EXPECT_EQ(none.query_logits.rows, query.size());

  const DecodeResult r = decode(m, cache, query, l.prefix_end(), 4);
  EXPECT_EQ(r.generated.size(), 4u);
  EXPECT_EQ(r.step_logits.rows, 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(greedy_token(r.step_logits.row(i)), r.generated[i]);
  const auto predicted = predict_decode_flops(cache.total_tokens(), query.size(), 4, ModelDims::from(m.config));
  EXPECT_EQ(r.cost.attn_score_flops, predicted.attn_score);
  EXPECT_EQ(r.cost.total_flops(), predicted.total());
  EXPECT_EQ(r.cost.kv_tokens_loaded_decode, cache.total_tokens());
  EXPECT_EQ(r.cost.kv_tokens_peak_resident, cache.total_tokens() + query.size() + 3);
  EXPECT_THROW(decode(m, cache, {}, l.prefix_end(), 1), std::invalid_argument);
}

TEST(StoreIo, RoundTrip) {
  std::mt19937_64 rng(15);
  BiLevelKvStore s = synthetic_store(3, 5, rng);
  s.build_sparse(2);
  const auto dir = std::filesystem::temp_directory_path() / "chunkkv_store_test";
  std::filesystem::remove_all(dir);
  save_store(s, dir, 0xABCDEFull);
  std::uint64_t checksum = 0;
  const BiLevelKvStore back = load_store(dir, &checksum);
  EXPECT_EQ(checksum, 0xABCDEFull);
  EXPECT_EQ(back.pool_factor, 2u);
  EXPECT_EQ(back.chunk_token_ranges, s.chunk_token_ranges);
  for (std::size_t id = 0; id < 3; ++id) {
    EXPECT_EQ(back.dense.at(id)[0].keys, s.dense.at(id)[0].keys);
    EXPECT_EQ(back.sparse.at(id)[0].values, s.sparse.at(id)[0].values);
    EXPECT_EQ(back.sparse.at(id)[0].positions, s.sparse.at(id)[0].positions);
  }
  EXPECT_EQ(back.timestamp_kvs[0].keys, s.timestamp_kvs[0].keys);
  EXPECT_EQ(back.system_kvs[0].positions, s.system_kvs[0].positions);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace chunkkv
