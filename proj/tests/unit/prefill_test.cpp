// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "chunkkv/cost_model.hpp"
#include "chunkkv/prefill.hpp"
#include "test_support.hpp"

namespace chunkkv {
namespace {

using testing::random_layout;

const VocabLayout kVocab = VocabLayout::for_vocab(64);

SequenceLayout layout_with(std::size_t groups, std::size_t system_len = 2, std::size_t tpg = 3,
                           std::uint64_t seed = 1) {
  return random_layout(kVocab, system_len, groups, tpg, 0, seed);
}

std::vector<std::pair<std::size_t, std::size_t>> new_groups(const ChunkPlan& plan) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& c : plan.chunks) out.emplace_back(c.first_group, c.end_group);
  return out;
}

TEST(PlanChunks, StepEqualsWindowHasNoOverlap) {
  const ChunkPlan plan = plan_chunks(layout_with(8), ChunkConfig{4, 4, true});
  ASSERT_EQ(plan.chunks.size(), 2u);
  for (const auto& c : plan.chunks) EXPECT_TRUE(c.overlap_range.empty());
  EXPECT_EQ(new_groups(plan), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 4}, {4, 8}}));
}

TEST(PlanChunks, SlidingWindowEnumeratesNewAndOverlapGroups) {
  const SequenceLayout l = layout_with(8);
  const ChunkPlan plan = plan_chunks(l, ChunkConfig{4, 2, true});
  EXPECT_EQ(new_groups(plan), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 4}, {4, 6}, {6, 8}}));
  EXPECT_TRUE(plan.chunks[0].overlap_range.empty());
  EXPECT_EQ(plan.chunks[1].overlap_first_group, 2u);
  EXPECT_EQ(plan.chunks[2].overlap_first_group, 4u);
  const auto gt = static_cast<Position>(l.group_tokens());
  EXPECT_EQ(plan.chunks[1].overlap_range, (TokenRange{l.group_begin(2), l.group_begin(2) + 2 * gt}));
  EXPECT_EQ(plan.chunks[2].new_range, (TokenRange{l.group_begin(6), l.prefix_end()}));
}

TEST(PlanChunks, WideWindowGivesSingleChunk) {
  const SequenceLayout l = layout_with(5);
  const ChunkPlan plan = plan_chunks(l, ChunkConfig{9, 3, true});
  ASSERT_EQ(plan.chunks.size(), 1u);
  EXPECT_EQ(plan.chunks[0].new_range, (TokenRange{l.group_begin(0), l.prefix_end()}));
}

TEST(PlanChunks, InvariantsOverRandomConfigs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t groups = 1 + rng() % 30;
    const std::size_t w = 1 + rng() % 8;
    const std::size_t s = 1 + rng() % w;
    const SequenceLayout l = layout_with(groups, 1 + rng() % 3, 1 + rng() % 4, rng());
    const ChunkPlan plan = plan_chunks(l, ChunkConfig{w, s, rng() % 2 == 0});
    ASSERT_EQ(plan.chunks.size(), 1 + (groups > w ? (groups - w + s - 1) / s : 0));
    Position next = l.group_begin(0);
    for (std::size_t i = 0; i < plan.chunks.size(); ++i) {
      const ChunkSpan& c = plan.chunks[i];
      ASSERT_EQ(c.chunk_id, i);
      ASSERT_EQ(c.new_range.begin, next);
      ASSERT_FALSE(c.new_range.empty());
      next = c.new_range.end;
      if (i == 0) {
        ASSERT_TRUE(c.overlap_range.empty());
        continue;
      }
      const ChunkSpan& prev = plan.chunks[i - 1];
      const Position prev_begin = prev.overlap_range.empty() ? prev.new_range.begin : prev.overlap_range.begin;
      ASSERT_GE(c.overlap_range.begin, prev_begin);
      ASSERT_LE(c.overlap_range.end, prev.new_range.end);
      ASSERT_EQ(c.overlap_range.end, c.new_range.begin);
      ASSERT_EQ(c.overlap_range.size(), (w - s) * l.group_tokens());
    }
    ASSERT_EQ(next, l.prefix_end());
  }
}

TEST(ChunkConfig, Errors) {
  EXPECT_THROW(ChunkConfig::from_tokens(3, 3, 4), std::invalid_argument);   // smaller than a group
  EXPECT_THROW(ChunkConfig::from_tokens(10, 7, 4), std::invalid_argument);  // misaligned step
  EXPECT_THROW(ChunkConfig::from_tokens(10, 15, 4), std::invalid_argument); // step above window
  EXPECT_THROW(ChunkConfig::from_tokens(10, 0, 4), std::invalid_argument);
  const ChunkConfig c = ChunkConfig::from_tokens(40, 20, 4);
  EXPECT_EQ(c.window_groups, 8u);
  EXPECT_EQ(c.step_groups, 4u);
  EXPECT_EQ(c.window_tokens(4), 40u);
  EXPECT_THROW(plan_chunks(layout_with(4), ChunkConfig{0, 0, true}), std::invalid_argument);
}

// Visible keys for a new-range token, built from roles alone.
std::vector<Position> expected_keys(const SequenceLayout& l, const ChunkSpan& c, Position q, bool history) {
  std::vector<Position> keys;
  const Position window_begin = c.overlap_range.empty() ? c.new_range.begin : c.overlap_range.begin;
  for (Position p = 0; p <= q; ++p) {
    const RoleKind kind = l.roles[static_cast<std::size_t>(p)].kind;
    const bool visible = kind == RoleKind::System ||
                         (history && kind == RoleKind::Timestamp && p < window_begin) ||
                         c.overlap_range.contains(p) || c.new_range.contains(p);
    if (visible) keys.push_back(p);
  }
  return keys;
}

TEST(ChunkVisibility, MatchesRoleBasedRule) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t w = 1 + rng() % 4;
    const bool history = trial % 2 == 0;
    const SequenceLayout l = layout_with(1 + rng() % 12, 1 + rng() % 3, 1 + rng() % 3, rng());
    const ChunkPlan plan = plan_chunks(l, ChunkConfig{w, 1 + rng() % w, history});
    for (const ChunkSpan& c : plan.chunks) {
      const VisibilitySpec v = chunk_visibility(plan, c.chunk_id, l);
      ASSERT_EQ(v.keys.size(), c.new_range.size());
      for (Position q = c.new_range.begin; q < c.new_range.end; ++q) {
        ASSERT_EQ(v.keys[static_cast<std::size_t>(q - c.new_range.begin)], expected_keys(l, c, q, history));
      }
    }
  }
}

TEST(ChunkVisibility, FirstChunkSeesSystemAndItself) {
  const SequenceLayout l = layout_with(6);
  const ChunkPlan plan = plan_chunks(l, ChunkConfig{2, 1, true});
  const VisibilitySpec v = chunk_visibility(plan, 0, l);
  const auto& last = v.keys.back();
  EXPECT_EQ(last.size(), static_cast<std::size_t>(plan.chunks[0].new_range.end));
}

TEST(ChunkVisibility, HistoryTogglesOnlyTimestamps) {
  const SequenceLayout l = layout_with(8);
  const ChunkPlan with = plan_chunks(l, ChunkConfig{2, 2, true});
  const ChunkPlan without = plan_chunks(l, ChunkConfig{2, 2, false});
  const VisibilitySpec a = chunk_visibility(with, 3, l);
  const VisibilitySpec b = chunk_visibility(without, 3, l);
  const auto& ka = a.keys.front();
  const auto& kb = b.keys.front();
  std::vector<Position> extra;
  std::set_difference(ka.begin(), ka.end(), kb.begin(), kb.end(), std::back_inserter(extra));
  EXPECT_EQ(extra, (std::vector<Position>{l.group_begin(0), l.group_begin(1), l.group_begin(2), l.group_begin(3),
                                          l.group_begin(4), l.group_begin(5)}));
  for (Position p : ka) {
    const auto kind = l.roles[static_cast<std::size_t>(p)].kind;
    if (p < l.group_begin(6)) EXPECT_NE(kind, RoleKind::Visual);
  }
}

TEST(RunPrefill, SingleChunkMatchesFullOracle) {
  const ModelBundle m = init_model(ModelConfig::make(2, 2, 8, 32, 64, 4));
  const SequenceLayout l = layout_with(6, 2, 3, 9);
  const PrefillOutput out = run_prefill(m, l, ChunkConfig{6, 6, true});
  const Logits ref = full_oracle(m, std::span(l.tokens).first(static_cast<std::size_t>(l.prefix_end())));
  ASSERT_EQ(out.logits.rows, ref.rows);
  for (std::size_t i = 0; i < ref.data.size(); ++i) ASSERT_NEAR(out.logits.data[i], ref.data[i], 1e-5);
}

TEST(RunPrefill, StoreHoldsOneKvPerToken) {
  const ModelBundle m = init_model(ModelConfig::make(2, 2, 8, 32, 64, 4));
  SequenceLayout l = random_layout(kVocab, 3, 9, 2, 4, 10);
  const PrefillOutput out = run_prefill(m, l, ChunkConfig{3, 2, true});
  const BiLevelKvStore& s = out.store;
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.system_tokens(), 3u);
  EXPECT_EQ(s.timestamp_tokens(), 9u);
  EXPECT_EQ(s.dense_visual_tokens(), 18u);
  for (std::size_t layer = 0; layer < m.config.num_layers; ++layer) {
    std::vector<Position> all = s.system_kvs[layer].positions;
    all.insert(all.end(), s.timestamp_kvs[layer].positions.begin(), s.timestamp_kvs[layer].positions.end());
    for (const auto& [id, kv] : s.dense) all.insert(all.end(), kv[layer].positions.begin(), kv[layer].positions.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, testing::iota_positions(0, static_cast<std::size_t>(l.prefix_end())));
  }
  for (const auto& [id, kv] : s.dense) {
    for (Position p : kv[0].positions) EXPECT_EQ(l.roles[static_cast<std::size_t>(p)].kind, RoleKind::Visual);
  }
  assign_chunks(l, out.plan);
  for (const auto& [id, kv] : s.dense) {
    for (Position p : kv[0].positions) EXPECT_EQ(l.roles[static_cast<std::size_t>(p)].chunk_id, static_cast<std::int64_t>(id));
  }
}

TEST(RunPrefill, AttentionFlopsEqualVisibleKeyCount) {
  const ModelBundle m = init_model(ModelConfig::make(2, 3, 4, 16, 64, 4));
  for (bool history : {true, false}) {
    const SequenceLayout l = layout_with(11, 2, 3, 12);
    const ChunkConfig cfg{4, 3, history};
    const PrefillOutput out = run_prefill(m, l, cfg);
    std::uint64_t pairs = static_cast<std::uint64_t>(l.system_len() * (l.system_len() + 1) / 2);
    for (const ChunkSpan& c : out.plan.chunks) {
      for (const auto& keys : chunk_visibility(out.plan, c.chunk_id, l).keys) pairs += keys.size();
    }
    const std::uint64_t per_pair = 2 * m.config.head_dim * m.config.num_heads * m.config.num_layers;
    EXPECT_EQ(out.cost.attn_score_flops, pairs * per_pair);
    EXPECT_EQ(out.cost.attn_weighted_sum_flops, pairs * per_pair);
  }
}

TEST(RunPrefill, DoublingFramesRoughlyDoublesFlops) {
  const ModelBundle m = init_model(ModelConfig::make(2, 2, 8, 32, 64, 4));
  const auto a = run_prefill(m, layout_with(64, 2, 7), ChunkConfig{4, 2, false}, PrefillOptions{false});
  const auto b = run_prefill(m, layout_with(128, 2, 7), ChunkConfig{4, 2, false}, PrefillOptions{false});
  const double ratio = static_cast<double>(b.cost.total_flops()) / static_cast<double>(a.cost.total_flops());
  EXPECT_NEAR(ratio, 2.0, 0.1);  // within 5%
}

TEST(RunPrefill, PeakResidentBoundedByWindowPlusTimestamps) {
  const ModelBundle m = init_model(ModelConfig::make(1, 2, 4, 16, 64, 4));
  for (std::size_t groups : {8u, 16u, 32u}) {
    const SequenceLayout l = layout_with(groups, 2, 3);
    const ChunkConfig cfg{4, 2, true};
    const PrefillOutput out = run_prefill(m, l, cfg, PrefillOptions{false});
    const std::uint64_t bound = l.system_len() + l.n_groups() + cfg.window_tokens(l.tokens_per_group);
    EXPECT_LE(out.cost.kv_tokens_peak_resident, bound);
    EXPECT_EQ(out.cost.kv_tokens_peak_window, cfg.window_tokens(l.tokens_per_group));
  }
}

TEST(CostProperty, AttentionFlopsNonIncreasingInStep) {
  const ModelDims dims{2, 2, 8, 16, 32, 64};
  for (std::size_t groups : {7u, 20u, 64u, 129u}) {
    for (bool history : {true, false}) {
      const LayoutSummary s{3, groups, 5};
      for (std::size_t w = 1; w <= 12; ++w) {
        std::uint64_t prev = UINT64_MAX;
        for (std::size_t step = 1; step <= w; ++step) {
          const auto f = predict_prefill_flops(s, ChunkConfig{w, step, history}, dims).attention();
          EXPECT_LE(f, prev) << "groups " << groups << " window " << w << " step " << step;
          prev = f;
        }
      }
    }
  }
}

TEST(CostProperty, ChunkedNeverExceedsFull) {
  const ModelDims dims{2, 2, 8, 16, 32, 64};
  std::mt19937_64 rng(6);
  for (int i = 0; i < 300; ++i) {
    const LayoutSummary s{1 + rng() % 4, 1 + rng() % 60, 1 + rng() % 8};
    const std::size_t w = 1 + rng() % 10;
    const ChunkConfig cfg{w, 1 + rng() % w, rng() % 2 == 0};
    const auto chunked = predict_prefill_flops(s, cfg, dims).attention();
    const auto full = predict_full_prefill_flops(s.prefix_tokens(), dims).attention();
    const bool several = s.n_groups > w;
    if (several) {
      EXPECT_LT(chunked, full);
    } else {
      EXPECT_EQ(chunked, full);
    }
  }
}

}  // namespace
}  // namespace chunkkv
