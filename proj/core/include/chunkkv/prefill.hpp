// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "chunkkv/cost_meter.hpp"
#include "chunkkv/kv_store.hpp"
#include "chunkkv/model.hpp"
#include "chunkkv/sequence.hpp"

namespace chunkkv {

/// Sliding chunk window, in whole groups (a timestamp token plus its visual tokens).
struct ChunkConfig {
  std::size_t window_groups = 8;
  std::size_t step_groups = 4;
  bool keep_timestamp_history = true;

  /// Token-denominated constructor; both sizes must be multiples of the group length.
  static ChunkConfig from_tokens(std::size_t window_tokens, std::size_t step_tokens,
                                 std::size_t tokens_per_group, bool keep_timestamp_history = true);

  std::size_t window_tokens(std::size_t tokens_per_group) const {
    return window_groups * (1 + tokens_per_group);
  }
  std::size_t step_tokens(std::size_t tokens_per_group) const {
    return step_groups * (1 + tokens_per_group);
  }

  void validate() const;
};

/// Window i covers groups [i*step, i*step + window). Its new part is what the
/// previous window did not cover; the rest is overlap re-attended as context.
struct ChunkSpan {
  std::size_t chunk_id = 0;
  std::size_t first_group = 0;          // new groups [first_group, end_group)
  std::size_t end_group = 0;
  std::size_t overlap_first_group = 0;  // overlap groups [overlap_first_group, first_group)
  TokenRange new_range;
  TokenRange overlap_range;
};

struct ChunkPlan {
  std::vector<ChunkSpan> chunks;
  std::size_t window_groups = 0;
  std::size_t step_groups = 0;
  std::size_t tokens_per_group = 0;
  std::size_t system_len = 0;
  bool keep_timestamp_history = true;

  std::size_t window_tokens() const { return window_groups * (1 + tokens_per_group); }
  std::size_t step_tokens() const { return step_groups * (1 + tokens_per_group); }
};

ChunkPlan plan_chunks(const SequenceLayout& layout, const ChunkConfig& config);

/// Each new-range token of the chunk sees: system tokens, timestamps before the
/// window (when history is kept), the overlap range, and earlier new tokens.
VisibilitySpec chunk_visibility(const ChunkPlan& plan, std::size_t chunk_id,
                                const SequenceLayout& layout);

/// Writes chunk ids into the Visual roles of `layout`.
void assign_chunks(SequenceLayout& layout, const ChunkPlan& plan);

struct PrefillOptions {
  bool keep_logits = true;
};

struct PrefillOutput {
  BiLevelKvStore store;  // dense level populated
  CostReport cost;
  ChunkPlan plan;
  Logits logits;  // rows for every prefilled token in position order (when kept)
};

/// Encodes the system prompt, then each chunk in order against system KVs,
/// historical timestamp KVs and the overlap KVs. Query tokens are not prefilled.
/// Overlap tokens are context only: each token's stored KV comes from the chunk
/// that encoded it as new.
PrefillOutput run_prefill(const ModelBundle& model, const SequenceLayout& layout,
                          const ChunkConfig& config, const PrefillOptions& options = {});

}  // namespace chunkkv
