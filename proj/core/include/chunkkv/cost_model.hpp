// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "chunkkv/model.hpp"
#include "chunkkv/prefill.hpp"
#include "chunkkv/sequence.hpp"

namespace chunkkv {

// Closed-form counterparts of what CostMeter measures. These never run the
// model; they recompute chunk geometry from the layout summary alone.

struct ModelDims {
  std::uint64_t layers = 0;
  std::uint64_t heads = 0;
  std::uint64_t head_dim = 0;
  std::uint64_t hidden = 0;
  std::uint64_t ffn = 0;
  std::uint64_t vocab = 0;

  static ModelDims from(const ModelConfig& config);
};

struct LayoutSummary {
  std::uint64_t system_len = 0;
  std::uint64_t n_groups = 0;
  std::uint64_t tokens_per_group = 0;

  static LayoutSummary from(const SequenceLayout& layout);
  std::uint64_t prefix_tokens() const { return system_len + n_groups * (1 + tokens_per_group); }
};

struct FlopBreakdown {
  std::uint64_t attn_score = 0;
  std::uint64_t attn_weighted_sum = 0;
  std::uint64_t projection = 0;
  std::uint64_t ffn = 0;
  std::uint64_t other = 0;

  std::uint64_t attention() const { return attn_score + attn_weighted_sum; }
  std::uint64_t total() const { return attention() + projection + ffn; }
  friend bool operator==(const FlopBreakdown&, const FlopBreakdown&) = default;
};

/// From (query, key) pair count summed over segments (one layer) and token count.
FlopBreakdown flops_for(std::uint64_t attention_pairs, std::uint64_t tokens, const ModelDims& dims);

FlopBreakdown predict_prefill_flops(const LayoutSummary& layout, const ChunkConfig& config,
                                    const ModelDims& dims);

/// Single causal pass over `n_tokens`.
FlopBreakdown predict_full_prefill_flops(std::uint64_t n_tokens, const ModelDims& dims);

/// Query encoding over a cache of `cache_tokens`, then max_new_tokens greedy
/// steps (the last generated token is not fed back).
FlopBreakdown predict_decode_flops(std::uint64_t cache_tokens, std::uint64_t query_tokens,
                                   std::uint64_t max_new_tokens, const ModelDims& dims);

struct ResidencyPrediction {
  std::uint64_t peak_resident_tokens = 0;  // context + segment, any forward
  std::uint64_t peak_window_tokens = 0;    // overlap + new, any chunk
};

ResidencyPrediction predict_prefill_residency(const LayoutSummary& layout, const ChunkConfig& config);

/// Visual tokens in a mixed cache of n equal chunks of c tokens with k dense:
/// k*c + (n-k)*ceil(c/p).
std::uint64_t predict_mixed_visual_tokens(std::uint64_t n_chunks, std::uint64_t chunk_tokens,
                                          std::uint64_t top_k, std::uint64_t pool_factor);

/// Equal-chunk decode KV fraction with `overhead_tokens` always-dense tokens.
double predict_decode_kv_fraction(std::uint64_t n_chunks, std::uint64_t chunk_tokens,
                                  std::uint64_t top_k, std::uint64_t pool_factor,
                                  std::uint64_t overhead_tokens = 0);

struct ChunkLoad {
  std::uint64_t dense_tokens = 0;
  bool dense = false;
};

/// General form over chunks of any size.
double predict_decode_kv_fraction(std::span<const ChunkLoad> chunks, std::uint64_t pool_factor,
                                  std::uint64_t overhead_tokens = 0);

}  // namespace chunkkv
