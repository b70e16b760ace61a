// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/cost_model.hpp"

#include <algorithm>
#include <stdexcept>

namespace chunkkv {

ModelDims ModelDims::from(const ModelConfig& c) {
  return {c.num_layers, c.num_heads, c.head_dim, c.hidden_dim, c.ffn_dim, c.vocab_size};
}

LayoutSummary LayoutSummary::from(const SequenceLayout& layout) {
  return {layout.system_len(), layout.n_groups(), layout.tokens_per_group};
}

FlopBreakdown flops_for(std::uint64_t pairs, std::uint64_t tokens, const ModelDims& m) {
  const std::uint64_t head_pairs = pairs * m.heads * m.layers;
  FlopBreakdown f;
  f.attn_score = 2 * m.head_dim * head_pairs;
  f.attn_weighted_sum = 2 * m.head_dim * head_pairs;
  f.projection = tokens * (8 * m.layers * m.hidden * m.hidden + 2 * m.hidden * m.vocab);
  f.ffn = tokens * 4 * m.layers * m.hidden * m.ffn;
  f.other = 4 * head_pairs + tokens * ((2 * m.layers + 1) * 4 * m.hidden + 4 * m.layers * m.ffn);
  return f;
}

namespace {

// Causal pairs for n new tokens that all see `ctx` context tokens.
std::uint64_t segment_pairs(std::uint64_t ctx, std::uint64_t n) { return n * ctx + n * (n + 1) / 2; }

template <typename Fn>
void for_each_chunk(const LayoutSummary& s, const ChunkConfig& cfg, Fn&& fn) {
  cfg.validate();
  const std::uint64_t w = cfg.window_groups;
  const std::uint64_t st = cfg.step_groups;
  const std::uint64_t g = s.n_groups;
  if (g == 0) return;
  const std::uint64_t chunks = 1 + (g > w ? (g - w + st - 1) / st : 0);
  for (std::uint64_t i = 0; i < chunks; ++i) {
    const std::uint64_t new_begin = i == 0 ? 0 : w + (i - 1) * st;
    const std::uint64_t new_end = std::min(g, w + i * st);
    const std::uint64_t overlap_begin = i * st;
    fn(new_end - new_begin, new_begin - overlap_begin, overlap_begin);
  }
}

}  // namespace

FlopBreakdown predict_prefill_flops(const LayoutSummary& s, const ChunkConfig& cfg, const ModelDims& m) {
  const std::uint64_t gt = 1 + s.tokens_per_group;
  std::uint64_t pairs = segment_pairs(0, s.system_len);
  for_each_chunk(s, cfg, [&](std::uint64_t new_groups, std::uint64_t overlap_groups, std::uint64_t before) {
    const std::uint64_t hist = cfg.keep_timestamp_history ? before : 0;
    pairs += segment_pairs(s.system_len + hist + overlap_groups * gt, new_groups * gt);
  });
  return flops_for(pairs, s.prefix_tokens(), m);
}

FlopBreakdown predict_full_prefill_flops(std::uint64_t n, const ModelDims& m) {
  return flops_for(segment_pairs(0, n), n, m);
}

FlopBreakdown predict_decode_flops(std::uint64_t cache, std::uint64_t query, std::uint64_t max_new,
                                   const ModelDims& m) {
  if (query == 0) throw std::invalid_argument("decode prediction needs a non-empty query");
  std::uint64_t pairs = segment_pairs(cache, query);
  const std::uint64_t steps = max_new > 0 ? max_new - 1 : 0;
  for (std::uint64_t j = 0; j < steps; ++j) pairs += cache + query + j + 1;
  return flops_for(pairs, query + steps, m);
}

ResidencyPrediction predict_prefill_residency(const LayoutSummary& s, const ChunkConfig& cfg) {
  const std::uint64_t gt = 1 + s.tokens_per_group;
  ResidencyPrediction r;
  r.peak_resident_tokens = s.system_len;
  r.peak_window_tokens = s.system_len;
  for_each_chunk(s, cfg, [&](std::uint64_t new_groups, std::uint64_t overlap_groups, std::uint64_t before) {
    const std::uint64_t hist = cfg.keep_timestamp_history ? before : 0;
    const std::uint64_t window = (new_groups + overlap_groups) * gt;
    r.peak_window_tokens = std::max(r.peak_window_tokens, window);
    r.peak_resident_tokens = std::max(r.peak_resident_tokens, s.system_len + hist + window);
  });
  return r;
}

std::uint64_t predict_mixed_visual_tokens(std::uint64_t n, std::uint64_t c, std::uint64_t k,
                                          std::uint64_t p) {
  if (p == 0) throw std::invalid_argument("pool factor must be at least 1");
  k = std::min(k, n);
  return k * c + (n - k) * ((c + p - 1) / p);
}

double predict_decode_kv_fraction(std::uint64_t n, std::uint64_t c, std::uint64_t k, std::uint64_t p,
                                  std::uint64_t overhead) {
  const std::uint64_t full = n * c + overhead;
  if (full == 0) return 1.0;
  return static_cast<double>(predict_mixed_visual_tokens(n, c, k, p) + overhead) /
         static_cast<double>(full);
}

double predict_decode_kv_fraction(std::span<const ChunkLoad> chunks, std::uint64_t p,
                                  std::uint64_t overhead) {
  if (p == 0) throw std::invalid_argument("pool factor must be at least 1");
  std::uint64_t full = overhead;
  std::uint64_t loaded = overhead;
  for (const ChunkLoad& c : chunks) {
    full += c.dense_tokens;
    loaded += c.dense ? c.dense_tokens : (c.dense_tokens + p - 1) / p;
  }
  return full == 0 ? 1.0 : static_cast<double>(loaded) / static_cast<double>(full);
}

}  // namespace chunkkv
