// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace chunkkv {

struct ModelConfig;

enum class Phase { Prefill, Decode };

std::string to_string(Phase phase);

// FLOP convention: one multiply-accumulate counts as 2 FLOPs.
//   attention score      2*d per (query, key, head)
//   weighted value sum   2*d per (query, key, head)
//   projections          Q/K/V/O: 4 * 2*hidden*hidden per token per layer,
//                        unembedding: 2*hidden*vocab per token
//   feed-forward         2 * 2*hidden*ffn per token per layer
//   other                softmax 4 per (query, key, head), RMSNorm 4*hidden per
//                        application, SiLU 4*ffn per token per layer
// "other" is reported but excluded from total_flops().
struct CostReport {
  Phase phase = Phase::Prefill;
  std::uint64_t attn_score_flops = 0;
  std::uint64_t attn_weighted_sum_flops = 0;
  std::uint64_t projection_flops = 0;
  std::uint64_t ffn_flops = 0;
  std::uint64_t other_flops = 0;

  // KV residency in tokens (per layer) and bytes (all layers, K and V, fp32).
  std::uint64_t kv_tokens_peak_resident = 0;
  std::uint64_t kv_bytes_peak_resident = 0;
  // Prefill only: largest chunk working set (overlap + new tokens), excluding
  // the persistent system and timestamp context.
  std::uint64_t kv_tokens_peak_window = 0;
  // Decode only: KV loaded from the offline store into the mixed cache.
  std::uint64_t kv_tokens_loaded_decode = 0;
  std::uint64_t kv_bytes_loaded_decode = 0;

  std::uint64_t attention_flops() const { return attn_score_flops + attn_weighted_sum_flops; }
  std::uint64_t total_flops() const {
    return attn_score_flops + attn_weighted_sum_flops + projection_flops + ffn_flops;
  }

  /// Adds counters, takes the max of peaks. Associative and commutative.
  void merge(const CostReport& other);

  friend bool operator==(const CostReport&, const CostReport&) = default;
};

nlohmann::json to_json(const CostReport& report);
CostReport cost_report_from_json(const nlohmann::json& j);

/// Counter sink threaded through the model forwards.
class CostMeter {
 public:
  CostMeter(const ModelConfig& config, Phase phase);

  void count_attention(std::uint64_t query_key_pairs);  // summed over heads by the meter
  void count_token_linear(std::uint64_t n_tokens);      // projections, FFN, norms, lm head
  void observe_resident(std::uint64_t tokens);
  void observe_window(std::uint64_t tokens);
  void count_loaded(std::uint64_t tokens);

  std::uint64_t bytes_per_token() const { return bytes_per_token_; }
  const CostReport& report() const { return report_; }
  CostReport& report() { return report_; }

 private:
  std::uint64_t layers_;
  std::uint64_t heads_;
  std::uint64_t head_dim_;
  std::uint64_t hidden_;
  std::uint64_t ffn_;
  std::uint64_t vocab_;
  std::uint64_t bytes_per_token_;
  CostReport report_;
};

/// KV bytes for `tokens` tokens: tokens * layers * 2 * heads * head_dim * 4.
std::uint64_t kv_bytes_for_tokens(const ModelConfig& config, std::uint64_t tokens);

}  // namespace chunkkv
