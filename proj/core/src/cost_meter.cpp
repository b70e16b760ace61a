// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/cost_meter.hpp"

#include <algorithm>
#include <stdexcept>

#include "chunkkv/model.hpp"

namespace chunkkv {

std::string to_string(Phase phase) { return phase == Phase::Prefill ? "prefill" : "decode"; }

void CostReport::merge(const CostReport& other) {
  attn_score_flops += other.attn_score_flops;
  attn_weighted_sum_flops += other.attn_weighted_sum_flops;
  projection_flops += other.projection_flops;
  ffn_flops += other.ffn_flops;
  other_flops += other.other_flops;
  kv_tokens_peak_resident = std::max(kv_tokens_peak_resident, other.kv_tokens_peak_resident);
  kv_bytes_peak_resident = std::max(kv_bytes_peak_resident, other.kv_bytes_peak_resident);
  kv_tokens_peak_window = std::max(kv_tokens_peak_window, other.kv_tokens_peak_window);
  kv_tokens_loaded_decode += other.kv_tokens_loaded_decode;
  kv_bytes_loaded_decode += other.kv_bytes_loaded_decode;
}

nlohmann::json to_json(const CostReport& r) {
  return {
      {"phase", to_string(r.phase)},
      {"attn_score_flops", r.attn_score_flops},
      {"attn_weighted_sum_flops", r.attn_weighted_sum_flops},
      {"projection_flops", r.projection_flops},
      {"ffn_flops", r.ffn_flops},
      {"other_flops", r.other_flops},
      {"total_flops", r.total_flops()},
      {"kv_tokens_peak_resident", r.kv_tokens_peak_resident},
      {"kv_bytes_peak_resident", r.kv_bytes_peak_resident},
      {"kv_tokens_peak_window", r.kv_tokens_peak_window},
      {"kv_tokens_loaded_decode", r.kv_tokens_loaded_decode},
      {"kv_bytes_loaded_decode", r.kv_bytes_loaded_decode},
  };
}

CostReport cost_report_from_json(const nlohmann::json& j) {
  CostReport r;
  const std::string phase = j.at("phase").get<std::string>();
  if (phase == "prefill") {
    r.phase = Phase::Prefill;
  } else if (phase == "decode") {
    r.phase = Phase::Decode;
  } else {
    throw std::invalid_argument("CostReport: unknown phase '" + phase + "'");
  }
  j.at("attn_score_flops").get_to(r.attn_score_flops);
  j.at("attn_weighted_sum_flops").get_to(r.attn_weighted_sum_flops);
  j.at("projection_flops").get_to(r.projection_flops);
  j.at("ffn_flops").get_to(r.ffn_flops);
  j.at("other_flops").get_to(r.other_flops);
  j.at("kv_tokens_peak_resident").get_to(r.kv_tokens_peak_resident);
  j.at("kv_bytes_peak_resident").get_to(r.kv_bytes_peak_resident);
  j.at("kv_tokens_peak_window").get_to(r.kv_tokens_peak_window);
  j.at("kv_tokens_loaded_decode").get_to(r.kv_tokens_loaded_decode);
  j.at("kv_bytes_loaded_decode").get_to(r.kv_bytes_loaded_decode);
  return r;
}

std::uint64_t kv_bytes_for_tokens(const ModelConfig& c, std::uint64_t tokens) {
  return tokens * c.num_layers * 2 * c.num_heads * c.head_dim * sizeof(float);
}

CostMeter::CostMeter(const ModelConfig& c, Phase phase)
    : layers_(c.num_layers),
      heads_(c.num_heads),
      head_dim_(c.head_dim),
      hidden_(c.hidden_dim),
      ffn_(c.ffn_dim),
      vocab_(c.vocab_size),
      bytes_per_token_(kv_bytes_for_tokens(c, 1)) {
  report_.phase = phase;
}

void CostMeter::count_attention(std::uint64_t pairs) {
  const std::uint64_t per_head = pairs * heads_;
  report_.attn_score_flops += 2 * head_dim_ * per_head;
  report_.attn_weighted_sum_flops += 2 * head_dim_ * per_head;
  report_.other_flops += 4 * per_head;
}

void CostMeter::count_token_linear(std::uint64_t n) {
  report_.projection_flops += n * (layers_ * 4 * 2 * hidden_ * hidden_ + 2 * hidden_ * vocab_);
  report_.ffn_flops += n * layers_ * 2 * 2 * hidden_ * ffn_;
  report_.other_flops += n * ((2 * layers_ + 1) * 4 * hidden_ + layers_ * 4 * ffn_);
}

void CostMeter::observe_resident(std::uint64_t tokens) {
  report_.kv_tokens_peak_resident = std::max(report_.kv_tokens_peak_resident, tokens);
  report_.kv_bytes_peak_resident = report_.kv_tokens_peak_resident * bytes_per_token_;
}

void CostMeter::observe_window(std::uint64_t tokens) {
  report_.kv_tokens_peak_window = std::max(report_.kv_tokens_peak_window, tokens);
}

void CostMeter::count_loaded(std::uint64_t tokens) {
  report_.kv_tokens_loaded_decode += tokens;
  report_.kv_bytes_loaded_decode += tokens * bytes_per_token_;
}

}  // namespace chunkkv
