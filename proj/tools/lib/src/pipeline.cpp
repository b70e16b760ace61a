// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/tools/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "chunkkv/checkpoint.hpp"
#include "chunkkv/cost_model.hpp"

namespace chunkkv::tools {

namespace {

using nlohmann::json;

json flops_json(const FlopBreakdown& f) {
  return {{"attn_score_flops", f.attn_score},
          {"attn_weighted_sum_flops", f.attn_weighted_sum},
          {"projection_flops", f.projection},
          {"ffn_flops", f.ffn},
          {"other_flops", f.other},
          {"total_flops", f.total()}};
}

double ratio(std::uint64_t a, std::uint64_t b) {
  return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
}

float max_abs_diff(const Logits& a, std::size_t a_row, const Logits& b, std::size_t b_row,
                   std::size_t rows) {
  float worst = 0.0f;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto x = a.row(a_row + r);
    const auto y = b.row(b_row + r);
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  }
  return worst;
}

}  // namespace

RunResult run_pipeline(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const ModelBundle model = load_model(config);
  SequenceLayout layout = load_layout(config, model.config);
  const std::size_t probe_layer = config.bilevel.probe_layer.value_or(default_probe_layer(model.config));
  if (probe_layer >= model.config.num_layers) throw ConfigError("bilevel.probe_layer out of range");
  if (layout.query_len() == 0) throw ConfigError("the layout has no query tokens");

  PrefillOutput prefill = run_prefill(model, layout, config.chunk);
  assign_chunks(layout, prefill.plan);
  BiLevelKvStore& store = prefill.store;
  store.build_sparse(config.bilevel.pool_factor);
  store.validate();
  if (options.save_store_dir) save_store(store, *options.save_store_dir, model_checksum(model));

  const auto prefix_end = static_cast<std::size_t>(layout.prefix_end());
  const std::span<const TokenId> all_tokens(layout.tokens);
  const auto prefix = all_tokens.first(prefix_end);
  const auto query = all_tokens.subspan(prefix_end);

  std::vector<RelevanceScore> scores;
  if (store.n_chunks() > 0) {
    const QueryRepr repr = probe_query(model, store, query, layout.prefix_end(), probe_layer);
    scores = score_chunks(store, repr, config.bilevel.oracle, probe_layer);
  }
  const MixedCache cache = assemble_mixed(store, scores, config.bilevel.top_k);
  const DecodeResult decoded =
      decode(model, cache, query, layout.prefix_end(), config.max_new_tokens);

  RunResult result;
  result.generated = decoded.generated;
  result.kv_fraction = cache.kv_fraction();
  std::vector<ChunkLoad> loads;
  for (const auto& [id, kvs] : store.dense) {
    loads.push_back({kv_tokens(kvs), std::binary_search(cache.selection.begin(), cache.selection.end(), id)});
  }
  result.kv_fraction_predicted = predict_decode_kv_fraction(
      loads, store.pool_factor, cache.system_tokens + cache.timestamp_tokens);

  const ModelDims dims = ModelDims::from(model.config);
  const LayoutSummary summary = LayoutSummary::from(layout);
  const FlopBreakdown predicted = predict_prefill_flops(summary, config.chunk, dims);
  const FlopBreakdown full = predict_full_prefill_flops(summary.prefix_tokens(), dims);
  const FlopBreakdown decode_predicted =
      predict_decode_flops(cache.total_tokens(), query.size(), config.max_new_tokens, dims);

  json chunks = json::array();
  for (const ChunkSpan& c : prefill.plan.chunks) {
    chunks.push_back({{"id", c.chunk_id},
                      {"new_range", {c.new_range.begin, c.new_range.end}},
                      {"overlap_range", {c.overlap_range.begin, c.overlap_range.end}}});
  }
  json audit = json::array();
  for (const RelevanceScore& s : scores) {
    audit.push_back({{"chunk_id", s.chunk_id},
                     {"score", s.score},
                     {"dense_tokens", store.dense_tokens(s.chunk_id)},
                     {"sparse_tokens", store.sparse_tokens(s.chunk_id)},
                     {"selected", std::binary_search(cache.selection.begin(), cache.selection.end(),
                                                     s.chunk_id)}});
  }

  json report = {
      {"config_hash", config_hash(config)},
      {"config", to_json(config)},
      {"model_checksum", hex64(model_checksum(model))},
      {"layout",
       {{"n_tokens", layout.size()},
        {"n_groups", layout.n_groups()},
        {"n_frames", layout.n_frames},
        {"effective_fps", layout.effective_fps},
        {"system_len", layout.system_len()},
        {"query_len", layout.query_len()},
        {"tokens_per_group", layout.tokens_per_group}}},
      {"plan",
       {{"n_chunks", prefill.plan.chunks.size()},
        {"window_groups", prefill.plan.window_groups},
        {"step_groups", prefill.plan.step_groups},
        {"timestamp_history", prefill.plan.keep_timestamp_history},
        {"chunks", chunks}}},
      {"prefill",
       {{"measured", to_json(prefill.cost)},
        {"predicted", flops_json(predicted)},
        {"full_attention_predicted", flops_json(full)},
        {"flops_ratio", ratio(prefill.cost.total_flops(), full.total())},
        {"attention_flops_ratio", ratio(prefill.cost.attention_flops(), full.attention())},
        {"prediction_matches", predicted.total() == prefill.cost.total_flops() &&
                                   predicted.attention() == prefill.cost.attention_flops()}}},
      {"bilevel",
       {{"pool_factor", store.pool_factor},
        {"top_k", config.bilevel.top_k},
        {"oracle", to_string(config.bilevel.oracle)},
        {"probe_layer", probe_layer},
        {"scores", audit},
        {"selection", cache.selection},
        {"kv_fraction", result.kv_fraction},
        {"kv_fraction_predicted", result.kv_fraction_predicted},
        {"visual_fraction", cache.visual_fraction()},
        {"cache_tokens",
         {{"system", cache.system_tokens},
          {"timestamp", cache.timestamp_tokens},
          {"dense_visual", cache.dense_visual_tokens},
          {"sparse_visual", cache.sparse_visual_tokens},
          {"all_dense_visual", cache.all_dense_visual_tokens}}}}},
      {"decode",
       {{"query", std::vector<TokenId>(query.begin(), query.end())},
        {"generated", decoded.generated},
        {"cost", to_json(decoded.cost)},
        {"predicted", flops_json(decode_predicted)}}},
  };

  const bool degenerate = prefill.plan.chunks.size() <= 1 &&
                          static_cast<std::size_t>(config.bilevel.top_k) >= store.n_chunks();
  if (degenerate) {
    std::vector<TokenId> prompt(all_tokens.begin(), all_tokens.end());
    const auto reference = full_oracle_greedy(model, prompt, config.max_new_tokens);
    const Logits oracle = full_oracle(model, prompt);
    const float prefill_diff = max_abs_diff(prefill.logits, 0, oracle, 0, prefix_end);
    const float query_diff = max_abs_diff(decoded.query_logits, 0, oracle, prefix_end, query.size());
    const float diff = std::max(prefill_diff, query_diff);
    result.oracle_equivalent = reference == decoded.generated && diff <= 1e-5f;
    report["oracle_equivalent"] = *result.oracle_equivalent;
    report["oracle_max_logit_diff"] = diff;
  } else {
    report["oracle_equivalent"] = nullptr;
  }
  result.report = std::move(report);
  return result;
}

}  // namespace chunkkv::tools
