// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/prefill.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace chunkkv {

ChunkConfig ChunkConfig::from_tokens(std::size_t window_tokens, std::size_t step_tokens,
                                     std::size_t tokens_per_group, bool keep_timestamp_history) {
  const std::size_t g = 1 + tokens_per_group;
  if (window_tokens < g) {
    throw std::invalid_argument("chunk window of " + std::to_string(window_tokens) +
                                " tokens is smaller than one group (" + std::to_string(g) + ")");
  }
  if (window_tokens % g != 0 || step_tokens % g != 0) {
    throw std::invalid_argument("chunk window and step must be multiples of the group length " +
                                std::to_string(g));
  }
  ChunkConfig c;
  c.window_groups = window_tokens / g;
  c.step_groups = step_tokens / g;
  c.keep_timestamp_history = keep_timestamp_history;
  c.validate();
  return c;
}

void ChunkConfig::validate() const {
  if (window_groups == 0) throw std::invalid_argument("chunk window must hold at least one group");
  if (step_groups == 0) throw std::invalid_argument("chunk step must be at least one group");
  if (step_groups > window_groups) {
    throw std::invalid_argument("chunk step (" + std::to_string(step_groups) +
                                " groups) exceeds the window (" + std::to_string(window_groups) +
                                " groups)");
  }
}

ChunkPlan plan_chunks(const SequenceLayout& layout, const ChunkConfig& config) {
  config.validate();
  ChunkPlan plan;
  plan.window_groups = config.window_groups;
  plan.step_groups = config.step_groups;
  plan.tokens_per_group = layout.tokens_per_group;
  plan.system_len = layout.system_len();
  plan.keep_timestamp_history = config.keep_timestamp_history;

  const std::size_t n_groups = layout.n_groups();
  const auto group_pos = [&](std::size_t g) { return layout.group_begin(g); };

  std::size_t covered = 0;  // groups already encoded as new
  for (std::size_t i = 0; covered < n_groups; ++i) {
    const std::size_t start = i * config.step_groups;
    const std::size_t end = std::min(n_groups, start + config.window_groups);
    ChunkSpan span;
    span.chunk_id = i;
    span.first_group = covered;
    span.end_group = end;
    span.overlap_first_group = std::min(start, covered);
    span.new_range = {group_pos(span.first_group), group_pos(span.end_group)};
    span.overlap_range = {group_pos(span.overlap_first_group), group_pos(span.first_group)};
    plan.chunks.push_back(span);
    covered = end;
  }
  return plan;
}

VisibilitySpec chunk_visibility(const ChunkPlan& plan, std::size_t chunk_id,
                                const SequenceLayout& layout) {
  const ChunkSpan& span = plan.chunks.at(chunk_id);
  std::vector<Position> shared;
  for (std::size_t i = 0; i < plan.system_len; ++i) shared.push_back(layout.positions[i]);
  if (plan.keep_timestamp_history) {
    for (std::size_t g = 0; g < span.overlap_first_group; ++g) {
      shared.push_back(layout.group_begin(g));
    }
  }
  for (Position p = span.overlap_range.begin; p < span.overlap_range.end; ++p) shared.push_back(p);

  VisibilitySpec vis;
  vis.keys.reserve(span.new_range.size());
  for (Position q = span.new_range.begin; q < span.new_range.end; ++q) {
    std::vector<Position> row = shared;
    for (Position p = span.new_range.begin; p <= q; ++p) row.push_back(p);
    vis.keys.push_back(std::move(row));
  }
  return vis;
}

void assign_chunks(SequenceLayout& layout, const ChunkPlan& plan) {
  for (const ChunkSpan& span : plan.chunks) {
    for (Position p = span.new_range.begin; p < span.new_range.end; ++p) {
      TokenRole& role = layout.roles[static_cast<std::size_t>(p)];
      if (role.kind == RoleKind::Visual) role.chunk_id = static_cast<std::int64_t>(span.chunk_id);
    }
  }
}

namespace {

void append_rows(Logits& dst, const Logits& src) {
  if (dst.vocab == 0) dst.vocab = src.vocab;
  dst.rows += src.rows;
  dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
}

}  // namespace

PrefillOutput run_prefill(const ModelBundle& model, const SequenceLayout& layout,
                          const ChunkConfig& config, const PrefillOptions& options) {
  layout.validate();
  const ModelConfig& mc = model.config;
  PrefillOutput out;
  out.plan = plan_chunks(layout, config);
  out.store = BiLevelKvStore(mc.num_layers, mc.num_heads, mc.head_dim);
  out.logits.vocab = mc.vocab_size;

  CostMeter meter(mc, Phase::Prefill);
  ForwardOptions fopts;
  fopts.meter = &meter;

  const std::span<const TokenId> tokens(layout.tokens);
  const std::span<const Position> positions(layout.positions);

  const std::size_t sys = layout.system_len();
  if (sys > 0) {
    const auto seg = positions.first(sys);
    ForwardResult r =
        forward_segment(model, tokens.first(sys), seg, {}, VisibilitySpec::full_causal({}, seg), fopts);
    meter.observe_window(sys);
    out.store.set_system(std::move(r.kvs));
    if (options.keep_logits) append_rows(out.logits, r.logits);
  }

  for (const ChunkSpan& span : out.plan.chunks) {
    const Position window_start = span.overlap_range.begin;
    const KvLayers history = out.plan.keep_timestamp_history
                                 ? out.store.timestamps_in({static_cast<Position>(sys), window_start})
                                 : KvLayers{};
    const KvLayers overlap = out.store.gather(span.overlap_range);
    std::vector<const KvLayers*> parts;
    if (sys > 0) parts.push_back(&out.store.system_kvs);
    if (!history.empty()) parts.push_back(&history);
    if (!overlap.empty()) parts.push_back(&overlap);
    const KvLayers context = parts.empty() ? KvLayers{} : merge_layers(parts);

    const auto begin = static_cast<std::size_t>(span.new_range.begin);
    const std::size_t n = span.new_range.size();
    ForwardResult r = forward_segment(model, tokens.subspan(begin, n), positions.subspan(begin, n),
                                      context, chunk_visibility(out.plan, span.chunk_id, layout), fopts);
    meter.observe_window(span.overlap_range.size() + n);

    std::vector<std::size_t> ts_idx;
    std::vector<std::size_t> vis_idx;
    for (std::size_t i = 0; i < n; ++i) {
      (layout.roles[begin + i].kind == RoleKind::Timestamp ? ts_idx : vis_idx).push_back(i);
    }
    KvLayers ts_kvs;
    KvLayers vis_kvs;
    for (const LayerKv& layer : r.kvs) {
      ts_kvs.push_back(layer.select(ts_idx));
      vis_kvs.push_back(layer.select(vis_idx));
    }
    out.store.append_timestamps(ts_kvs);
    out.store.set_dense(span.chunk_id, span.new_range, std::move(vis_kvs));
    if (options.keep_logits) append_rows(out.logits, r.logits);
  }

  out.cost = meter.report();
  return out;
}

}  // namespace chunkkv
