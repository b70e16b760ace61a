// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/tools/needle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "chunkkv/checkpoint.hpp"
#include "chunkkv/sequence.hpp"
#include "chunkkv/tools/experiment.hpp"
#include "chunkkv/tools/parallel.hpp"

namespace chunkkv::tools {

ModelConfig NeedleSetup::position_free_model() {
  ModelConfig c = ModelConfig::make(2, 2, 8, 64, 256, 7);
  c.rotary_dim = 0;
  return c;
}

void NeedleSpec::validate(const ModelConfig& model) const {
  if (haystack_groups == 0) throw ConfigError("needle: haystack needs at least one group");
  if (needle_group_index >= haystack_groups) {
    throw ConfigError("needle: group index " + std::to_string(needle_group_index) +
                      " out of range for " + std::to_string(haystack_groups) + " groups");
  }
  if (needle_token_pattern.empty()) throw ConfigError("needle: empty pattern");
  const VocabLayout vocab = VocabLayout::for_vocab(model.vocab_size);
  for (TokenId id : needle_token_pattern) {
    if (!vocab.is_visual(id)) {
      throw ConfigError("needle: pattern token " + std::to_string(id) + " is not a visual id");
    }
  }
}

TokenId pick_needle_token(const ModelBundle& model, std::size_t probe_layer) {
  const ModelConfig& c = model.config;
  const VocabLayout vocab = VocabLayout::for_vocab(c.vocab_size);
  TokenId best = vocab.visual_begin;
  double best_affinity = -std::numeric_limits<double>::infinity();
  const Position pos = 0;
  ForwardOptions opts;
  opts.capture_queries_layer = probe_layer;
  for (auto id = vocab.visual_begin; static_cast<std::size_t>(id) < c.vocab_size; ++id) {
    const ForwardResult r = forward_segment(model, std::span(&id, 1), std::span(&pos, 1), {},
                                            VisibilitySpec::full_causal({}, std::span(&pos, 1)), opts);
    double weakest = std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < c.num_heads; ++h) {
      const auto k = r.kvs[probe_layer].key(h, 0);
      double dot = 0.0;
      for (std::size_t i = 0; i < c.head_dim; ++i) {
        dot += static_cast<double>(r.captured_queries[h * c.head_dim + i]) * k[i];
      }
      weakest = std::min(weakest, dot);
    }
    if (weakest > best_affinity) {
      best_affinity = weakest;
      best = id;
    }
  }
  return best;
}

NeedleCell run_needle_cell(const ModelBundle& model, const NeedleSpec& spec, const NeedleSetup& setup,
                           double depth) {
  spec.validate(model.config);
  const VocabLayout vocab = VocabLayout::for_vocab(model.config.vocab_size);

  std::vector<TokenId> system;
  for (std::size_t i = 0; i < setup.system_len; ++i) system.push_back(vocab.system_token(i));
  std::vector<std::vector<TokenId>> groups(spec.haystack_groups,
                                           std::vector<TokenId>(setup.tokens_per_group, kPadToken));
  auto& needle = groups[spec.needle_group_index];
  for (std::size_t i = 0; i < needle.size(); ++i) {
    needle[i] = spec.needle_token_pattern[i % spec.needle_token_pattern.size()];
  }
  std::vector<double> times(spec.haystack_groups);
  for (std::size_t g = 0; g < times.size(); ++g) times[g] = static_cast<double>(g * kGroupSize);
  const std::span<const TokenId> query(spec.needle_token_pattern);
  const SequenceLayout layout =
      assemble_layout(system, groups, times, query, vocab, model.config.max_position);

  PrefillOutput prefill = run_prefill(model, layout, setup.chunk, PrefillOptions{false});
  BiLevelKvStore& store = prefill.store;
  store.build_sparse(setup.pool_factor);
  const QueryRepr repr = probe_query(model, store, query, layout.prefix_end(), setup.probe_layer);
  const auto scores = score_chunks(store, repr, setup.oracle, setup.probe_layer);

  NeedleCell cell;
  cell.haystack_groups = spec.haystack_groups;
  cell.depth = depth;
  cell.needle_group = spec.needle_group_index;
  cell.n_chunks = prefill.plan.chunks.size();
  for (const ChunkSpan& c : prefill.plan.chunks) {
    if (c.first_group <= spec.needle_group_index && spec.needle_group_index < c.end_group) {
      cell.needle_chunk = c.chunk_id;
    }
  }
  cell.best_other_score = -std::numeric_limits<double>::infinity();
  for (const RelevanceScore& s : scores) {
    if (s.chunk_id == cell.needle_chunk) {
      cell.needle_score = s.score;
    } else {
      cell.best_other_score = std::max(cell.best_other_score, s.score);
    }
  }
  cell.rank = 1;
  for (const RelevanceScore& s : scores) {
    if (s.chunk_id == cell.needle_chunk) continue;
    if (s.score > cell.needle_score || (s.score == cell.needle_score && s.chunk_id < cell.needle_chunk)) {
      ++cell.rank;
    }
  }
  if (cell.n_chunks == 1) cell.best_other_score = 0.0;

  const MixedCache mixed = assemble_mixed(store, scores, setup.top_k);
  cell.selected = std::binary_search(mixed.selection.begin(), mixed.selection.end(), cell.needle_chunk);
  const MixedCache all_dense = assemble_mixed(store, scores, static_cast<std::int64_t>(cell.n_chunks));
  cell.answer_token = decode(model, all_dense, query, layout.prefix_end(), 1).generated.front();
  cell.generated_token = decode(model, mixed, query, layout.prefix_end(), 1).generated.front();
  cell.answer_hit = cell.generated_token == cell.answer_token;
  cell.success = cell.selected && cell.answer_hit;
  return cell;
}

NeedleReport run_needle_grid(const NeedleGrid& grid) {
  const ModelBundle model = init_model(grid.setup.model);
  NeedleReport report;
  report.pattern = grid.pattern;
  if (report.pattern.empty()) report.pattern = {pick_needle_token(model, grid.setup.probe_layer)};

  struct Job {
    std::size_t length;
    double depth;
  };
  std::vector<Job> jobs;
  for (std::size_t length : grid.lengths) {
    for (double depth : grid.depths) {
      if (!(depth >= 0.0 && depth <= 1.0)) throw ConfigError("needle: depth must lie in [0, 1]");
      jobs.push_back({length, depth});
    }
  }
  report.cells.resize(jobs.size());
  parallel_for(jobs.size(), grid.jobs, [&](std::size_t i) {
    NeedleSpec spec;
    spec.haystack_groups = jobs[i].length;
    spec.needle_group_index = jobs[i].length == 0 ? 0
                                                  : static_cast<std::size_t>(std::lround(
                                                        jobs[i].depth * static_cast<double>(jobs[i].length - 1)));
    spec.needle_token_pattern = report.pattern;
    report.cells[i] = run_needle_cell(model, spec, grid.setup, jobs[i].depth);
  });

  std::size_t selected = 0, hits = 0, successes = 0;
  for (const NeedleCell& c : report.cells) {
    selected += c.selected;
    hits += c.answer_hit;
    successes += c.success;
  }
  if (!report.cells.empty()) {
    const auto n = static_cast<double>(report.cells.size());
    report.selection_rate = static_cast<double>(selected) / n;
    report.answer_rate = static_cast<double>(hits) / n;
    report.success_rate = static_cast<double>(successes) / n;
  }
  return report;
}

nlohmann::json NeedleReport::to_json(const NeedleGrid& grid) const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (const NeedleCell& c : cells) {
    cells_json.push_back({{"haystack_groups", c.haystack_groups},
                          {"depth", c.depth},
                          {"needle_group", c.needle_group},
                          {"needle_chunk", c.needle_chunk},
                          {"n_chunks", c.n_chunks},
                          {"selected", c.selected},
                          {"rank", c.rank},
                          {"needle_score", c.needle_score},
                          {"best_other_score", c.best_other_score},
                          {"answer_token", c.answer_token},
                          {"generated_token", c.generated_token},
                          {"answer_hit", c.answer_hit},
                          {"success", c.success}});
  }
  const NeedleSetup& s = grid.setup;
  return {
      {"lengths", grid.lengths},
      {"depths", grid.depths},
      {"pattern", pattern},
      {"setup",
       {{"system_len", s.system_len},
        {"tokens_per_group", s.tokens_per_group},
        {"window_groups", s.chunk.window_groups},
        {"step_groups", s.chunk.step_groups},
        {"timestamp_history", s.chunk.keep_timestamp_history},
        {"top_k", s.top_k},
        {"pool_factor", s.pool_factor},
        {"oracle", to_string(s.oracle)},
        {"probe_layer", s.probe_layer},
        {"model_seed", s.model.seed},
        {"rotary_dim", s.model.rotary_dim}}},
      {"selection_rate", selection_rate},
      {"answer_rate", answer_rate},
      {"success_rate", success_rate},
      {"cells", cells_json},
  };
}

std::string NeedleReport::to_csv() const {
  std::ostringstream out;
  out << "haystack_groups,depth,needle_group,needle_chunk,n_chunks,selected,rank,needle_score,"
         "best_other_score,answer_token,generated_token,answer_hit,success\n";
  out.precision(17);
  for (const NeedleCell& c : cells) {
    out << c.haystack_groups << ',' << c.depth << ',' << c.needle_group << ',' << c.needle_chunk << ','
        << c.n_chunks << ',' << int(c.selected) << ',' << c.rank << ',' << c.needle_score << ','
        << c.best_other_score << ',' << c.answer_token << ',' << c.generated_token << ','
        << int(c.answer_hit) << ',' << int(c.success) << '\n';
  }
  return out.str();
}

}  // namespace chunkkv::tools
