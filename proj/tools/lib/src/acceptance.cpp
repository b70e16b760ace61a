// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/tools/acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <random>
#include <set>

#include "chunkkv/cost_meter.hpp"
#include "chunkkv/cost_model.hpp"
#include "chunkkv/kv_store.hpp"
#include "chunkkv/model.hpp"
#include "chunkkv/prefill.hpp"
#include "chunkkv/sequence.hpp"
#include "chunkkv/tools/needle.hpp"
#include "chunkkv/tools/sweep.hpp"

namespace chunkkv::tools {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename... Args>
std::string strf(const char* format, Args... args) {
  const int n = std::snprintf(nullptr, 0, format, args...);
  std::string out(static_cast<std::size_t>(n), '\0');
  std::snprintf(out.data(), out.size() + 1, format, args...);
  return out;
}

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

TokenId uniform_id(std::mt19937_64& rng, TokenId lo, TokenId hi_exclusive) {
  return lo + static_cast<TokenId>(rng() % static_cast<std::uint64_t>(hi_exclusive - lo));
}

struct IdRange {
  TokenId lo;
  TokenId hi;
};

IdRange id_range(RoleKind kind, const VocabLayout& v) {
  switch (kind) {
    case RoleKind::System:
      return {1, VocabLayout::kSpecialEnd};
    case RoleKind::Timestamp:
      return {VocabLayout::kSpecialEnd, VocabLayout::kTimestampEnd};
    case RoleKind::Query:
      return {VocabLayout::kTimestampEnd, v.visual_begin};
    case RoleKind::Visual:
      break;
  }
  return {v.visual_begin, static_cast<TokenId>(v.vocab_size)};
}

TokenId other_id(TokenId id, RoleKind kind, const VocabLayout& v) {
  const IdRange r = id_range(kind, v);
  return r.lo + (id - r.lo + 1) % (r.hi - r.lo);
}

// Random layout of at most max_tokens tokens with random ids in each role's range.
SequenceLayout random_layout(std::mt19937_64& rng, const VocabLayout& vocab, std::size_t max_tokens,
                             std::size_t min_query, std::size_t max_query, std::size_t max_tpg) {
  const std::size_t sys = uniform(rng, 1, 4);
  const std::size_t q = uniform(rng, min_query, max_query);
  const std::size_t budget = max_tokens - sys - q;
  const std::size_t tpg = uniform(rng, 1, std::min(max_tpg, budget - 1));
  const std::size_t n_groups = uniform(rng, 1, budget / (1 + tpg));
  std::vector<TokenId> system, query;
  for (std::size_t i = 0; i < sys; ++i) system.push_back(uniform_id(rng, 1, VocabLayout::kSpecialEnd));
  std::vector<std::vector<TokenId>> groups(n_groups);
  std::vector<double> times(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    for (std::size_t t = 0; t < tpg; ++t) {
      groups[g].push_back(uniform_id(rng, vocab.visual_begin, static_cast<TokenId>(vocab.vocab_size)));
    }
    times[g] = static_cast<double>(g * kGroupSize);
  }
  for (std::size_t i = 0; i < q; ++i) {
    query.push_back(uniform_id(rng, VocabLayout::kTimestampEnd, vocab.visual_begin));
  }
  return assemble_layout(system, groups, times, query, vocab, 1u << 16);
}

float row_diff(const Logits& a, std::size_t ra, const Logits& b, std::size_t rb) {
  float worst = 0.0f;
  const auto x = a.row(ra);
  const auto y = b.row(rb);
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  return worst;
}

bool rows_identical(const Logits& a, const Logits& b, std::size_t r) {
  return std::memcmp(a.row(r).data(), b.row(r).data(), a.vocab * sizeof(float)) == 0;
}

LayerKv random_kv(std::mt19937_64& rng, std::size_t heads, std::size_t dim,
                  const std::vector<Position>& positions) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  LayerKv kv = LayerKv::empty(heads, dim);
  kv.positions = positions;
  kv.keys.resize(heads * positions.size() * dim);
  kv.values.resize(kv.keys.size());
  for (float& x : kv.keys) x = normal(rng);
  for (float& x : kv.values) x = normal(rng);
  return kv;
}

// n chunks of c visual tokens, each preceded by a timestamp, after `system` tokens.
BiLevelKvStore synthetic_store(std::mt19937_64& rng, std::size_t layers, std::size_t heads,
                               std::size_t dim, std::size_t n, std::size_t c, std::size_t system) {
  BiLevelKvStore store(layers, heads, dim);
  Position p = 0;
  std::vector<Position> sys_pos;
  for (std::size_t i = 0; i < system; ++i) sys_pos.push_back(p++);
  KvLayers sys_kvs, ts_kvs;
  std::vector<std::vector<Position>> chunk_pos(n);
  std::vector<Position> ts_pos;
  for (std::size_t i = 0; i < n; ++i) {
    ts_pos.push_back(p++);
    for (std::size_t t = 0; t < c; ++t) chunk_pos[i].push_back(p++);
  }
  for (std::size_t l = 0; l < layers; ++l) {
    sys_kvs.push_back(random_kv(rng, heads, dim, sys_pos));
    ts_kvs.push_back(random_kv(rng, heads, dim, ts_pos));
  }
  if (system > 0) store.set_system(std::move(sys_kvs));
  if (n > 0) store.append_timestamps(ts_kvs);
  for (std::size_t i = 0; i < n; ++i) {
    KvLayers kvs;
    for (std::size_t l = 0; l < layers; ++l) kvs.push_back(random_kv(rng, heads, dim, chunk_pos[i]));
    store.set_dense(i, {chunk_pos[i].front() - 1, chunk_pos[i].back() + 1}, std::move(kvs));
  }
  return store;
}

std::vector<RelevanceScore> random_scores(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<RelevanceScore> scores;
  for (std::size_t i = 0; i < n; ++i) scores.push_back({i, u(rng)});
  return scores;
}

}  // namespace

CriterionResult check_degenerate_equivalence() {
  const auto t0 = Clock::now();
  CriterionResult res{1, "degenerate equivalence", false, {}, 0.0};
  const VocabLayout vocab = VocabLayout::for_vocab(64);
  std::size_t token_exact = 0;
  std::size_t within_tol = 0;
  float worst = 0.0f;
  constexpr std::size_t kCases = 100;
  constexpr std::size_t kNewTokens = 4;
  for (std::size_t i = 0; i < kCases; ++i) {
    std::mt19937_64 rng(1000 + i);
    const ModelBundle model = init_model(ModelConfig::make(2, 2, 8, 32, 64, 1 + i));
    const SequenceLayout layout = random_layout(rng, vocab, 64, 1, 4, 6);
    ChunkConfig cfg;
    cfg.window_groups = layout.n_groups() + uniform(rng, 0, 2);
    cfg.step_groups = uniform(rng, 1, cfg.window_groups);
    cfg.keep_timestamp_history = (rng() & 1) != 0;

    PrefillOutput prefill = run_prefill(model, layout, cfg);
    prefill.store.build_sparse(uniform(rng, 1, 4));
    const auto prefix_end = static_cast<std::size_t>(layout.prefix_end());
    const std::span<const TokenId> tokens(layout.tokens);
    const auto query = tokens.subspan(prefix_end);
    const QueryRepr repr = probe_query(model, prefill.store, query, layout.prefix_end(), 1);
    const auto scores = score_chunks(prefill.store, repr,
                                     (rng() & 1) ? OracleKind::Centroid : OracleKind::AttentionScore, 1);
    const auto top_k = static_cast<std::int64_t>(prefill.store.n_chunks() + uniform(rng, 0, 1));
    const MixedCache cache = assemble_mixed(prefill.store, scores, top_k);
    const DecodeResult decoded = decode(model, cache, query, layout.prefix_end(), kNewTokens);

    std::vector<TokenId> prompt(tokens.begin(), tokens.end());
    const auto reference = full_oracle_greedy(model, prompt, kNewTokens);
    std::vector<TokenId> extended = prompt;
    extended.insert(extended.end(), decoded.generated.begin(), decoded.generated.end() - 1);
    const Logits oracle = full_oracle(model, extended);

    float diff = 0.0f;
    for (std::size_t r = 0; r < prefix_end; ++r) diff = std::max(diff, row_diff(prefill.logits, r, oracle, r));
    for (std::size_t r = 0; r < query.size(); ++r) {
      diff = std::max(diff, row_diff(decoded.query_logits, r, oracle, prefix_end + r));
    }
    for (std::size_t r = 1; r < decoded.step_logits.rows; ++r) {
      diff = std::max(diff, row_diff(decoded.step_logits, r, oracle, prompt.size() - 1 + r));
    }
    worst = std::max(worst, diff);
    token_exact += reference == decoded.generated && prefill.plan.chunks.size() == 1;
    within_tol += diff <= 1e-5f;
  }
  res.seconds = seconds_since(t0);
  res.passed = token_exact == kCases && within_tol == kCases && res.seconds < 60.0;
  res.detail = strf("%zu/%zu token-exact, %zu/%zu logits within 1e-5 (max %.3g), budget 60 s", token_exact,
                    kCases, within_tol, kCases, static_cast<double>(worst));
  return res;
}

CriterionResult check_visibility_soundness() {
  const auto t0 = Clock::now();
  CriterionResult res{2, "visibility soundness", false, {}, 0.0};
  const VocabLayout vocab = VocabLayout::for_vocab(64);
  std::size_t checked = 0, leaks = 0, insensitive = 0, sensitive_pairs = 0;
  std::size_t history_on = 0;
  constexpr std::size_t kConfigs = 20;
  for (std::size_t i = 0; i < kConfigs; ++i) {
    std::mt19937_64 rng(7000 + i);
    const SequenceLayout layout = random_layout(rng, vocab, 48, 0, 0, 3);
    ChunkConfig cfg;
    cfg.window_groups = uniform(rng, 1, 3);
    cfg.step_groups = uniform(rng, 1, cfg.window_groups);
    cfg.keep_timestamp_history = i % 2 == 0;
    history_on += cfg.keep_timestamp_history;
    const ChunkPlan plan = plan_chunks(layout, cfg);

    // direct[q][k]: k in q's visibility set; reach[q][k]: k reachable through stored KVs.
    const std::size_t n = static_cast<std::size_t>(layout.prefix_end());
    std::vector<std::vector<char>> direct(n, std::vector<char>(n, 0));
    for (std::size_t q = 0; q < layout.system_len(); ++q) {
      for (std::size_t k = 0; k <= q; ++k) direct[q][k] = 1;
    }
    for (const ChunkSpan& span : plan.chunks) {
      const VisibilitySpec vis = chunk_visibility(plan, span.chunk_id, layout);
      for (std::size_t r = 0; r < vis.keys.size(); ++r) {
        const auto q = static_cast<std::size_t>(span.new_range.begin) + r;
        for (Position k : vis.keys[r]) direct[q][static_cast<std::size_t>(k)] = 1;
      }
    }
    auto reach = direct;
    for (std::size_t q = 0; q < n; ++q) {
      for (std::size_t k = 0; k < q; ++k) {
        if (!direct[q][k]) continue;
        for (std::size_t m = 0; m < n; ++m) reach[q][m] |= reach[k][m];
      }
    }

    for (std::size_t layers : {1u, 2u}) {
      const ModelBundle model = init_model(ModelConfig::make(layers, 2, 4, 16, 64, 100 + i));
      const Logits base = run_prefill(model, layout, cfg).logits;
      for (std::size_t j = 0; j < n; ++j) {
        SequenceLayout perturbed = layout;
        perturbed.tokens[j] = other_id(layout.tokens[j], layout.roles[j].kind, vocab);
        const Logits out = run_prefill(model, perturbed, cfg).logits;
        for (std::size_t q = 0; q < n; ++q) {
          const bool may_depend = layers == 1 ? direct[q][j] : reach[q][j];
          const bool same = rows_identical(base, out, q);
          ++checked;
          if (!may_depend && !same) ++leaks;
          if (layers == 1 && may_depend) {
            ++sensitive_pairs;
            if (same) ++insensitive;
          }
        }
      }
    }
  }
  res.seconds = seconds_since(t0);
  res.passed = leaks == 0 && insensitive == 0 && history_on > 0 && history_on < kConfigs &&
               res.seconds < 300.0;
  res.detail = strf(
      "%zu configs (%zu with timestamp history), %zu (query, key) checks, %zu leaks; "
      "%zu/%zu visible pairs responsive",
      kConfigs, history_on, checked, leaks, sensitive_pairs - insensitive, sensitive_pairs);
  return res;
}

CriterionResult check_cost_exactness() {
  const auto t0 = Clock::now();
  CriterionResult res{3, "cost-model exactness", false, {}, 0.0};
  const VocabLayout vocab = VocabLayout::for_vocab(64);
  constexpr std::size_t kConfigs = 50;
  std::size_t prefill_ok = 0, residency_ok = 0, decode_ok = 0, full_ok = 0;
  std::uint64_t largest = 0;
  for (std::size_t i = 0; i < kConfigs; ++i) {
    std::mt19937_64 rng(9000 + i);
    const ModelConfig mc =
        ModelConfig::make(uniform(rng, 1, 3), uniform(rng, 1, 3), std::size_t{2} << uniform(rng, 0, 2),
                          uniform(rng, 4, 48), 64, 50 + i);
    const ModelBundle model = init_model(mc);
    const SequenceLayout layout = random_layout(rng, vocab, 4096, 1, 3, 16);
    largest = std::max<std::uint64_t>(largest, layout.size());
    ChunkConfig cfg;
    cfg.window_groups = uniform(rng, 1, 12);
    cfg.step_groups = uniform(rng, 1, cfg.window_groups);
    cfg.keep_timestamp_history = (rng() & 1) != 0;

    PrefillOutput prefill = run_prefill(model, layout, cfg, PrefillOptions{false});
    const ModelDims dims = ModelDims::from(mc);
    const LayoutSummary summary = LayoutSummary::from(layout);
    const FlopBreakdown f = predict_prefill_flops(summary, cfg, dims);
    const CostReport& m = prefill.cost;
    prefill_ok += f.attn_score == m.attn_score_flops && f.attn_weighted_sum == m.attn_weighted_sum_flops &&
                  f.projection == m.projection_flops && f.ffn == m.ffn_flops && f.other == m.other_flops;
    const ResidencyPrediction r = predict_prefill_residency(summary, cfg);
    residency_ok += r.peak_resident_tokens == m.kv_tokens_peak_resident &&
                    r.peak_window_tokens == m.kv_tokens_peak_window &&
                    kv_bytes_for_tokens(mc, r.peak_resident_tokens) == m.kv_bytes_peak_resident;

    BiLevelKvStore& store = prefill.store;
    store.build_sparse(uniform(rng, 1, 6));
    const auto scores = random_scores(rng, store.n_chunks());
    const MixedCache cache =
        assemble_mixed(store, scores, static_cast<std::int64_t>(uniform(rng, 0, store.n_chunks())));
    const auto query = std::span<const TokenId>(layout.tokens).subspan(static_cast<std::size_t>(layout.prefix_end()));
    const std::size_t max_new = uniform(rng, 0, 3);
    const DecodeResult decoded = decode(model, cache, query, layout.prefix_end(), max_new);
    const FlopBreakdown d = predict_decode_flops(cache.total_tokens(), query.size(), max_new, dims);
    decode_ok += d.attn_score == decoded.cost.attn_score_flops && d.projection == decoded.cost.projection_flops &&
                 d.ffn == decoded.cost.ffn_flops && d.other == decoded.cost.other_flops &&
                 decoded.cost.kv_tokens_loaded_decode == cache.total_tokens();

    const std::size_t n_full = std::min<std::size_t>(layout.size(), 200);
    CostMeter meter(mc, Phase::Prefill);
    full_oracle(model, std::span<const TokenId>(layout.tokens).first(n_full), &meter);
    const FlopBreakdown full = predict_full_prefill_flops(n_full, dims);
    full_ok += full.total() == meter.report().total_flops() && full.other == meter.report().other_flops;
  }

  constexpr std::size_t kFractionCases = 200;
  std::size_t fraction_ok = 0;
  for (std::size_t i = 0; i < kFractionCases; ++i) {
    std::mt19937_64 rng(11000 + i);
    const std::size_t n = uniform(rng, 1, 16), c = uniform(rng, 1, 48), p = uniform(rng, 1, 8);
    const std::size_t k = uniform(rng, 0, n + 2), system = uniform(rng, 0, 4);
    const ModelConfig mc = ModelConfig::make(uniform(rng, 1, 2), 2, 4, 8, 64, 1);
    BiLevelKvStore store = synthetic_store(rng, mc.num_layers, 2, 4, n, c, system);
    store.build_sparse(p);
    CostMeter meter(mc, Phase::Decode);
    const MixedCache cache = assemble_mixed(store, random_scores(rng, n), static_cast<std::int64_t>(k), &meter);
    const std::uint64_t overhead = system + n;
    const std::uint64_t loaded = predict_mixed_visual_tokens(n, c, k, p) + overhead;
    fraction_ok += meter.report().kv_bytes_loaded_decode == kv_bytes_for_tokens(mc, loaded) &&
                   cache.kv_fraction() == predict_decode_kv_fraction(n, c, k, p, overhead);
  }
  res.seconds = seconds_since(t0);
  res.passed = prefill_ok == kConfigs && residency_ok == kConfigs && decode_ok == kConfigs &&
               full_ok == kConfigs && fraction_ok == kFractionCases;
  res.detail = strf(
      "prefill FLOPs %zu/%zu equal (up to %llu tokens), residency %zu/%zu, decode %zu/%zu, "
      "one-pass %zu/%zu; decode KV fraction %zu/%zu",
      prefill_ok, kConfigs, static_cast<unsigned long long>(largest), residency_ok, kConfigs, decode_ok,
      kConfigs, full_ok, kConfigs, fraction_ok, kFractionCases);
  return res;
}

CriterionResult check_prefill_scaling(std::size_t jobs) {
  const auto t0 = Clock::now();
  CriterionResult res{4, "prefill scaling", false, {}, 0.0};
  SweepRanges ranges;
  ranges.tokens = {1024, 2048, 4096, 8192, 16384, 32768};
  ranges.windows = {8};
  ranges.steps = {4};
  ranges.top_ks = {0};
  ranges.pool_factors = {4};
  SweepSetup setup;
  setup.jobs = jobs;

  double r2_on = 0.0, r2_off = 0.0;
  std::uint64_t window_lo = 0, window_hi = 0, resident_lo = 0, resident_hi = 0;
  std::uint64_t hist_resident_lo = 0, hist_resident_hi = 0;
  double n_lo = 0, n_hi = 0;
  bool predicted_ok = true;
  for (bool history : {true, false}) {
    ranges.timestamp_history = history;
    const auto rows = run_sweep(ranges, setup);
    std::vector<double> x, y;
    std::uint64_t w_lo = ~0ull, w_hi = 0, r_lo = ~0ull, r_hi = 0;
    for (const SweepRow& row : rows) {
      x.push_back(static_cast<double>(row.n_tokens));
      y.push_back(static_cast<double>(row.flops_total));
      w_lo = std::min(w_lo, row.peak_window_tokens);
      w_hi = std::max(w_hi, row.peak_window_tokens);
      r_lo = std::min(r_lo, row.peak_resident_tokens);
      r_hi = std::max(r_hi, row.peak_resident_tokens);
      predicted_ok = predicted_ok && row.flops_predicted == row.flops_total;
    }
    n_lo = x.front();
    n_hi = x.back();
    const double r2 = fit_line(x, y).r2;
    if (history) {
      r2_on = r2;
      window_lo = w_lo;
      window_hi = w_hi;
      hist_resident_lo = r_lo;
      hist_resident_hi = r_hi;
    } else {
      r2_off = r2;
      resident_lo = r_lo;
      resident_hi = r_hi;
    }
  }
  res.seconds = seconds_since(t0);
  res.passed = r2_on >= 0.99 && r2_off >= 0.99 && window_lo == window_hi && resident_lo == resident_hi &&
               n_hi / n_lo >= 32.0 * 0.95 && predicted_ok;
  res.detail = strf(
      "N %.0f..%.0f: R^2 %.5f (timestamp history on), %.5f (off); peak window %llu..%llu tokens; "
      "peak resident without history %llu..%llu, with history %llu..%llu (one timestamp per group)",
      n_lo, n_hi, r2_on, r2_off, static_cast<unsigned long long>(window_lo),
      static_cast<unsigned long long>(window_hi), static_cast<unsigned long long>(resident_lo),
      static_cast<unsigned long long>(resident_hi), static_cast<unsigned long long>(hist_resident_lo),
      static_cast<unsigned long long>(hist_resident_hi));
  return res;
}

CriterionResult check_reduction_representability(std::size_t jobs) {
  const auto t0 = Clock::now();
  CriterionResult res{5, "reduction representability", false, {}, 0.0};
  SweepRanges ranges;
  ranges.tokens = {2048, 4096, 8192};
  ranges.windows = {8};
  ranges.steps = {4, 8};
  ranges.top_ks = {0, 1, 2, 3, 4, 6, 8};
  ranges.pool_factors = {2, 4, 8};
  SweepSetup setup;
  setup.jobs = jobs;
  const auto rows = run_sweep(ranges, setup);

  const SweepRow* best = nullptr;
  bool consistent = true;
  for (const SweepRow& row : rows) {
    consistent = consistent && row.kv_fraction == row.kv_fraction_predicted;
    if (row.flops_ratio > 0.50 || std::abs(row.kv_fraction - 0.612) > 0.05) continue;
    if (best == nullptr || std::abs(row.kv_fraction - 0.612) < std::abs(best->kv_fraction - 0.612)) best = &row;
  }
  res.seconds = seconds_since(t0);
  res.passed = best != nullptr && consistent;
  if (best == nullptr) {
    res.detail = strf("no row among %zu reaches FLOPs ratio <= 0.50 with KV fraction 0.612 +/- 0.05", rows.size());
  } else {
    res.detail = strf(
        "%zu rows; N=%llu window=%zu step=%zu k=%lld p=%zu: prefill FLOPs ratio %.4f, decode KV "
        "fraction %.4f (measured == predicted: %s)",
        rows.size(), static_cast<unsigned long long>(best->n_tokens), best->window, best->step,
        static_cast<long long>(best->top_k), best->pool_factor, best->flops_ratio, best->kv_fraction,
        consistent ? "yes" : "no");
  }
  return res;
}

CriterionResult check_bilevel_fidelity() {
  const auto t0 = Clock::now();
  CriterionResult res{6, "bi-level fidelity", false, {}, 0.0};
  constexpr std::size_t kChunks = 1000;
  std::size_t contraction_ok = 0, identity_ok = 0;
  for (std::size_t i = 0; i < kChunks; ++i) {
    std::mt19937_64 rng(13000 + i);
    const std::size_t layers = uniform(rng, 1, 2), heads = uniform(rng, 1, 3), dim = uniform(rng, 1, 8);
    const std::size_t n = uniform(rng, 1, 40), p = uniform(rng, 1, 8);
    std::vector<Position> positions;
    Position pos = static_cast<Position>(uniform(rng, 0, 5));
    for (std::size_t t = 0; t < n; ++t) {
      positions.push_back(pos);
      pos += static_cast<Position>(uniform(rng, 1, 3));
    }
    KvLayers dense;
    for (std::size_t l = 0; l < layers; ++l) dense.push_back(random_kv(rng, heads, dim, positions));
    const KvLayers pooled = pool_chunk(dense, p);
    bool ok = true;
    for (std::size_t l = 0; l < layers; ++l) {
      const LayerKv& in = dense[l];
      const LayerKv& out = pooled[l];
      ok = ok && out.n_tokens() == (n + p - 1) / p;
      for (std::size_t r = 0; ok && r < out.n_tokens(); ++r) {
        const std::size_t b = r * p, e = std::min(n, b + p);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t c = 0; c < dim; ++c) {
            float klo = in.key(h, b)[c], khi = klo, vlo = in.value(h, b)[c], vhi = vlo;
            for (std::size_t t = b; t < e; ++t) {
              klo = std::min(klo, in.key(h, t)[c]);
              khi = std::max(khi, in.key(h, t)[c]);
              vlo = std::min(vlo, in.value(h, t)[c]);
              vhi = std::max(vhi, in.value(h, t)[c]);
            }
            const float k = out.key(h, r)[c], v = out.value(h, r)[c];
            ok = ok && k >= klo && k <= khi && v >= vlo && v <= vhi;
          }
        }
      }
    }
    contraction_ok += ok;
    const KvLayers same = pool_chunk(dense, 1);
    bool identical = same.size() == dense.size();
    for (std::size_t l = 0; identical && l < layers; ++l) {
      identical = same[l].positions == dense[l].positions && same[l].keys.size() == dense[l].keys.size() &&
                  std::memcmp(same[l].keys.data(), dense[l].keys.data(), dense[l].keys.size() * 4) == 0 &&
                  std::memcmp(same[l].values.data(), dense[l].values.data(), dense[l].values.size() * 4) == 0;
    }
    identity_ok += identical;
  }

  constexpr std::size_t kCacheCases = 300;
  std::size_t formula_ok = 0;
  for (std::size_t i = 0; i < kCacheCases; ++i) {
    std::mt19937_64 rng(17000 + i);
    const std::size_t n = uniform(rng, 1, 16), c = uniform(rng, 1, 64), p = uniform(rng, 1, 9);
    const std::size_t k = uniform(rng, 0, n + 1);
    BiLevelKvStore store = synthetic_store(rng, 1, 1, 2, n, c, uniform(rng, 0, 3));
    store.build_sparse(p);
    store.validate();
    const MixedCache cache = assemble_mixed(store, random_scores(rng, n), static_cast<std::int64_t>(k));
    formula_ok += cache.visual_tokens() == predict_mixed_visual_tokens(n, c, k, p) &&
                  cache.selection.size() == std::min(k, n) && kv_tokens(cache.layers) == cache.total_tokens();
  }
  res.seconds = seconds_since(t0);
  res.passed = contraction_ok == kChunks && identity_ok == kChunks && formula_ok == kCacheCases;
  res.detail = strf("contraction %zu/%zu chunks, pool factor 1 bitwise identity %zu/%zu, "
                    "cache size k*c + (n-k)*ceil(c/p) %zu/%zu",
                    contraction_ok, kChunks, identity_ok, kChunks, formula_ok, kCacheCases);
  return res;
}

CriterionResult check_needle_harness(std::size_t jobs) {
  const auto t0 = Clock::now();
  CriterionResult res{7, "needle harness", false, {}, 0.0};
  NeedleGrid grid;
  grid.jobs = jobs;
  const NeedleReport dense_top = run_needle_grid(grid);
  NeedleGrid none = grid;
  none.setup.top_k = 0;
  none.setup.pool_factor = 16;
  const NeedleReport zero = run_needle_grid(none);
  NeedleGrid attn = grid;
  attn.setup.oracle = OracleKind::AttentionScore;
  const NeedleReport by_attention = run_needle_grid(attn);
  res.seconds = seconds_since(t0);
  const std::size_t cells = dense_top.cells.size();
  res.passed = cells >= 64 && dense_top.selection_rate == 1.0 && zero.selection_rate == 0.0 &&
               zero.success_rate <= dense_top.success_rate;
  res.detail = strf(
      "%zu cells: centroid oracle selects the needle chunk in %.1f%% (attention oracle %.1f%%); "
      "top_k 0 selects %.1f%%; answer token reproduced %.1f%% (top_k 1) vs %.1f%% (top_k 0)",
      cells, 100.0 * dense_top.selection_rate, 100.0 * by_attention.selection_rate,
      100.0 * zero.selection_rate, 100.0 * dense_top.answer_rate, 100.0 * zero.answer_rate);
  return res;
}

CriterionResult check_frame_sampler() {
  const auto t0 = Clock::now();
  CriterionResult res{8, "frame sampler", false, {}, 0.0};
  std::size_t examples_ok = 0;
  {
    const FramePlan a = sample_frames(30.0, {1.0, 120, 4.0});
    examples_ok += a.n_frames() == 120 && a.effective_fps == 4.0;
    const FramePlan b = sample_frames(30.0, {1.0, 120, 2.0});
    examples_ok += b.n_frames() == 60 && b.effective_fps == 2.0;
    const FramePlan c = sample_frames(600.0, {1.0, 150, 4.0});
    bool on_grid = c.n_frames() == 150;
    for (double t : c.timestamps) on_grid = on_grid && t == std::floor(t) && t >= 0.0 && t < 600.0;
    const double step = 600.0 / 150.0;
    for (std::size_t i = 1; on_grid && i < c.n_frames(); ++i) {
      on_grid = std::abs(c.timestamps[i] - c.timestamps[i - 1] - step) <= 1.0;
    }
    examples_ok += on_grid;
  }

  constexpr std::size_t kCases = 200;
  std::size_t property_ok = 0;
  std::mt19937_64 rng(19000);
  std::uniform_real_distribution<double> duration(0.5, 2000.0);
  for (std::size_t i = 0; i < kCases; ++i) {
    const double d = duration(rng);
    SamplingPolicy policy;
    policy.max_frames = uniform(rng, 4, 512);
    policy.max_fps = static_cast<double>(uniform(rng, 1, 8)) + ((rng() & 1) ? 0.5 : 0.0);
    const FramePlan plan = sample_frames(d, policy);
    bool ok = plan.n_frames() >= 1 && plan.n_frames() <= policy.max_frames &&
              plan.effective_fps <= policy.max_fps + 1e-12;
    for (std::size_t f = 0; f < plan.n_frames(); ++f) {
      ok = ok && plan.timestamps[f] >= 0.0 && plan.timestamps[f] <= d;
      if (f > 0) ok = ok && plan.timestamps[f] > plan.timestamps[f - 1];
    }
    SamplingPolicy wider = policy;
    wider.max_frames += uniform(rng, 1, 64);
    ok = ok && sample_frames(d, wider).n_frames() >= plan.n_frames();
    SamplingPolicy faster = policy;
    faster.max_fps += 1.0;
    ok = ok && sample_frames(d, faster).effective_fps <= faster.max_fps + 1e-12;
    property_ok += ok;
  }
  res.seconds = seconds_since(t0);
  res.passed = examples_ok == 3 && property_ok == kCases;
  res.detail = strf("examples %zu/3, randomized bounds/monotonicity/rate cap %zu/%zu", examples_ok,
                    property_ok, kCases);
  return res;
}

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& options,
                                            const std::function<void(const CriterionResult&)>& on_result) {
  const std::vector<std::function<CriterionResult()>> all = {
      check_degenerate_equivalence,
      check_visibility_soundness,
      check_cost_exactness,
      [&] { return check_prefill_scaling(options.jobs); },
      [&] { return check_reduction_representability(options.jobs); },
      check_bilevel_fidelity,
      [&] { return check_needle_harness(options.jobs); },
      check_frame_sampler,
  };
  std::vector<CriterionResult> results;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), id) == options.only.end()) {
      continue;
    }
    CriterionResult r;
    try {
      r = all[i]();
    } catch (const std::exception& e) {
      r.id = id;
      r.name = "criterion " + std::to_string(id);
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  }
  return results;
}

std::string format_result(const CriterionResult& r) {
  return strf("%s [%d] %s: %s (%.1f s)", r.passed ? "PASS" : "FAIL", r.id, r.name.c_str(), r.detail.c_str(),
              r.seconds);
}

}  // namespace chunkkv::tools
