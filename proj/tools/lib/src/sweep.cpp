// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/tools/sweep.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "chunkkv/cost_model.hpp"
#include "chunkkv/prefill.hpp"
#include "chunkkv/sequence.hpp"
#include "chunkkv/tools/parallel.hpp"

namespace chunkkv::tools {

ModelConfig SweepSetup::default_model() { return ModelConfig::make(2, 2, 8, 1024, 256, 7); }

namespace {

SequenceLayout sweep_layout(const SweepSetup& s, std::size_t target_tokens) {
  const VocabLayout vocab = VocabLayout::for_vocab(s.model.vocab_size);
  const std::size_t per_group = 1 + s.tokens_per_group;
  const std::size_t body = target_tokens > s.system_len ? target_tokens - s.system_len : 0;
  const std::size_t n_groups = std::max<std::size_t>(1, (body + per_group / 2) / per_group);

  std::mt19937_64 rng(s.layout_seed);
  std::vector<TokenId> system;
  for (std::size_t i = 0; i < s.system_len; ++i) system.push_back(vocab.system_token(i));
  std::vector<std::vector<TokenId>> groups(n_groups);
  std::vector<double> times(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    for (std::size_t t = 0; t < s.tokens_per_group; ++t) {
      groups[g].push_back(vocab.visual_begin + static_cast<TokenId>(rng() % vocab.n_visual()));
    }
    times[g] = static_cast<double>(g * kGroupSize);
  }
  std::vector<TokenId> query;
  const auto query_ids = static_cast<std::uint64_t>(vocab.visual_begin - VocabLayout::kTimestampEnd);
  for (std::size_t i = 0; i < s.query_len; ++i) {
    query.push_back(VocabLayout::kTimestampEnd + static_cast<TokenId>(rng() % query_ids));
  }
  return assemble_layout(system, groups, times, query, vocab, s.model.max_position);
}

double ratio(std::uint64_t a, std::uint64_t b) {
  return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
}

}  // namespace

std::vector<SweepRow> run_sweep(const SweepRanges& r, const SweepSetup& s) {
  struct Job {
    std::size_t tokens, window, step;
  };
  std::vector<Job> jobs;
  for (std::size_t n : r.tokens) {
    for (std::size_t w : r.windows) {
      for (std::size_t st : r.steps) {
        if (st == 0 || st > w) continue;
        jobs.push_back({n, w, st});
      }
    }
  }
  for (std::int64_t k : r.top_ks) {
    if (k < 0) throw std::invalid_argument("sweep: top_k must be non-negative");
  }
  if (jobs.empty() || r.top_ks.empty() || r.pool_factors.empty()) return {};

  const ModelBundle model = init_model(s.model);
  const ModelDims dims = ModelDims::from(s.model);
  std::vector<std::vector<SweepRow>> per_job(jobs.size());

  parallel_for(jobs.size(), s.jobs, [&](std::size_t j) {
    const Job& job = jobs[j];
    const SequenceLayout layout = sweep_layout(s, job.tokens);
    const ChunkConfig cfg{job.window, job.step, r.timestamp_history};
    const auto start = std::chrono::steady_clock::now();
    PrefillOutput prefill = run_prefill(model, layout, cfg, PrefillOptions{false});
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

    const LayoutSummary summary = LayoutSummary::from(layout);
    const FlopBreakdown predicted = predict_prefill_flops(summary, cfg, dims);
    const FlopBreakdown full = predict_full_prefill_flops(summary.prefix_tokens(), dims);
    const auto query = std::span<const TokenId>(layout.tokens).subspan(static_cast<std::size_t>(layout.prefix_end()));

    SweepRow base;
    base.n_tokens = summary.prefix_tokens();
    base.n_groups = summary.n_groups;
    base.window = job.window;
    base.step = job.step;
    base.timestamp_history = r.timestamp_history;
    base.n_chunks = prefill.plan.chunks.size();
    base.flops_total = prefill.cost.total_flops();
    base.flops_predicted = predicted.total();
    base.flops_full = full.total();
    base.flops_ratio = ratio(base.flops_total, base.flops_full);
    base.attn_flops = prefill.cost.attention_flops();
    base.attn_flops_ratio = ratio(base.attn_flops, full.attention());
    base.peak_resident_tokens = prefill.cost.kv_tokens_peak_resident;
    base.peak_window_tokens = prefill.cost.kv_tokens_peak_window;
    base.wall_ms = s.timing ? wall_ms : 0.0;

    BiLevelKvStore& store = prefill.store;
    const std::size_t probe = default_probe_layer(s.model);
    for (std::size_t p : r.pool_factors) {
      store.build_sparse(p);
      const QueryRepr repr = probe_query(model, store, query, layout.prefix_end(), probe);
      const auto scores = score_chunks(store, repr, s.oracle, probe);
      for (std::int64_t k : r.top_ks) {
        const MixedCache cache = assemble_mixed(store, scores, k);
        std::vector<ChunkLoad> loads;
        for (const auto& [id, kvs] : store.dense) {
          loads.push_back({kv_tokens(kvs), std::binary_search(cache.selection.begin(), cache.selection.end(), id)});
        }
        SweepRow row = base;
        row.top_k = k;
        row.pool_factor = p;
        row.kv_fraction = cache.kv_fraction();
        row.kv_fraction_predicted =
            predict_decode_kv_fraction(loads, p, cache.system_tokens + cache.timestamp_tokens);
        per_job[j].push_back(row);
      }
    }
  });

  std::vector<SweepRow> rows;
  for (auto& part : per_job) rows.insert(rows.end(), part.begin(), part.end());
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << "N,window,step,k,p,flops_total,flops_ratio,kv_fraction,wall_ms,"
         "groups,timestamp_history,n_chunks,flops_predicted,flops_full,attn_flops,attn_flops_ratio,"
         "kv_fraction_predicted,peak_resident_tokens,peak_window_tokens\n";
  out.precision(10);
  for (const SweepRow& r : rows) {
    out << r.n_tokens << ',' << r.window << ',' << r.step << ',' << r.top_k << ',' << r.pool_factor << ','
        << r.flops_total << ',' << r.flops_ratio << ',' << r.kv_fraction << ',' << r.wall_ms << ','
        << r.n_groups << ',' << (r.timestamp_history ? "on" : "off") << ',' << r.n_chunks << ','
        << r.flops_predicted << ',' << r.flops_full << ',' << r.attn_flops << ',' << r.attn_flops_ratio
        << ',' << r.kv_fraction_predicted << ',' << r.peak_resident_tokens << ','
        << r.peak_window_tokens << '\n';
  }
  return out.str();
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_line: need two or more points");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit fit;
  fit.slope = sxx == 0.0 ? 0.0 : sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (fit.intercept + fit.slope * x[i]);
    ss_res += e * e;
  }
  fit.r2 = syy == 0.0 ? 1.0 : 1.0 - ss_res / syy;
  return fit;
}

}  // namespace chunkkv::tools
