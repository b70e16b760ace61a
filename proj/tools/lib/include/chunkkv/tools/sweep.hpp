// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chunkkv/kv_store.hpp"
#include "chunkkv/model.hpp"

namespace chunkkv::tools {

struct SweepRanges {
  std::vector<std::size_t> tokens = {1024, 2048, 4096, 8192};  // target prefix length
  std::vector<std::size_t> windows = {8};                      // groups
  std::vector<std::size_t> steps = {4};                        // groups; steps above the window are skipped
  std::vector<std::int64_t> top_ks = {2};
  std::vector<std::size_t> pool_factors = {4};
  bool timestamp_history = true;
};

struct SweepSetup {
  ModelConfig model = default_model();
  std::size_t system_len = 4;
  std::size_t tokens_per_group = 64;
  std::size_t query_len = 4;
  std::uint64_t layout_seed = 3;
  OracleKind oracle = OracleKind::Centroid;
  bool timing = false;  // wall_ms stays 0 unless set, keeping output reproducible
  std::size_t jobs = 1;

  /// Narrow attention, wide feed-forward.
  static ModelConfig default_model();
};

struct SweepRow {
  std::uint64_t n_tokens = 0;  // prefix tokens actually built
  std::uint64_t n_groups = 0;
  std::size_t window = 0;
  std::size_t step = 0;
  std::int64_t top_k = 0;
  std::size_t pool_factor = 0;
  bool timestamp_history = true;
  std::size_t n_chunks = 0;
  std::uint64_t flops_total = 0;  // measured chunked prefill
  std::uint64_t flops_predicted = 0;
  std::uint64_t flops_full = 0;  // one-pass causal prefill, closed form
  double flops_ratio = 0.0;
  std::uint64_t attn_flops = 0;
  double attn_flops_ratio = 0.0;
  double kv_fraction = 0.0;  // measured from the assembled cache
  double kv_fraction_predicted = 0.0;
  std::uint64_t peak_resident_tokens = 0;
  std::uint64_t peak_window_tokens = 0;
  double wall_ms = 0.0;
};

std::vector<SweepRow> run_sweep(const SweepRanges& ranges, const SweepSetup& setup);

std::string sweep_csv(std::span<const SweepRow> rows);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

LinearFit fit_line(std::span<const double> x, std::span<const double> y);

}  // namespace chunkkv::tools
