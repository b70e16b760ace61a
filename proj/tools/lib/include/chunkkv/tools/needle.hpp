// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkkv/kv_store.hpp"
#include "chunkkv/model.hpp"
#include "chunkkv/prefill.hpp"

namespace chunkkv::tools {

/// One haystack: PAD-filled groups with the pattern planted in one group. The
/// query is the pattern itself.
struct NeedleSpec {
  std::size_t haystack_groups = 16;
  std::size_t needle_group_index = 0;
  std::vector<TokenId> needle_token_pattern;

  /// Throws ConfigError.
  void validate(const ModelConfig& model) const;
};

struct NeedleSetup {
  ModelConfig model = position_free_model();
  std::size_t system_len = 2;
  std::size_t tokens_per_group = 4;
  ChunkConfig chunk{2, 2, true};
  std::int64_t top_k = 1;
  std::size_t pool_factor = 4;
  OracleKind oracle = OracleKind::Centroid;
  std::size_t probe_layer = 0;

  /// Default harness model: no rotary encoding, so probe-layer keys depend on
  /// the token alone and pattern keys match across positions.
  static ModelConfig position_free_model();
};

struct NeedleCell {
  std::size_t haystack_groups = 0;
  double depth = 0.0;
  std::size_t needle_group = 0;
  std::size_t needle_chunk = 0;
  std::size_t n_chunks = 0;
  bool selected = false;
  std::size_t rank = 0;  // 1 = ranked first
  double needle_score = 0.0;
  double best_other_score = 0.0;
  TokenId answer_token = 0;     // first token of the all-dense decode
  TokenId generated_token = 0;  // first token of the mixed-cache decode
  bool answer_hit = false;
  bool success = false;
};

NeedleCell run_needle_cell(const ModelBundle& model, const NeedleSpec& spec, const NeedleSetup& setup,
                           double depth = 0.0);

/// Visual token whose probe-layer query/key self-affinity is largest in its
/// weakest head, so both oracles see the planted pattern as a strong match.
TokenId pick_needle_token(const ModelBundle& model, std::size_t probe_layer);

struct NeedleGrid {
  std::vector<std::size_t> lengths = {8, 16, 24, 32, 40, 48, 56, 64};  // haystack groups
  std::vector<double> depths = {0.0, 1.0 / 7, 2.0 / 7, 3.0 / 7, 4.0 / 7, 5.0 / 7, 6.0 / 7, 1.0};
  std::vector<TokenId> pattern;  // chosen by pick_needle_token when empty
  NeedleSetup setup;
  std::size_t jobs = 1;
};

struct NeedleReport {
  std::vector<NeedleCell> cells;  // length-major, then depth
  std::vector<TokenId> pattern;
  double selection_rate = 0.0;
  double answer_rate = 0.0;
  double success_rate = 0.0;

  nlohmann::json to_json(const NeedleGrid& grid) const;
  std::string to_csv() const;
};

/// depth in [0, 1] maps to group round(depth * (length - 1)).
NeedleReport run_needle_grid(const NeedleGrid& grid);

}  // namespace chunkkv::tools
