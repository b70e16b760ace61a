// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkkv/tools/experiment.hpp"

namespace chunkkv::tools {

struct RunOptions {
  std::optional<std::filesystem::path> save_store_dir;
};

struct RunResult {
  nlohmann::json report;
  std::vector<TokenId> generated;
  double kv_fraction = 0.0;
  double kv_fraction_predicted = 0.0;
  std::optional<bool> oracle_equivalent;  // set for single-chunk, all-dense runs
};

/// plan -> prefill -> pool -> score -> assemble -> decode, with cost accounting
/// and a per-chunk selection audit.
RunResult run_pipeline(const ExperimentConfig& config, const RunOptions& options = {});

}  // namespace chunkkv::tools
