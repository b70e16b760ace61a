// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

namespace chunkkv::tools {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct AcceptanceOptions {
  std::size_t jobs = 1;
  std::vector<int> only;  // empty runs every criterion
};

CriterionResult check_degenerate_equivalence();
CriterionResult check_visibility_soundness();
CriterionResult check_cost_exactness();
CriterionResult check_prefill_scaling(std::size_t jobs = 1);
CriterionResult check_reduction_representability(std::size_t jobs = 1);
CriterionResult check_bilevel_fidelity();
CriterionResult check_needle_harness(std::size_t jobs = 1);
CriterionResult check_frame_sampler();

/// Runs the selected criteria in order; `on_result` sees each as it finishes.
std::vector<CriterionResult> run_acceptance(
    const AcceptanceOptions& options,
    const std::function<void(const CriterionResult&)>& on_result = {});

/// "PASS [n] name: detail (x.x s)"
std::string format_result(const CriterionResult& result);

}  // namespace chunkkv::tools
