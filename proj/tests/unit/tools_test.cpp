// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "chunkkv/cost_model.hpp"
#include "chunkkv/tools/experiment.hpp"
#include "chunkkv/tools/needle.hpp"
#include "chunkkv/tools/parallel.hpp"
#include "chunkkv/tools/pipeline.hpp"
#include "chunkkv/tools/sweep.hpp"

namespace chunkkv::tools {
namespace {

using nlohmann::json;

TEST(ExperimentConfig, DefaultsRoundTrip) {
  const ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(ExperimentConfig, PartialJsonKeepsDefaults) {
  const ExperimentConfig c = config_from_json(json::parse(R"({
    "chunk": {"window_groups": 6, "step_groups": 3, "timestamp_history": false},
    "bilevel": {"top_k": 3, "oracle": "attn", "probe_layer": 0},
    "layout": {"duration_s": 40}
  })"));
  EXPECT_EQ(c.chunk.window_groups, 6u);
  EXPECT_FALSE(c.chunk.keep_timestamp_history);
  EXPECT_EQ(c.bilevel.oracle, OracleKind::AttentionScore);
  EXPECT_EQ(c.bilevel.probe_layer, std::optional<std::size_t>(0));
  EXPECT_EQ(c.bilevel.pool_factor, BiLevelParams{}.pool_factor);
  EXPECT_DOUBLE_EQ(c.layout.duration_s, 40.0);
  EXPECT_NE(config_hash(c), config_hash(ExperimentConfig{}));
}

TEST(ExperimentConfig, RejectsBadInput) {
  EXPECT_THROW(config_from_json(json::parse(R"({"chunk": {"windw": 3}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"bogus": 1})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"chunk": {"window_groups": 2, "step_groups": 3}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"bilevel": {"oracle": "mllm"}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"bilevel": {"top_k": -1}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"layout": {"max_fps": 0.5}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"model": {"hidden_dim": 15}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"chunk": {"window_groups": "wide"}})")), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(ExperimentConfig, OutputDirPrecedence) {
  ExperimentConfig c;
  c.output_dir = "from_config";
  ::unsetenv(kOutDirEnv);
  EXPECT_EQ(resolve_output_dir(c, std::nullopt), "from_config");
  ::setenv(kOutDirEnv, "from_env", 1);
  EXPECT_EQ(resolve_output_dir(c, std::nullopt), "from_env");
  EXPECT_EQ(resolve_output_dir(c, std::filesystem::path("from_flag")), "from_flag");
  ::unsetenv(kOutDirEnv);
}

TEST(Pipeline, DegenerateConfigIsOracleEquivalent) {
  ExperimentConfig c;
  c.layout.duration_s = 16;  // 64 frames at 4 fps -> 16 groups
  c.chunk = ChunkConfig{16, 8, true};
  c.bilevel.top_k = 1;
  c.max_new_tokens = 4;
  const RunResult r = run_pipeline(c);
  ASSERT_TRUE(r.oracle_equivalent.has_value());
  EXPECT_TRUE(*r.oracle_equivalent);
  EXPECT_EQ(r.report.at("oracle_equivalent"), true);
  EXPECT_DOUBLE_EQ(r.kv_fraction, 1.0);
}

TEST(Pipeline, DefaultConfigFractionMatchesFormula) {
  const ExperimentConfig c;
  const RunResult r = run_pipeline(c);
  EXPECT_EQ(r.report.at("layout").at("n_groups"), 256);
  EXPECT_DOUBLE_EQ(r.kv_fraction, r.kv_fraction_predicted);
  EXPECT_FALSE(r.oracle_equivalent.has_value());
  EXPECT_TRUE(r.report.at("oracle_equivalent").is_null());
  EXPECT_EQ(r.report.at("prefill").at("prediction_matches"), true);
  EXPECT_EQ(r.report.at("config_hash"), config_hash(c));
  EXPECT_EQ(r.report.at("bilevel").at("scores").size(), r.report.at("plan").at("n_chunks").get<std::size_t>());
  EXPECT_EQ(r.generated.size(), c.max_new_tokens);
}

TEST(Pipeline, SameSeedGivesIdenticalReports) {
  ExperimentConfig c;
  c.layout.duration_s = 40;
  EXPECT_EQ(run_pipeline(c).report.dump(2), run_pipeline(c).report.dump(2));
}

TEST(Needle, SpecValidation) {
  const ModelConfig m = NeedleSetup::position_free_model();
  const VocabLayout v = VocabLayout::for_vocab(m.vocab_size);
  NeedleSpec s{8, 8, {v.visual_begin}};
  EXPECT_THROW(s.validate(m), ConfigError);
  s.needle_group_index = 7;
  EXPECT_NO_THROW(s.validate(m));
  s.needle_token_pattern = {40};
  EXPECT_THROW(s.validate(m), ConfigError);
  s.needle_token_pattern = {};
  EXPECT_THROW(s.validate(m), ConfigError);
}

TEST(Needle, SingleCellAtDepthZero) {
  NeedleGrid g;
  g.lengths = {8};
  g.depths = {0.0};
  const NeedleReport r = run_needle_grid(g);
  ASSERT_EQ(r.cells.size(), 1u);
  EXPECT_EQ(r.cells[0].needle_group, 0u);
  EXPECT_EQ(r.cells[0].needle_chunk, 0u);
  EXPECT_TRUE(r.cells[0].selected);
  EXPECT_EQ(r.cells[0].rank, 1u);
  const auto j = r.to_json(g);
  EXPECT_EQ(j.at("cells").size(), 1u);
  std::istringstream csv(r.to_csv());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 2u);
}

TEST(Needle, SelectionBoundsOnSmallGrid) {
  NeedleGrid g;
  g.lengths = {8, 24, 40};
  g.depths = {0.0, 0.5, 1.0};
  EXPECT_DOUBLE_EQ(run_needle_grid(g).selection_rate, 1.0);
  g.setup.oracle = OracleKind::AttentionScore;
  EXPECT_DOUBLE_EQ(run_needle_grid(g).selection_rate, 1.0);
  g.setup.top_k = 0;
  g.setup.pool_factor = 16;
  const NeedleReport none = run_needle_grid(g);
  EXPECT_DOUBLE_EQ(none.selection_rate, 0.0);
  EXPECT_DOUBLE_EQ(none.success_rate, 0.0);
}

TEST(Needle, RejectsBadDepth) {
  NeedleGrid g;
  g.lengths = {8};
  g.depths = {1.5};
  EXPECT_THROW(run_needle_grid(g), ConfigError);
}

TEST(Sweep, EmptyRangeGivesHeaderOnly) {
  SweepRanges r;
  r.tokens.clear();
  const auto rows = run_sweep(r, SweepSetup{});
  EXPECT_TRUE(rows.empty());
  const std::string csv = sweep_csv(rows);
  EXPECT_EQ(csv.rfind("N,window,step,k,p,flops_total,flops_ratio,kv_fraction,wall_ms", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
}

TEST(Sweep, LinearFlopsAndBoundedResidency) {
  SweepRanges r;
  r.tokens = {1024, 2048, 4096, 8192};
  SweepSetup s;
  s.jobs = 1;
  for (bool history : {true, false}) {
    r.timestamp_history = history;
    const auto rows = run_sweep(r, s);
    ASSERT_EQ(rows.size(), 4u);
    std::vector<double> x, y;
    for (const auto& row : rows) {
      x.push_back(static_cast<double>(row.n_tokens));
      y.push_back(static_cast<double>(row.flops_total));
      EXPECT_EQ(row.flops_total, row.flops_predicted);
      EXPECT_EQ(row.wall_ms, 0.0);
      EXPECT_DOUBLE_EQ(row.kv_fraction, row.kv_fraction_predicted);
      EXPECT_EQ(row.peak_window_tokens, rows.front().peak_window_tokens);
      if (!history) EXPECT_EQ(row.peak_resident_tokens, rows.front().peak_resident_tokens);
    }
    EXPECT_GE(fit_line(x, y).r2, 0.99);
  }
}

TEST(FitLine, ExactLine) {
  const std::vector<double> x{1, 2, 3, 4}, y{3, 5, 7, 9};
  const LinearFit f = fit_line(x, y);
  EXPECT_DOUBLE_EQ(f.slope, 2.0);
  EXPECT_DOUBLE_EQ(f.intercept, 1.0);
  EXPECT_DOUBLE_EQ(f.r2, 1.0);
}

TEST(ParallelFor, VisitsEveryIndexAndPropagatesErrors) {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 100);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw std::runtime_error("x"); }),
               std::runtime_error);
}

}  // namespace
}  // namespace chunkkv::tools
