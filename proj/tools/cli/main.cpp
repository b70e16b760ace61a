// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "chunkkv/checkpoint.hpp"
#include "chunkkv/sequence.hpp"
#include "chunkkv/tools/acceptance.hpp"
#include "chunkkv/tools/experiment.hpp"
#include "chunkkv/tools/needle.hpp"
#include "chunkkv/tools/parallel.hpp"
#include "chunkkv/tools/pipeline.hpp"
#include "chunkkv/tools/sweep.hpp"

namespace {

using namespace chunkkv;
using namespace chunkkv::tools;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitRuntime = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    std::stringstream cell(item);
    T value{};
    if (!(cell >> value) || !cell.eof()) throw UsageError(std::string(flag) + ": cannot parse '" + item + "'");
    out.push_back(value);
  }
  return out;
}

bool parse_switch(const std::string& s, const char* flag) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw UsageError(std::string(flag) + " expects on or off");
}

// Flags shared by build and run; each overrides the config file when given.
struct Overrides {
  std::optional<std::string> config;
  std::optional<std::filesystem::path> out_dir;
  std::optional<double> duration, base_fps, max_fps;
  std::optional<std::size_t> max_frames, images, system_len, tokens_per_group, spatial, channels,
      query_len;
  std::optional<std::uint64_t> feature_seed, model_seed;
  std::optional<std::string> query;
  std::optional<std::size_t> layers, heads, head_dim, ffn_dim, vocab, rotary_dim;
  std::optional<std::string> checkpoint, layout;
  std::optional<std::size_t> window_groups, step_groups, pool_factor, probe_layer, max_new_tokens;
  std::optional<std::string> timestamp_history, oracle;
  std::optional<std::int64_t> top_k;

  void add_layout_flags(CLI::App* app) {
    app->add_option("--config", config, "Experiment config (JSON)");
    app->add_option("--out-dir", out_dir, std::string("Output directory (default: $") + kOutDirEnv +
                                              ", then the config's output_dir)");
    app->add_option("--duration", duration, "Video duration in seconds");
    app->add_option("--base-fps", base_fps, "Base sampling rate");
    app->add_option("--max-frames", max_frames, "Frame upper bound");
    app->add_option("--max-fps", max_fps, "Maximum sampling rate");
    app->add_option("--images", images, "Build an image layout with this many images");
    app->add_option("--system-len", system_len, "System prompt tokens");
    app->add_option("--tokens-per-group", tokens_per_group, "Visual tokens per 4-frame group");
    app->add_option("--spatial", spatial, "Synthetic feature rows per frame");
    app->add_option("--channels", channels, "Synthetic feature channels");
    app->add_option("--feature-seed", feature_seed, "Seed for synthetic frame features");
    app->add_option("--query", query, "Comma-separated query token ids");
    app->add_option("--query-len", query_len, "Random query length when --query is absent");
    app->add_option("--layers", layers, "Model layers");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--head-dim", head_dim, "Head dimension");
    app->add_option("--ffn-dim", ffn_dim, "Feed-forward width");
    app->add_option("--vocab", vocab, "Vocabulary size");
    app->add_option("--rotary-dim", rotary_dim, "Rotary dims per head (0 disables)");
    app->add_option("--seed", model_seed, "Model weight seed");
    app->add_option("--checkpoint", checkpoint, "Load model weights from a checkpoint");
  }

  void add_run_flags(CLI::App* app) {
    app->add_option("--layout", layout, "Use a layout JSON written by `build`");
    app->add_option("--window-groups", window_groups, "Chunk window in groups");
    app->add_option("--step-groups", step_groups, "Chunk step in groups");
    app->add_option("--timestamp-history", timestamp_history, "on|off");
    app->add_option("--top-k", top_k, "Chunks loaded dense at decode");
    app->add_option("--pool-factor", pool_factor, "Tokens pooled into one sparse KV");
    app->add_option("--oracle", oracle, "centroid|attn")->check(CLI::IsMember({"centroid", "attn"}));
    app->add_option("--probe-layer", probe_layer, "Layer used for relevance scoring");
    app->add_option("--max-new-tokens", max_new_tokens, "Greedy decode length");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config ? load_config(*config) : ExperimentConfig{};
    LayoutParams& l = c.layout;
    if (duration) l.duration_s = *duration;
    if (base_fps) l.sampling.base_fps = *base_fps;
    if (max_frames) l.sampling.max_frames = *max_frames;
    if (max_fps) l.sampling.max_fps = *max_fps;
    if (images) l.images = *images;
    if (system_len) l.system_len = *system_len;
    if (tokens_per_group) l.tokens_per_group = *tokens_per_group;
    if (spatial) l.spatial = *spatial;
    if (channels) l.channels = *channels;
    if (feature_seed) l.feature_seed = *feature_seed;
    if (query) l.query = parse_list<TokenId>(*query, "--query");
    if (query_len) l.query_len = *query_len;
    ModelConfig& m = c.model;
    if (heads || head_dim) {
      if (heads) m.num_heads = *heads;
      if (head_dim) m.head_dim = *head_dim;
      m.hidden_dim = m.num_heads * m.head_dim;
      m.rotary_dim = m.head_dim;
    }
    if (layers) m.num_layers = *layers;
    if (ffn_dim) m.ffn_dim = *ffn_dim;
    if (vocab) m.vocab_size = *vocab;
    if (rotary_dim) m.rotary_dim = *rotary_dim;
    if (model_seed) m.seed = *model_seed;
    if (checkpoint) c.checkpoint = *checkpoint;
    if (layout) c.layout_file = *layout;
    if (window_groups) c.chunk.window_groups = *window_groups;
    if (step_groups) c.chunk.step_groups = *step_groups;
    if (timestamp_history) c.chunk.keep_timestamp_history = parse_switch(*timestamp_history, "--timestamp-history");
    if (top_k) c.bilevel.top_k = *top_k;
    if (pool_factor) c.bilevel.pool_factor = *pool_factor;
    if (oracle) c.bilevel.oracle = oracle_kind_from_string(*oracle);
    if (probe_layer) c.bilevel.probe_layer = *probe_layer;
    if (max_new_tokens) c.max_new_tokens = *max_new_tokens;
    c.validate();
    return c;
  }
};

int cmd_build(const Overrides& o, const std::optional<std::filesystem::path>& out_file) {
  const bool config_has_duration = [&] {
    if (!o.config) return false;
    std::ifstream f(*o.config);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception&) {
      return false;
    }
    return j.contains("layout") && j["layout"].contains("duration_s");
  }();
  if (!o.duration && !config_has_duration && !(o.images && *o.images > 0)) {
    throw UsageError("build: --duration (or --images) is required");
  }
  const ExperimentConfig c = o.resolve();
  const ModelConfig model = c.checkpoint ? load_checkpoint(*c.checkpoint).config : c.model;
  const SequenceLayout layout = load_layout(c, model);
  const auto path = out_file.value_or(resolve_output_dir(c, o.out_dir) / "layout.json");
  write_text(path, to_json(layout).dump(2) + "\n");
  std::printf("layout: %zu tokens, %zu groups, %zu frames at %.3g fps -> %s\n", layout.size(),
              layout.n_groups(), layout.n_frames, layout.effective_fps, path.string().c_str());
  return kExitOk;
}

int cmd_run(const Overrides& o, bool save_store) {
  const ExperimentConfig c = o.resolve();
  const auto dir = resolve_output_dir(c, o.out_dir);
  RunOptions options;
  if (save_store) options.save_store_dir = dir / "kv_store";
  const RunResult r = run_pipeline(c, options);
  write_text(dir / "report.json", r.report.dump(2) + "\n");
  const auto& p = r.report.at("prefill");
  std::printf("chunks %zu, prefill FLOPs ratio %.4f, decode KV fraction %.4f (predicted %.4f), %zu tokens generated",
              r.report.at("plan").at("n_chunks").get<std::size_t>(), p.at("flops_ratio").get<double>(),
              r.kv_fraction, r.kv_fraction_predicted, r.generated.size());
  if (r.oracle_equivalent) std::printf(", oracle_equivalent %s", *r.oracle_equivalent ? "true" : "false");
  std::printf("\nreport: %s\n", (dir / "report.json").string().c_str());
  return kExitOk;
}

struct NeedleFlags {
  std::string lengths = "8,16,24,32,40,48,56,64";
  std::string depths = "0,0.142857142857,0.285714285714,0.428571428571,0.571428571429,0.714285714286,0.857142857143,1";
  std::optional<std::size_t> haystack_groups, needle_index;
  std::optional<std::string> pattern;
  std::int64_t top_k = 1;
  std::size_t pool_factor = 4;
  std::string oracle = "centroid";
  std::size_t probe_layer = 0;
  std::size_t window_groups = 2;
  std::size_t step_groups = 2;
  std::string timestamp_history = "on";
  std::size_t tokens_per_group = 4;
  std::uint64_t seed = 7;
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> out_dir;
};

int cmd_needle(const NeedleFlags& f) {
  NeedleGrid grid;
  NeedleSetup& s = grid.setup;
  s.top_k = f.top_k;
  s.pool_factor = f.pool_factor;
  s.oracle = oracle_kind_from_string(f.oracle);
  s.probe_layer = f.probe_layer;
  s.chunk = ChunkConfig{f.window_groups, f.step_groups, parse_switch(f.timestamp_history, "--timestamp-history")};
  s.tokens_per_group = f.tokens_per_group;
  s.model.seed = f.seed;
  try {
    s.chunk.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (s.top_k < 0) throw ConfigError("--top-k must be non-negative");
  if (s.pool_factor == 0) throw ConfigError("--pool-factor must be at least 1");
  if (s.probe_layer >= s.model.num_layers) throw ConfigError("--probe-layer out of range");
  if (f.pattern) grid.pattern = parse_list<TokenId>(*f.pattern, "--pattern");
  grid.jobs = f.jobs;
  ExperimentConfig defaults;
  const auto dir = resolve_output_dir(defaults, f.out_dir);

  if (f.needle_index || f.haystack_groups) {
    if (!f.needle_index || !f.haystack_groups) {
      throw UsageError("needle: --haystack-groups and --needle-index go together");
    }
    const ModelBundle model = init_model(s.model);
    NeedleSpec spec;
    spec.haystack_groups = *f.haystack_groups;
    spec.needle_group_index = *f.needle_index;
    spec.needle_token_pattern = grid.pattern.empty() ? std::vector<TokenId>{pick_needle_token(model, s.probe_layer)}
                                                     : grid.pattern;
    spec.validate(model.config);
    const double depth = spec.haystack_groups > 1 ? static_cast<double>(spec.needle_group_index) /
                                                        static_cast<double>(spec.haystack_groups - 1)
                                                  : 0.0;
    NeedleReport report;
    report.pattern = spec.needle_token_pattern;
    report.cells = {run_needle_cell(model, spec, s, depth)};
    report.selection_rate = report.cells[0].selected;
    report.answer_rate = report.cells[0].answer_hit;
    report.success_rate = report.cells[0].success;
    grid.lengths = {spec.haystack_groups};
    grid.depths = {depth};
    write_text(dir / "needle.json", report.to_json(grid).dump(2) + "\n");
    write_text(dir / "needle.csv", report.to_csv());
    std::printf("needle chunk %zu of %zu: selected %s, rank %zu, answer %s\n", report.cells[0].needle_chunk,
                report.cells[0].n_chunks, report.cells[0].selected ? "yes" : "no", report.cells[0].rank,
                report.cells[0].answer_hit ? "hit" : "miss");
    return kExitOk;
  }

  grid.lengths = parse_list<std::size_t>(f.lengths, "--lengths");
  grid.depths = parse_list<double>(f.depths, "--depths");
  for (std::size_t n : grid.lengths) {
    if (n == 0) throw ConfigError("--lengths entries must be positive");
  }
  const NeedleReport report = run_needle_grid(grid);
  write_text(dir / "needle.json", report.to_json(grid).dump(2) + "\n");
  write_text(dir / "needle.csv", report.to_csv());
  std::printf("%zu cells: selection %.1f%%, answer %.1f%%, success %.1f%% -> %s\n", report.cells.size(),
              100.0 * report.selection_rate, 100.0 * report.answer_rate, 100.0 * report.success_rate,
              (dir / "needle.json").string().c_str());
  return kExitOk;
}

struct SweepFlags {
  std::string tokens = "1024,2048,4096,8192,16384,32768";
  std::string windows = "8";
  std::string steps = "4";
  std::string top_ks = "0,1,2,4,8";
  std::string pool_factors = "2,4,8";
  std::string timestamp_history = "on";
  std::size_t tokens_per_group = 64;
  bool timing = false;
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> out_dir;
};

int cmd_sweep(const SweepFlags& f) {
  SweepRanges r;
  r.tokens = parse_list<std::size_t>(f.tokens, "--tokens");
  r.windows = parse_list<std::size_t>(f.windows, "--windows");
  r.steps = parse_list<std::size_t>(f.steps, "--steps");
  r.top_ks = parse_list<std::int64_t>(f.top_ks, "--top-k");
  r.pool_factors = parse_list<std::size_t>(f.pool_factors, "--pool-factor");
  r.timestamp_history = parse_switch(f.timestamp_history, "--timestamp-history");
  for (std::size_t p : r.pool_factors) {
    if (p == 0) throw ConfigError("--pool-factor entries must be positive");
  }
  for (std::int64_t k : r.top_ks) {
    if (k < 0) throw ConfigError("--top-k entries must be non-negative");
  }
  SweepSetup s;
  s.tokens_per_group = f.tokens_per_group;
  s.timing = f.timing;
  s.jobs = f.jobs;
  const auto rows = run_sweep(r, s);
  ExperimentConfig defaults;
  const auto path = f.out.value_or(resolve_output_dir(defaults, f.out_dir) / "sweep.csv");
  write_text(path, sweep_csv(rows));
  std::printf("%zu rows -> %s\n", rows.size(), path.string().c_str());
  return kExitOk;
}

int cmd_verify(const std::vector<int>& only, std::size_t jobs) {
  AcceptanceOptions options;
  options.only = only;
  options.jobs = jobs;
  const auto results = run_acceptance(options, [](const CriterionResult& r) {
    std::printf("%s\n", format_result(r).c_str());
    std::fflush(stdout);
  });
  std::size_t passed = 0;
  for (const auto& r : results) passed += r.passed;
  std::printf("%zu/%zu criteria passed\n", passed, results.size());
  return passed == results.size() ? kExitOk : kExitRuntime;
}

int cmd_model(const Overrides& o, const std::filesystem::path& out) {
  const ExperimentConfig c = o.resolve();
  const ModelBundle model = init_model(c.model);
  save_checkpoint(model, out);
  std::printf("checkpoint %s (crc64 %s)\n", out.string().c_str(), hex64(model_checksum(model)).c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chunkkv: chunked prefill and bi-level KV decoding on a toy transformer"};
  app.require_subcommand(1);

  Overrides build_flags;
  std::optional<std::filesystem::path> build_out;
  auto* build = app.add_subcommand("build", "Sample frames and write a layout JSON");
  build_flags.add_layout_flags(build);
  build->add_option("--out", build_out, "Layout file (default: <out-dir>/layout.json)");

  Overrides run_flags;
  bool save_store = false;
  auto* run = app.add_subcommand("run", "Prefill, assemble the mixed cache and decode; writes report.json");
  run_flags.add_layout_flags(run);
  run_flags.add_run_flags(run);
  run->add_flag("--save-store", save_store, "Also write the KV store under <out-dir>/kv_store");

  NeedleFlags needle_flags;
  auto* needle = app.add_subcommand("needle", "Needle-in-haystack grid over (length, depth)");
  needle->add_option("--lengths", needle_flags.lengths, "Haystack lengths in groups (comma list)");
  needle->add_option("--depths", needle_flags.depths, "Needle depths in [0,1] (comma list)");
  needle->add_option("--haystack-groups", needle_flags.haystack_groups, "Single cell: haystack length");
  needle->add_option("--needle-index", needle_flags.needle_index, "Single cell: needle group index");
  needle->add_option("--pattern", needle_flags.pattern, "Needle token ids (comma list)");
  needle->add_option("--top-k", needle_flags.top_k, "Chunks loaded dense");
  needle->add_option("--pool-factor", needle_flags.pool_factor, "Sparse pooling factor");
  needle->add_option("--oracle", needle_flags.oracle, "centroid|attn")->check(CLI::IsMember({"centroid", "attn"}));
  needle->add_option("--probe-layer", needle_flags.probe_layer, "Scoring layer");
  needle->add_option("--window-groups", needle_flags.window_groups, "Chunk window in groups");
  needle->add_option("--step-groups", needle_flags.step_groups, "Chunk step in groups");
  needle->add_option("--timestamp-history", needle_flags.timestamp_history, "on|off");
  needle->add_option("--tokens-per-group", needle_flags.tokens_per_group, "Visual tokens per group");
  needle->add_option("--seed", needle_flags.seed, "Model seed");
  needle->add_option("--jobs", needle_flags.jobs, "Worker threads");
  needle->add_option("--out-dir", needle_flags.out_dir, "Output directory");

  SweepFlags sweep_flags;
  auto* sweep = app.add_subcommand("sweep", "Measured and predicted cost over a configuration grid (CSV)");
  sweep->add_option("--tokens", sweep_flags.tokens, "Prefix lengths (comma list; empty for none)")->expected(0, 1);
  sweep->add_option("--windows", sweep_flags.windows, "Windows in groups")->expected(0, 1);
  sweep->add_option("--steps", sweep_flags.steps, "Steps in groups")->expected(0, 1);
  sweep->add_option("--top-k", sweep_flags.top_ks, "Dense chunk counts")->expected(0, 1);
  sweep->add_option("--pool-factor", sweep_flags.pool_factors, "Pooling factors")->expected(0, 1);
  sweep->add_option("--timestamp-history", sweep_flags.timestamp_history, "on|off");
  sweep->add_option("--tokens-per-group", sweep_flags.tokens_per_group, "Visual tokens per group");
  sweep->add_flag("--timing", sweep_flags.timing, "Fill wall_ms (makes output run-dependent)");
  sweep->add_option("--jobs", sweep_flags.jobs, "Worker threads");
  sweep->add_option("--out", sweep_flags.out, "CSV path (default: <out-dir>/sweep.csv)");
  sweep->add_option("--out-dir", sweep_flags.out_dir, "Output directory");

  std::vector<int> only;
  std::size_t verify_jobs = default_jobs();
  auto* verify = app.add_subcommand("verify", "Run the equivalence and property suite");
  verify->add_option("--only", only, "Criterion ids to run")->check(CLI::Range(1, 8));
  verify->add_option("--jobs", verify_jobs, "Worker threads");

  Overrides model_flags;
  std::filesystem::path model_out = "model.ckpt";
  auto* model = app.add_subcommand("model", "Initialize a model and write a checkpoint");
  model_flags.add_layout_flags(model);
  model->add_option("--out", model_out, "Checkpoint path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (build->parsed()) return cmd_build(build_flags, build_out);
    if (run->parsed()) return cmd_run(run_flags, save_store);
    if (needle->parsed()) return cmd_needle(needle_flags);
    if (sweep->parsed()) return cmd_sweep(sweep_flags);
    if (verify->parsed()) return cmd_verify(only, verify_jobs);
    if (model->parsed()) return cmd_model(model_flags, model_out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
