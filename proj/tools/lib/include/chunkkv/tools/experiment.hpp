// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkkv/kv_store.hpp"
#include "chunkkv/model.hpp"
#include "chunkkv/prefill.hpp"
#include "chunkkv/sequence.hpp"

namespace chunkkv::tools {

/// Bad or inconsistent experiment configuration (CLI exit code 3).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutDirEnv = "CHUNKKV_OUT_DIR";

struct LayoutParams {
  double duration_s = 256.0;
  SamplingPolicy sampling{1.0, 1024, 4.0};
  std::size_t images = 0;  // > 0 builds an image layout instead of a video
  std::size_t system_len = 4;
  std::size_t tokens_per_group = 8;
  std::size_t spatial = 32;
  std::size_t channels = 4;
  std::uint64_t feature_seed = 11;
  std::vector<TokenId> query;  // explicit ids; drawn from feature_seed when empty
  std::size_t query_len = 4;
};

struct BiLevelParams {
  std::int64_t top_k = 4;
  std::size_t pool_factor = 4;
  OracleKind oracle = OracleKind::Centroid;
  std::optional<std::size_t> probe_layer;  // middle layer when unset
};

struct ExperimentConfig {
  ModelConfig model;
  std::optional<std::filesystem::path> checkpoint;  // overrides `model` when set
  std::optional<std::filesystem::path> layout_file;  // overrides `layout` when set
  LayoutParams layout;
  ChunkConfig chunk;
  BiLevelParams bilevel;
  std::size_t max_new_tokens = 8;
  std::filesystem::path output_dir = "out";

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// CRC-64 of the canonical JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Flag, then environment, then the config's own value.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config,
                                         const std::optional<std::filesystem::path>& flag);

ModelBundle load_model(const ExperimentConfig& config);
SequenceLayout load_layout(const ExperimentConfig& config, const ModelConfig& model);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace chunkkv::tools
