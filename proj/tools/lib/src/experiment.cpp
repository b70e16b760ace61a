// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/tools/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <random>
#include <sstream>

#include "chunkkv/checkpoint.hpp"

namespace chunkkv::tools {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

json model_json(const ModelConfig& m) {
  return {{"num_layers", m.num_layers}, {"num_heads", m.num_heads}, {"head_dim", m.head_dim},
          {"hidden_dim", m.hidden_dim}, {"ffn_dim", m.ffn_dim},     {"vocab_size", m.vocab_size},
          {"max_position", m.max_position}, {"rotary_dim", m.rotary_dim}, {"rope_base", m.rope_base},
          {"seed", m.seed}};
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    if (!checkpoint) model.validate();
    layout.sampling.validate();
    chunk.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!layout_file && layout.images == 0 && !(layout.duration_s > 0.0)) {
    throw ConfigError("layout.duration_s must be positive");
  }
  if (layout.system_len == 0) throw ConfigError("layout.system_len must be at least 1");
  if (layout.tokens_per_group == 0) throw ConfigError("layout.tokens_per_group must be at least 1");
  if (layout.spatial % layout.tokens_per_group != 0) {
    throw ConfigError("layout.spatial must be a multiple of layout.tokens_per_group");
  }
  if (layout.query.empty() && layout.query_len == 0) {
    throw ConfigError("a query is required (layout.query or layout.query_len)");
  }
  if (bilevel.top_k < 0) throw ConfigError("bilevel.top_k must be non-negative");
  if (bilevel.pool_factor == 0) throw ConfigError("bilevel.pool_factor must be at least 1");
  if (!checkpoint && bilevel.probe_layer && *bilevel.probe_layer >= model.num_layers) {
    throw ConfigError("bilevel.probe_layer out of range");
  }
}

json to_json(const ExperimentConfig& c) {
  json model = model_json(c.model);
  if (c.checkpoint) model["checkpoint"] = c.checkpoint->string();
  json layout = {
      {"duration_s", c.layout.duration_s},
      {"base_fps", c.layout.sampling.base_fps},
      {"max_frames", c.layout.sampling.max_frames},
      {"max_fps", c.layout.sampling.max_fps},
      {"images", c.layout.images},
      {"system_len", c.layout.system_len},
      {"tokens_per_group", c.layout.tokens_per_group},
      {"spatial", c.layout.spatial},
      {"channels", c.layout.channels},
      {"feature_seed", c.layout.feature_seed},
      {"query", c.layout.query},
      {"query_len", c.layout.query_len},
  };
  if (c.layout_file) layout["file"] = c.layout_file->string();
  json bilevel = {{"top_k", c.bilevel.top_k},
                  {"pool_factor", c.bilevel.pool_factor},
                  {"oracle", to_string(c.bilevel.oracle)}};
  if (c.bilevel.probe_layer) bilevel["probe_layer"] = *c.bilevel.probe_layer;
  return {
      {"model", model},
      {"layout", layout},
      {"chunk",
       {{"window_groups", c.chunk.window_groups},
        {"step_groups", c.chunk.step_groups},
        {"timestamp_history", c.chunk.keep_timestamp_history}}},
      {"bilevel", bilevel},
      {"decode", {{"max_new_tokens", c.max_new_tokens}}},
      {"output_dir", c.output_dir.string()},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    check_keys(j, {"model", "layout", "chunk", "bilevel", "decode", "output_dir"}, "config");
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m,
                 {"num_layers", "num_heads", "head_dim", "hidden_dim", "ffn_dim", "vocab_size",
                  "max_position", "rotary_dim", "rope_base", "seed", "checkpoint"},
                 "model");
      read(m, "num_layers", c.model.num_layers);
      read(m, "num_heads", c.model.num_heads);
      read(m, "head_dim", c.model.head_dim);
      c.model.hidden_dim = c.model.num_heads * c.model.head_dim;
      c.model.rotary_dim = c.model.head_dim;
      read(m, "hidden_dim", c.model.hidden_dim);
      read(m, "ffn_dim", c.model.ffn_dim);
      read(m, "vocab_size", c.model.vocab_size);
      read(m, "max_position", c.model.max_position);
      read(m, "rotary_dim", c.model.rotary_dim);
      read(m, "rope_base", c.model.rope_base);
      read(m, "seed", c.model.seed);
      if (m.contains("checkpoint")) c.checkpoint = m.at("checkpoint").get<std::string>();
    }
    if (j.contains("layout")) {
      const json& l = j.at("layout");
      check_keys(l,
                 {"duration_s", "base_fps", "max_frames", "max_fps", "images", "system_len",
                  "tokens_per_group", "spatial", "channels", "feature_seed", "query", "query_len",
                  "file"},
                 "layout");
      read(l, "duration_s", c.layout.duration_s);
      read(l, "base_fps", c.layout.sampling.base_fps);
      read(l, "max_frames", c.layout.sampling.max_frames);
      read(l, "max_fps", c.layout.sampling.max_fps);
      read(l, "images", c.layout.images);
      read(l, "system_len", c.layout.system_len);
      read(l, "tokens_per_group", c.layout.tokens_per_group);
      read(l, "spatial", c.layout.spatial);
      read(l, "channels", c.layout.channels);
      read(l, "feature_seed", c.layout.feature_seed);
      read(l, "query", c.layout.query);
      read(l, "query_len", c.layout.query_len);
      if (l.contains("file")) c.layout_file = l.at("file").get<std::string>();
    }
    if (j.contains("chunk")) {
      const json& ch = j.at("chunk");
      check_keys(ch, {"window_groups", "step_groups", "timestamp_history"}, "chunk");
      read(ch, "window_groups", c.chunk.window_groups);
      read(ch, "step_groups", c.chunk.step_groups);
      read(ch, "timestamp_history", c.chunk.keep_timestamp_history);
    }
    if (j.contains("bilevel")) {
      const json& b = j.at("bilevel");
      check_keys(b, {"top_k", "pool_factor", "oracle", "probe_layer"}, "bilevel");
      read(b, "top_k", c.bilevel.top_k);
      read(b, "pool_factor", c.bilevel.pool_factor);
      if (b.contains("oracle")) c.bilevel.oracle = oracle_kind_from_string(b.at("oracle").get<std::string>());
      if (b.contains("probe_layer")) c.bilevel.probe_layer = b.at("probe_layer").get<std::size_t>();
    }
    if (j.contains("decode")) {
      const json& d = j.at("decode");
      check_keys(d, {"max_new_tokens"}, "decode");
      read(d, "max_new_tokens", c.max_new_tokens);
    }
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = to_json(config).dump();
  return hex64(crc64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size())));
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& config,
                                         const std::optional<std::filesystem::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') return env;
  return config.output_dir;
}

ModelBundle load_model(const ExperimentConfig& config) {
  if (config.checkpoint) return load_checkpoint(*config.checkpoint);
  return init_model(config.model);
}

SequenceLayout load_layout(const ExperimentConfig& config, const ModelConfig& model) {
  const LayoutParams& p = config.layout;
  const VocabLayout vocab = VocabLayout::for_vocab(model.vocab_size);
  if (config.layout_file) {
    std::ifstream f(*config.layout_file);
    if (!f) throw ConfigError("cannot read layout " + config.layout_file->string());
    json j;
    try {
      f >> j;
      SequenceLayout layout = layout_from_json(j);
      for (TokenId id : layout.tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size) {
          throw ConfigError("layout token id " + std::to_string(id) + " outside the model vocabulary");
        }
      }
      return layout;
    } catch (const json::exception& e) {
      throw ConfigError(config.layout_file->string() + ": " + e.what());
    }
  }

  std::vector<TokenId> query = p.query;
  if (query.empty()) {
    std::mt19937_64 rng(p.feature_seed + 1);
    const auto span = static_cast<std::uint64_t>(vocab.visual_begin - VocabLayout::kTimestampEnd);
    for (std::size_t i = 0; i < p.query_len; ++i) {
      query.push_back(VocabLayout::kTimestampEnd + static_cast<TokenId>(rng() % span));
    }
  }
  if (p.images > 0) {
    const auto images = synthetic_frames(p.images, p.spatial, p.channels, p.feature_seed);
    return build_image_layout(images, p.system_len, query, p.tokens_per_group, vocab, model.max_position);
  }
  const FramePlan plan = sample_frames(p.duration_s, p.sampling);
  const auto frames = synthetic_frames(plan.n_frames(), p.spatial, p.channels, p.feature_seed);
  return build_layout(plan, frames, p.system_len, query, p.tokens_per_group, vocab, model.max_position);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace chunkkv::tools
