// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace chunkkv {

void SamplingPolicy::validate() const {
  if (!(base_fps > 0.0) || !std::isfinite(base_fps)) {
    throw std::invalid_argument("SamplingPolicy: base_fps must be positive");
  }
  if (!(max_fps >= base_fps) || !std::isfinite(max_fps)) {
    throw std::invalid_argument("SamplingPolicy: max_fps must be >= base_fps");
  }
  if (max_frames < kGroupSize) {
    throw std::invalid_argument("SamplingPolicy: max_frames must be at least 4");
  }
}

namespace {

// floor(duration * rate) with a small guard against representation error
// (30 s at 4 fps must give exactly 120).
std::size_t frame_count(double duration_s, double rate) {
  return static_cast<std::size_t>(std::floor(duration_s * rate + 1e-9));
}

}  // namespace

FramePlan sample_frames(double duration_s, const SamplingPolicy& policy) {
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
    throw std::invalid_argument("sample_frames: duration must be positive");
  }
  policy.validate();

  FramePlan plan;
  plan.duration_s = duration_s;
  const std::size_t n_base = frame_count(duration_s, policy.base_fps);

  if (n_base >= policy.max_frames) {
    // Over the bound at the base rate: keep max_frames of the base-rate candidates.
    plan.timestamps.reserve(policy.max_frames);
    for (std::size_t j = 0; j < policy.max_frames; ++j) {
      const std::size_t idx = j * n_base / policy.max_frames;
      plan.timestamps.push_back(static_cast<double>(idx) / policy.base_fps);
    }
    plan.effective_fps = static_cast<double>(policy.max_frames) / duration_s;
    return plan;
  }

  double rate = policy.base_fps;
  const auto lo = static_cast<long long>(std::ceil(policy.base_fps));
  for (auto r = static_cast<long long>(std::floor(policy.max_fps)); r >= lo; --r) {
    if (frame_count(duration_s, static_cast<double>(r)) <= policy.max_frames) {
      rate = static_cast<double>(r);
      break;
    }
  }
  const std::size_t n = std::max<std::size_t>(1, frame_count(duration_s, rate));
  plan.timestamps.reserve(n);
  for (std::size_t i = 0; i < n; ++i) plan.timestamps.push_back(static_cast<double>(i) / rate);
  plan.effective_fps = rate;
  return plan;
}

FrameFeature FrameFeature::zeros(std::size_t spatial, std::size_t channels) {
  return FrameFeature{spatial, channels, std::vector<float>(spatial * channels, 0.0f)};
}

std::array<FrameFeature, kGroupSize> align_image(const FrameFeature& image) {
  return {image, image, image, image};
}

FrameFeature compress_group(std::span<const FrameFeature> group, std::size_t tokens_per_group) {
  if (group.size() != kGroupSize) {
    throw std::invalid_argument("compress_group: expected 4 frames, got " +
                                std::to_string(group.size()));
  }
  for (const auto& f : group) {
    if (!f.same_shape(group[0]) || f.data.size() != f.spatial * f.channels) {
      throw std::invalid_argument("compress_group: frame shape mismatch within group");
    }
  }
  const std::size_t spatial = group[0].spatial;
  const std::size_t channels = group[0].channels;
  if (tokens_per_group == 0 || spatial % tokens_per_group != 0) {
    throw std::invalid_argument("compress_group: spatial length " + std::to_string(spatial) +
                                " not divisible by tokens_per_group " +
                                std::to_string(tokens_per_group));
  }

  // Pairwise temporal sum keeps the mean of identical frames exact.
  std::vector<float> mean(spatial * channels);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean[i] = ((group[0].data[i] + group[1].data[i]) + (group[2].data[i] + group[3].data[i])) / 4.0f;
  }

  const std::size_t window = spatial / tokens_per_group;
  FrameFeature out = FrameFeature::zeros(tokens_per_group, channels);
  for (std::size_t tok = 0; tok < tokens_per_group; ++tok) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      float acc = 0.0f;
      for (std::size_t s = tok * window; s < (tok + 1) * window; ++s) acc += mean[s * channels + ch];
      out.data[tok * channels + ch] = acc / static_cast<float>(window);
    }
  }
  return out;
}

std::string to_string(RoleKind kind) {
  switch (kind) {
    case RoleKind::System: return "system";
    case RoleKind::Timestamp: return "timestamp";
    case RoleKind::Visual: return "visual";
    case RoleKind::Query: return "query";
  }
  return "unknown";
}

RoleKind role_kind_from_string(const std::string& s) {
  if (s == "system") return RoleKind::System;
  if (s == "timestamp") return RoleKind::Timestamp;
  if (s == "visual") return RoleKind::Visual;
  if (s == "query") return RoleKind::Query;
  throw std::invalid_argument("unknown token role '" + s + "'");
}

VocabLayout VocabLayout::for_vocab(std::size_t vocab_size) {
  VocabLayout v;
  v.vocab_size = vocab_size;
  v.visual_begin = static_cast<TokenId>(kTimestampEnd + (static_cast<TokenId>(vocab_size) - kTimestampEnd) / 2);
  v.validate();
  return v;
}

void VocabLayout::validate() const {
  if (vocab_size < static_cast<std::size_t>(kTimestampEnd) + 2) {
    throw std::invalid_argument("VocabLayout: vocabulary too small for the reserved ranges");
  }
  if (visual_begin <= kTimestampEnd || static_cast<std::size_t>(visual_begin) >= vocab_size) {
    throw std::invalid_argument("VocabLayout: visual_begin out of range");
  }
}

TokenId VocabLayout::system_token(std::size_t index) const {
  return static_cast<TokenId>(1 + index % (kSpecialEnd - 1));
}

TokenId VocabLayout::timestamp_token(double time_s) const {
  const auto whole = static_cast<long long>(std::floor(std::max(0.0, time_s)));
  return static_cast<TokenId>(kSpecialEnd + whole % (kTimestampEnd - kSpecialEnd));
}

TokenId VocabLayout::visual_token(float x) const {
  const double unit = (std::tanh(static_cast<double>(x)) + 1.0) / 2.0;
  const std::size_t n = n_visual();
  const std::size_t bucket = std::min(n - 1, static_cast<std::size_t>(unit * static_cast<double>(n)));
  return static_cast<TokenId>(visual_begin + static_cast<TokenId>(bucket));
}

std::size_t SequenceLayout::system_len() const {
  std::size_t n = 0;
  while (n < roles.size() && roles[n].kind == RoleKind::System) ++n;
  return n;
}

std::size_t SequenceLayout::n_groups() const {
  return static_cast<std::size_t>(std::count_if(
      roles.begin(), roles.end(), [](const TokenRole& r) { return r.kind == RoleKind::Timestamp; }));
}

std::size_t SequenceLayout::query_len() const {
  std::size_t n = 0;
  while (n < roles.size() && roles[roles.size() - 1 - n].kind == RoleKind::Query) ++n;
  return n;
}

void SequenceLayout::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("SequenceLayout: " + what); };
  if (roles.size() != tokens.size() || positions.size() != tokens.size()) fail("length mismatch");
  if (group_size != kGroupSize) fail("group size must be 4");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] != static_cast<Position>(i)) fail("positions must be 0..n-1");
  }
  std::size_t i = system_len();
  std::size_t group = 0;
  while (i < roles.size() && roles[i].kind == RoleKind::Timestamp) {
    for (std::size_t k = 1; k <= tokens_per_group; ++k) {
      if (i + k >= roles.size() || roles[i + k].kind != RoleKind::Visual) {
        fail("group " + std::to_string(group) + " has fewer than tokens_per_group visual tokens");
      }
      if (roles[i + k].group_id != static_cast<std::int64_t>(group)) {
        fail("visual token group_id inconsistent with order");
      }
    }
    i += 1 + tokens_per_group;
    ++group;
  }
  for (; i < roles.size(); ++i) {
    if (roles[i].kind != RoleKind::Query) fail("unexpected role after visual groups");
  }
  if (group > 0 && tokens_per_group == 0) fail("tokens_per_group must be positive");
}

SequenceLayout assemble_layout(std::span<const TokenId> system_tokens,
                               std::span<const std::vector<TokenId>> group_tokens,
                               std::span<const double> group_times,
                               std::span<const TokenId> query_tokens, const VocabLayout& vocab,
                               std::size_t max_position) {
  if (group_tokens.size() != group_times.size()) {
    throw std::invalid_argument("assemble_layout: group/time count mismatch");
  }
  const std::size_t tpg = group_tokens.empty() ? 0 : group_tokens.front().size();
  for (const auto& g : group_tokens) {
    if (g.size() != tpg || tpg == 0) {
      throw std::invalid_argument("assemble_layout: groups must share a positive token count");
    }
  }
  const std::size_t total =
      system_tokens.size() + group_tokens.size() * (1 + tpg) + query_tokens.size();
  if (total > max_position) {
    throw std::out_of_range("assemble_layout: layout length " + std::to_string(total) +
                            " exceeds max_position " + std::to_string(max_position));
  }
  auto check_id = [&](TokenId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.vocab_size) {
      throw std::invalid_argument("assemble_layout: token id " + std::to_string(id) +
                                  " outside vocabulary");
    }
  };

  SequenceLayout layout;
  layout.tokens_per_group = tpg;
  layout.n_frames = group_tokens.size() * kGroupSize;
  layout.tokens.reserve(total);
  layout.roles.reserve(total);
  for (TokenId id : system_tokens) {
    check_id(id);
    layout.tokens.push_back(id);
    layout.roles.push_back({RoleKind::System});
  }
  for (std::size_t g = 0; g < group_tokens.size(); ++g) {
    layout.tokens.push_back(vocab.timestamp_token(group_times[g]));
    layout.roles.push_back({RoleKind::Timestamp, group_times[g]});
    for (TokenId id : group_tokens[g]) {
      check_id(id);
      layout.tokens.push_back(id);
      layout.roles.push_back({RoleKind::Visual, 0.0, -1, static_cast<std::int64_t>(g)});
    }
  }
  for (TokenId id : query_tokens) {
    check_id(id);
    layout.tokens.push_back(id);
    layout.roles.push_back({RoleKind::Query});
  }
  layout.positions.resize(total);
  for (std::size_t i = 0; i < total; ++i) layout.positions[i] = static_cast<Position>(i);
  return layout;
}

namespace {

SequenceLayout layout_from_groups(const std::vector<FrameFeature>& compressed,
                                  const std::vector<double>& times, std::size_t system_len,
                                  std::span<const TokenId> query_tokens, const VocabLayout& vocab,
                                  std::size_t max_position) {
  std::vector<TokenId> system(system_len);
  for (std::size_t i = 0; i < system_len; ++i) system[i] = vocab.system_token(i);
  std::vector<std::vector<TokenId>> groups;
  groups.reserve(compressed.size());
  for (const auto& tokens : compressed) {
    std::vector<TokenId> ids(tokens.spatial);
    for (std::size_t t = 0; t < tokens.spatial; ++t) ids[t] = vocab.visual_token(tokens.at(t, 0));
    groups.push_back(std::move(ids));
  }
  return assemble_layout(system, groups, times, query_tokens, vocab, max_position);
}

}  // namespace

SequenceLayout build_layout(const FramePlan& plan, std::span<const FrameFeature> frame_features,
                            std::size_t system_len, std::span<const TokenId> query_tokens,
                            std::size_t tokens_per_group, const VocabLayout& vocab,
                            std::size_t max_position) {
  if (frame_features.size() != plan.n_frames()) {
    throw std::invalid_argument("build_layout: " + std::to_string(frame_features.size()) +
                                " frame features for a plan of " + std::to_string(plan.n_frames()) +
                                " frames");
  }
  if (system_len == 0) throw std::invalid_argument("build_layout: system_len must be at least 1");
  if (frame_features.empty()) throw std::invalid_argument("build_layout: no frames");

  const std::size_t n_groups = (frame_features.size() + kGroupSize - 1) / kGroupSize;
  std::vector<FrameFeature> compressed;
  std::vector<double> times;
  compressed.reserve(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    std::array<FrameFeature, kGroupSize> group;
    for (std::size_t k = 0; k < kGroupSize; ++k) {
      const std::size_t f = g * kGroupSize + k;
      group[k] = f < frame_features.size()
                     ? frame_features[f]
                     : FrameFeature::zeros(frame_features[0].spatial, frame_features[0].channels);
    }
    compressed.push_back(compress_group(group, tokens_per_group));
    times.push_back(plan.timestamps[g * kGroupSize]);
  }
  SequenceLayout layout =
      layout_from_groups(compressed, times, system_len, query_tokens, vocab, max_position);
  layout.n_frames = plan.n_frames();
  layout.effective_fps = plan.effective_fps;
  return layout;
}

SequenceLayout build_image_layout(std::span<const FrameFeature> images, std::size_t system_len,
                                  std::span<const TokenId> query_tokens,
                                  std::size_t tokens_per_group, const VocabLayout& vocab,
                                  std::size_t max_position) {
  if (images.empty()) throw std::invalid_argument("build_image_layout: no images");
  if (system_len == 0) throw std::invalid_argument("build_image_layout: system_len must be at least 1");
  std::vector<FrameFeature> compressed;
  std::vector<double> times(images.size(), 0.0);
  for (const auto& image : images) {
    const auto group = align_image(image);
    compressed.push_back(compress_group(group, tokens_per_group));
  }
  SequenceLayout layout =
      layout_from_groups(compressed, times, system_len, query_tokens, vocab, max_position);
  layout.n_frames = images.size() * kGroupSize;
  layout.effective_fps = 0.0;
  return layout;
}

std::vector<FrameFeature> synthetic_frames(std::size_t n_frames, std::size_t spatial,
                                           std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<FrameFeature> frames;
  frames.reserve(n_frames);
  for (std::size_t f = 0; f < n_frames; ++f) {
    FrameFeature frame = FrameFeature::zeros(spatial, channels);
    for (float& x : frame.data) {
      x = 2.0f * (static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f)) - 1.0f;
    }
    frames.push_back(std::move(frame));
  }
  return frames;
}

nlohmann::json to_json(const SequenceLayout& layout) {
  nlohmann::json roles = nlohmann::json::array();
  for (const auto& r : layout.roles) {
    nlohmann::json j = {{"kind", to_string(r.kind)}};
    if (r.kind == RoleKind::Timestamp) j["time_s"] = r.time_s;
    if (r.kind == RoleKind::Visual) {
      if (r.chunk_id >= 0) j["chunk_id"] = r.chunk_id;
      j["group_id"] = r.group_id;
    }
    roles.push_back(std::move(j));
  }
  return {
      {"tokens", layout.tokens},
      {"roles", std::move(roles)},
      {"meta",
       {{"n_frames", layout.n_frames},
        {"effective_fps", layout.effective_fps},
        {"tokens_per_group", layout.tokens_per_group},
        {"group_size", layout.group_size}}},
  };
}

SequenceLayout layout_from_json(const nlohmann::json& j) {
  SequenceLayout layout;
  j.at("tokens").get_to(layout.tokens);
  for (const auto& r : j.at("roles")) {
    TokenRole role;
    role.kind = role_kind_from_string(r.at("kind").get<std::string>());
    if (r.contains("time_s")) r.at("time_s").get_to(role.time_s);
    if (r.contains("chunk_id")) r.at("chunk_id").get_to(role.chunk_id);
    if (r.contains("group_id")) r.at("group_id").get_to(role.group_id);
    layout.roles.push_back(role);
  }
  const auto& meta = j.at("meta");
  meta.at("n_frames").get_to(layout.n_frames);
  meta.at("effective_fps").get_to(layout.effective_fps);
  meta.at("tokens_per_group").get_to(layout.tokens_per_group);
  layout.group_size = meta.value("group_size", kGroupSize);
  layout.positions.resize(layout.tokens.size());
  for (std::size_t i = 0; i < layout.positions.size(); ++i) {
    layout.positions[i] = static_cast<Position>(i);
  }
  layout.validate();
  return layout;
}

}  // namespace chunkkv
