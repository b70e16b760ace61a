// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkkv/layer_kv.hpp"

namespace chunkkv {

/// Frames per timestamped group.
inline constexpr std::size_t kGroupSize = 4;

struct SamplingPolicy {
  double base_fps = 1.0;
  std::size_t max_frames = 128;
  double max_fps = 4.0;

  void validate() const;
};

struct FramePlan {
  std::vector<double> timestamps;  // seconds, strictly increasing
  double effective_fps = 0.0;
  double duration_s = 0.0;

  std::size_t n_frames() const { return timestamps.size(); }
};

/// Samples at base_fps; if that stays under max_frames, resamples at the largest
/// integer rate in [base_fps, max_fps] whose frame count still fits. Otherwise
/// subsamples the base-rate candidates uniformly down to exactly max_frames.
FramePlan sample_frames(double duration_s, const SamplingPolicy& policy);

/// One frame's features: [spatial x channels], row-major.
struct FrameFeature {
  std::size_t spatial = 0;
  std::size_t channels = 0;
  std::vector<float> data;

  static FrameFeature zeros(std::size_t spatial, std::size_t channels);
  float at(std::size_t s, std::size_t ch) const { return data[s * channels + ch]; }
  bool same_shape(const FrameFeature& other) const {
    return spatial == other.spatial && channels == other.channels;
  }
  friend bool operator==(const FrameFeature&, const FrameFeature&) = default;
};

/// A still image becomes a static four-frame group.
std::array<FrameFeature, kGroupSize> align_image(const FrameFeature& image);

/// Non-learned group compressor: temporal mean of the four frames, then average
/// pooling of adjacent spatial positions down to tokens_per_group rows.
/// Result is [tokens_per_group x channels].
FrameFeature compress_group(std::span<const FrameFeature> group, std::size_t tokens_per_group);

enum class RoleKind { System, Timestamp, Visual, Query };

std::string to_string(RoleKind kind);
RoleKind role_kind_from_string(const std::string& s);

struct TokenRole {
  RoleKind kind = RoleKind::System;
  double time_s = 0.0;         // Timestamp: time of the group's first frame
  std::int64_t chunk_id = -1;  // Visual: assigned by chunk planning, -1 until then
  std::int64_t group_id = -1;  // Visual: group index

  friend bool operator==(const TokenRole&, const TokenRole&) = default;
};

/// Synthetic vocabulary partition:
///   [0, 16)                special / system (0 is padding with a zero embedding)
///   [16, 32)               timestamps, bucketed by whole seconds modulo 16
///   [32, visual_begin)     query / text
///   [visual_begin, vocab)  visual
struct VocabLayout {
  static constexpr TokenId kSpecialEnd = 16;
  static constexpr TokenId kTimestampEnd = 32;

  std::size_t vocab_size = 256;
  TokenId visual_begin = 144;

  /// visual_begin halfway through the non-reserved range.
  static VocabLayout for_vocab(std::size_t vocab_size);
  void validate() const;

  TokenId system_token(std::size_t index) const;
  TokenId timestamp_token(double time_s) const;
  /// Bucketizes tanh(x) in (-1, 1) uniformly over the visual id range.
  TokenId visual_token(float first_coordinate) const;
  std::size_t n_visual() const { return vocab_size - static_cast<std::size_t>(visual_begin); }
  bool is_query(TokenId id) const { return id >= kTimestampEnd && id < visual_begin; }
  bool is_visual(TokenId id) const {
    return id >= visual_begin && static_cast<std::size_t>(id) < vocab_size;
  }
};

/// Token stream: [System x system_len][(Timestamp, Visual x tokens_per_group) x groups][Query].
struct SequenceLayout {
  std::vector<TokenId> tokens;
  std::vector<TokenRole> roles;
  std::vector<Position> positions;  // 0..n-1
  std::size_t group_size = kGroupSize;
  std::size_t tokens_per_group = 0;
  std::size_t n_frames = 0;
  double effective_fps = 0.0;

  std::size_t size() const { return tokens.size(); }
  std::size_t system_len() const;
  std::size_t n_groups() const;
  std::size_t query_len() const;
  std::size_t group_tokens() const { return 1 + tokens_per_group; }
  /// Position of group g's timestamp token.
  Position group_begin(std::size_t g) const {
    return static_cast<Position>(system_len() + g * group_tokens());
  }
  /// One past the last visual token (start of the query).
  Position prefix_end() const { return static_cast<Position>(size() - query_len()); }

  /// Throws std::invalid_argument when the ordering/consistency invariants fail.
  void validate() const;

  friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;
};

/// Layout from already-quantized token ids. `group_tokens[g]` holds the visual
/// ids of group g; `group_times[g]` is its timestamp.
SequenceLayout assemble_layout(std::span<const TokenId> system_tokens,
                               std::span<const std::vector<TokenId>> group_tokens,
                               std::span<const double> group_times,
                               std::span<const TokenId> query_tokens, const VocabLayout& vocab,
                               std::size_t max_position);

/// Groups frames in fours (zero-padding the last group), compresses, quantizes,
/// and interleaves timestamps.
SequenceLayout build_layout(const FramePlan& plan, std::span<const FrameFeature> frame_features,
                            std::size_t system_len, std::span<const TokenId> query_tokens,
                            std::size_t tokens_per_group, const VocabLayout& vocab,
                            std::size_t max_position);

/// One static group per image, each timestamped 0 s.
SequenceLayout build_image_layout(std::span<const FrameFeature> images, std::size_t system_len,
                                  std::span<const TokenId> query_tokens,
                                  std::size_t tokens_per_group, const VocabLayout& vocab,
                                  std::size_t max_position);

/// Deterministic synthetic frame features (uniform in [-1, 1)) for `n_frames` frames.
std::vector<FrameFeature> synthetic_frames(std::size_t n_frames, std::size_t spatial,
                                           std::size_t channels, std::uint64_t seed);

/// {tokens, roles: [{kind, time_s?, chunk_id?, group_id?}], meta: {...}}
nlohmann::json to_json(const SequenceLayout& layout);
SequenceLayout layout_from_json(const nlohmann::json& j);

}  // namespace chunkkv
