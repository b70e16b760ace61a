// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace chunkkv {

using TokenId = std::int32_t;
using Position = std::int64_t;

/// Keys and values of one layer for a run of tokens.
///
/// Storage is head-major: element (h, t, i) lives at (h * n_tokens + t) * head_dim + i.
/// Keys are stored after rotary encoding, so a block can be reused as attention
/// context at any later step without re-rotating.
struct LayerKv {
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;
  std::vector<float> keys;
  std::vector<float> values;
  std::vector<Position> positions;

  static LayerKv empty(std::size_t num_heads, std::size_t head_dim);

  std::size_t n_tokens() const { return positions.size(); }
  bool is_empty() const { return positions.empty(); }

  std::span<const float> key(std::size_t head, std::size_t token) const;
  std::span<const float> value(std::size_t head, std::size_t token) const;
  std::span<float> key(std::size_t head, std::size_t token);
  std::span<float> value(std::size_t head, std::size_t token);

  /// Bytes held by keys and values (positions excluded).
  std::size_t bytes() const { return (keys.size() + values.size()) * sizeof(float); }

  /// Throws std::invalid_argument if sizes disagree or positions are not strictly increasing.
  void validate() const;

  /// Copy of the tokens at the given (ascending) indices.
  LayerKv select(std::span<const std::size_t> indices) const;
};

/// One LayerKv per transformer layer.
using KvLayers = std::vector<LayerKv>;

/// Merges blocks into one block ordered by position. Duplicate positions throw.
LayerKv merge_kv(std::span<const LayerKv* const> blocks);

/// Layer-wise merge of several per-layer caches (all must have the same layer count).
KvLayers merge_layers(std::span<const KvLayers* const> caches);

/// Total token count of a per-layer cache (taken from layer 0).
std::size_t kv_tokens(const KvLayers& cache);

}  // namespace chunkkv
