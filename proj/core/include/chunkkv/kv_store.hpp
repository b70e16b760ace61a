// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chunkkv/cost_meter.hpp"
#include "chunkkv/layer_kv.hpp"
#include "chunkkv/model.hpp"

namespace chunkkv {

/// Half-open position range [begin, end).
struct TokenRange {
  Position begin = 0;
  Position end = 0;

  std::size_t size() const { return end > begin ? static_cast<std::size_t>(end - begin) : 0; }
  bool empty() const { return end <= begin; }
  bool contains(Position p) const { return p >= begin && p < end; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

/// Chunk-wise dense KVs from prefill, their pooled sparse counterparts, and the
/// always-dense system and timestamp KVs.
///
/// Invariants (checked by validate()):
///   - sparse token count of a chunk == ceil(dense token count / pool_factor)
///   - system, timestamp and dense KVs cover each prefilled position once
struct BiLevelKvStore {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;

  KvLayers system_kvs;
  KvLayers timestamp_kvs;
  std::map<std::size_t, KvLayers> dense;
  std::map<std::size_t, KvLayers> sparse;
  std::map<std::size_t, TokenRange> chunk_token_ranges;
  std::size_t pool_factor = 0;  // 0 until build_sparse()

  BiLevelKvStore() = default;
  BiLevelKvStore(std::size_t num_layers, std::size_t num_heads, std::size_t head_dim);

  std::size_t n_chunks() const { return dense.size(); }
  std::size_t dense_tokens(std::size_t chunk_id) const { return kv_tokens(dense.at(chunk_id)); }
  std::size_t sparse_tokens(std::size_t chunk_id) const { return kv_tokens(sparse.at(chunk_id)); }
  std::size_t system_tokens() const { return kv_tokens(system_kvs); }
  std::size_t timestamp_tokens() const { return kv_tokens(timestamp_kvs); }
  std::size_t dense_visual_tokens() const;

  void set_system(KvLayers kvs);
  void append_timestamps(const KvLayers& kvs);
  void set_dense(std::size_t chunk_id, TokenRange range, KvLayers kvs);

  /// Stored timestamp and dense tokens whose positions fall in `range`.
  KvLayers gather(TokenRange range) const;
  /// Stored timestamp tokens with position in `range`.
  KvLayers timestamps_in(TokenRange range) const;

  /// Pools every chunk's dense KVs. A pooled position that lands on a
  /// timestamp position moves one step earlier (onto a visual position).
  void build_sparse(std::size_t pool_factor);

  void validate() const;
};

/// Mean-pools keys and values over consecutive runs of pool_factor tokens per
/// head and layer; a trailing partial run is pooled at its own size. The pooled
/// position is floor(mean of the run's positions).
KvLayers pool_chunk(const KvLayers& dense, std::size_t pool_factor);

enum class OracleKind { Centroid, AttentionScore };

std::string to_string(OracleKind kind);
/// Accepts "centroid" and "attn"; throws std::invalid_argument otherwise.
OracleKind oracle_kind_from_string(const std::string& s);

struct RelevanceScore {
  std::size_t chunk_id = 0;
  double score = 0.0;
};

/// Query-side vectors at the probe layer, head-major [heads x n_query x head_dim].
struct QueryRepr {
  std::size_t num_heads = 0;
  std::size_t head_dim = 0;
  std::size_t n_query = 0;
  std::vector<float> queries;  // post-rotary attention queries
  std::vector<float> keys;     // post-rotary keys of the query tokens

  std::span<const float> query(std::size_t h, std::size_t i) const {
    return {queries.data() + (h * n_query + i) * head_dim, head_dim};
  }
  std::span<const float> key(std::size_t h, std::size_t i) const {
    return {keys.data() + (h * n_query + i) * head_dim, head_dim};
  }
};

/// Middle layer.
std::size_t default_probe_layer(const ModelConfig& config);

/// Runs the query tokens against the all-sparse cache (system + timestamps +
/// every chunk's sparse KVs) and captures their probe-layer queries and keys.
QueryRepr probe_query(const ModelBundle& model, const BiLevelKvStore& store,
                      std::span<const TokenId> query_tokens, Position first_position,
                      std::size_t probe_layer);

/// attention: mean over heads and query vectors of the max scaled dot product
///            against the chunk's sparse keys at the probe layer.
/// centroid:  cosine between the mean sparse key (heads concatenated) and the
///            mean query key; 0 when either vector is zero.
std::vector<RelevanceScore> score_chunks(const BiLevelKvStore& store, const QueryRepr& query,
                                         OracleKind kind, std::size_t probe_layer);

/// Decode-time cache: system, per-chunk dense or sparse KVs, and timestamps,
/// merged in position order per layer.
struct MixedCache {
  KvLayers layers;
  std::vector<std::size_t> selection;  // ascending dense chunk ids
  std::uint64_t system_tokens = 0;
  std::uint64_t timestamp_tokens = 0;
  std::uint64_t dense_visual_tokens = 0;   // from selected chunks
  std::uint64_t sparse_visual_tokens = 0;  // from unselected chunks
  std::uint64_t all_dense_visual_tokens = 0;

  std::uint64_t total_tokens() const {
    return system_tokens + timestamp_tokens + dense_visual_tokens + sparse_visual_tokens;
  }
  std::uint64_t visual_tokens() const { return dense_visual_tokens + sparse_visual_tokens; }
  /// Loaded tokens relative to an all-dense cache, overheads included.
  double kv_fraction() const;
  /// Visual tokens relative to all-dense visual tokens.
  double visual_fraction() const;
};

/// Top-k chunks by score (ties: lower chunk id) load dense, the rest sparse.
/// Negative top_k throws. Records loaded tokens on `meter` when given.
MixedCache assemble_mixed(const BiLevelKvStore& store, std::span<const RelevanceScore> scores,
                          std::int64_t top_k, CostMeter* meter = nullptr);

struct DecodeResult {
  std::vector<TokenId> generated;
  Logits query_logits;  // one row per query token
  Logits step_logits;   // row i produced generated[i]
  CostReport cost;
};

/// Encodes the query against the mixed cache (all cache entries visible, causal
/// within the query), then greedily generates up to max_new_tokens.
DecodeResult decode(const ModelBundle& model, MixedCache cache, std::span<const TokenId> query_tokens,
                    Position first_position, std::size_t max_new_tokens);

/// Offline store: <dir>/index.json plus raw little-endian f32 tensor files.
/// Each file holds, per layer, keys then values, each [heads x tokens x head_dim].
void save_store(const BiLevelKvStore& store, const std::filesystem::path& dir,
                std::uint64_t model_checksum);
BiLevelKvStore load_store(const std::filesystem::path& dir, std::uint64_t* model_checksum = nullptr);

}  // namespace chunkkv
