// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "chunkkv/cost_meter.hpp"
#include "chunkkv/layer_kv.hpp"

namespace chunkkv {

/// Version of the deterministic weight initialization scheme. Bump when
/// init_model changes what a (config, seed) pair produces.
inline constexpr std::uint32_t kInitSchemeVersion = 1;

/// Token id whose embedding row is all zeros.
inline constexpr TokenId kPadToken = 0;

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t head_dim = 8;
  std::size_t hidden_dim = 16;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 256;
  std::size_t max_position = 65536;
  // Leading dims of each head that receive rotary encoding. Equal to head_dim
  // for full RoPE, 0 for a position-free model.
  std::size_t rotary_dim = 8;
  double rope_base = 10000.0;
  std::uint64_t seed = 7;

  /// Convenience: derives hidden_dim and rotary_dim from heads and head_dim.
  static ModelConfig make(std::size_t num_layers, std::size_t num_heads, std::size_t head_dim,
                          std::size_t ffn_dim, std::size_t vocab_size, std::uint64_t seed);

  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;  // [hidden]
  std::vector<float> wq;         // [hidden x hidden], row-major (out, in)
  std::vector<float> wk;
  std::vector<float> wv;
  std::vector<float> wo;
  std::vector<float> ffn_norm;  // [hidden]
  std::vector<float> w_up;      // [ffn x hidden]
  std::vector<float> w_down;    // [hidden x ffn]
};

struct ModelWeights {
  std::vector<float> token_embedding;  // [vocab x hidden]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;   // [hidden]
  std::vector<float> unembedding;  // [vocab x hidden]
};

/// Visits every tensor of `weights` (const or not) in declaration order, which
/// is also the checkpoint order.
template <typename Weights, typename Fn>
void for_each_tensor(Weights& weights, Fn&& fn) {
  fn(weights.token_embedding);
  for (auto& layer : weights.layers) {
    fn(layer.attn_norm);
    fn(layer.wq);
    fn(layer.wk);
    fn(layer.wv);
    fn(layer.wo);
    fn(layer.ffn_norm);
    fn(layer.w_up);
    fn(layer.w_down);
  }
  fn(weights.final_norm);
  fn(weights.unembedding);
}

/// Immutable after construction; safe to share across threads.
struct ModelBundle {
  ModelConfig config;
  ModelWeights weights;
};

/// Tensor shapes (element counts) implied by a config, in declaration order.
std::vector<std::size_t> tensor_sizes(const ModelConfig& config);

/// Deterministic, seeded weights. Scheme v1: a single mt19937_64 stream seeded
/// with config.seed fills tensors in declaration order; each draw u in [0, 1)
/// uses the top 24 bits of one 64-bit output. Matrices get (2u - 1) / sqrt(fan_in),
/// embeddings 2u - 1, norm gains 1. The kPadToken embedding row is zeroed.
ModelBundle init_model(const ModelConfig& config);

/// Per query (segment token, in segment order): ascending key positions it may attend.
struct VisibilitySpec {
  std::vector<std::vector<Position>> keys;

  /// Every context position plus causal in-segment positions.
  static VisibilitySpec full_causal(std::span<const Position> context_positions,
                                    std::span<const Position> segment_positions);

  /// Checks self-visibility, causality and ascending order for the given segment.
  void validate(std::span<const Position> segment_positions) const;
};

/// Row-major [rows x vocab] logits.
struct Logits {
  std::size_t rows = 0;
  std::size_t vocab = 0;
  std::vector<float> data;

  std::span<const float> row(std::size_t r) const { return {data.data() + r * vocab, vocab}; }
};

struct ForwardOptions {
  CostMeter* meter = nullptr;
  // When set, post-rotary query vectors of this layer are returned in
  // ForwardResult::captured_queries ([heads x n x head_dim]).
  std::optional<std::size_t> capture_queries_layer;
};

struct ForwardResult {
  Logits logits;
  KvLayers kvs;  // freshly produced per-layer KVs of the segment tokens
  std::vector<float> captured_queries;
};

/// Runs the segment tokens through the model against cached context KVs.
/// `context` is empty or holds one LayerKv per layer. Rotary encoding uses the
/// global positions, so returned KVs can be reused as context later.
ForwardResult forward_segment(const ModelBundle& model, std::span<const TokenId> token_ids,
                              std::span<const Position> positions, std::span<const LayerKv> context,
                              const VisibilitySpec& visibility, const ForwardOptions& options = {});

/// Reference causal forward over a whole sequence at positions 0..n-1.
Logits full_oracle(const ModelBundle& model, std::span<const TokenId> token_ids,
                   CostMeter* meter = nullptr);

/// Index of the largest value; ties go to the lowest index.
TokenId greedy_token(std::span<const float> logits);

/// Greedy continuation by repeated full_oracle calls.
std::vector<TokenId> full_oracle_greedy(const ModelBundle& model, std::span<const TokenId> prompt,
                                        std::size_t max_new_tokens);

}  // namespace chunkkv
