// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "kernels.hpp"

namespace chunkkv {

ModelConfig ModelConfig::make(std::size_t num_layers, std::size_t num_heads, std::size_t head_dim,
                              std::size_t ffn_dim, std::size_t vocab_size, std::uint64_t seed) {
  ModelConfig c;
  c.num_layers = num_layers;
  c.num_heads = num_heads;
  c.head_dim = head_dim;
  c.hidden_dim = num_heads * head_dim;
  c.rotary_dim = head_dim;
  c.ffn_dim = ffn_dim;
  c.vocab_size = vocab_size;
  c.seed = seed;
  return c;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("ModelConfig: ") + what);
  };
  require(num_layers > 0, "num_layers must be positive");
  require(num_heads > 0, "num_heads must be positive");
  require(head_dim > 0, "head_dim must be positive");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(vocab_size > 0, "vocab_size must be positive");
  require(max_position > 0, "max_position must be positive");
  require(hidden_dim == num_heads * head_dim, "hidden_dim must equal num_heads * head_dim");
  require(rotary_dim <= head_dim && rotary_dim % 2 == 0,
          "rotary_dim must be even and not exceed head_dim");
  require(std::isfinite(rope_base) && rope_base > 0.0, "rope_base must be positive");
}

std::vector<std::size_t> tensor_sizes(const ModelConfig& c) {
  const std::size_t h = c.hidden_dim;
  std::vector<std::size_t> sizes;
  sizes.push_back(c.vocab_size * h);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    sizes.insert(sizes.end(), {h, h * h, h * h, h * h, h * h, h, c.ffn_dim * h, h * c.ffn_dim});
  }
  sizes.push_back(h);
  sizes.push_back(c.vocab_size * h);
  return sizes;
}

ModelBundle init_model(const ModelConfig& config) {
  config.validate();
  ModelBundle model;
  model.config = config;
  ModelWeights& w = model.weights;
  const std::size_t h = config.hidden_dim;

  std::mt19937_64 rng(config.seed);
  auto uniform = [&rng]() {
    return static_cast<float>(rng() >> 40) * (1.0f / 16777216.0f);
  };
  auto fill = [&](std::vector<float>& t, std::size_t n, std::size_t fan_in) {
    const float scale = fan_in == 0 ? 1.0f : 1.0f / std::sqrt(static_cast<float>(fan_in));
    t.resize(n);
    for (float& x : t) x = (2.0f * uniform() - 1.0f) * scale;
  };
  auto ones = [](std::vector<float>& t, std::size_t n) { t.assign(n, 1.0f); };

  fill(w.token_embedding, config.vocab_size * h, 0);
  w.layers.resize(config.num_layers);
  for (auto& layer : w.layers) {
    ones(layer.attn_norm, h);
    fill(layer.wq, h * h, h);
    fill(layer.wk, h * h, h);
    fill(layer.wv, h * h, h);
    fill(layer.wo, h * h, h);
    ones(layer.ffn_norm, h);
    fill(layer.w_up, config.ffn_dim * h, h);
    fill(layer.w_down, h * config.ffn_dim, config.ffn_dim);
  }
  ones(w.final_norm, h);
  fill(w.unembedding, config.vocab_size * h, h);

  std::fill_n(w.token_embedding.begin() + static_cast<std::ptrdiff_t>(kPadToken) * h, h, 0.0f);
  return model;
}

VisibilitySpec VisibilitySpec::full_causal(std::span<const Position> context_positions,
                                           std::span<const Position> segment_positions) {
  VisibilitySpec spec;
  spec.keys.resize(segment_positions.size());
  for (std::size_t t = 0; t < segment_positions.size(); ++t) {
    auto& keys = spec.keys[t];
    keys.reserve(context_positions.size() + t + 1);
    keys.assign(context_positions.begin(), context_positions.end());
    keys.insert(keys.end(), segment_positions.begin(),
                segment_positions.begin() + static_cast<std::ptrdiff_t>(t) + 1);
  }
  return spec;
}

void VisibilitySpec::validate(std::span<const Position> segment_positions) const {
  if (keys.size() != segment_positions.size()) {
    throw std::invalid_argument("VisibilitySpec: " + std::to_string(keys.size()) +
                                " query rows for " + std::to_string(segment_positions.size()) +
                                " segment tokens");
  }
  for (std::size_t t = 0; t < keys.size(); ++t) {
    const auto& row = keys[t];
    const Position self = segment_positions[t];
    if (row.empty() || row.back() != self) {
      throw std::invalid_argument("VisibilitySpec: query at position " + std::to_string(self) +
                                  " must see itself as its last key");
    }
    for (std::size_t j = 1; j < row.size(); ++j) {
      if (row[j] <= row[j - 1]) {
        throw std::invalid_argument("VisibilitySpec: keys not strictly ascending for position " +
                                    std::to_string(self));
      }
    }
  }
}

namespace {

void check_segment(const ModelBundle& model, std::span<const TokenId> token_ids,
                   std::span<const Position> positions, std::span<const LayerKv> context) {
  const ModelConfig& c = model.config;
  if (token_ids.size() != positions.size()) {
    throw std::invalid_argument("forward_segment: token/position count mismatch");
  }
  for (TokenId id : token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw std::invalid_argument("forward_segment: token id " + std::to_string(id) +
                                  " outside vocabulary");
    }
  }
  for (std::size_t t = 0; t < positions.size(); ++t) {
    if (positions[t] < 0 || static_cast<std::size_t>(positions[t]) >= c.max_position) {
      throw std::out_of_range("forward_segment: position " + std::to_string(positions[t]) +
                              " exceeds max_position " + std::to_string(c.max_position));
    }
    if (t > 0 && positions[t] <= positions[t - 1]) {
      throw std::invalid_argument("forward_segment: segment positions not strictly increasing");
    }
  }
  if (context.empty()) return;
  if (context.size() != c.num_layers) {
    throw std::invalid_argument("forward_segment: context has " + std::to_string(context.size()) +
                                " layers, model has " + std::to_string(c.num_layers));
  }
  for (const LayerKv& kv : context) {
    if (kv.num_heads != c.num_heads || kv.head_dim != c.head_dim) {
      throw std::invalid_argument("forward_segment: context head geometry mismatch");
    }
    kv.validate();
    if (kv.positions != context.front().positions) {
      throw std::invalid_argument("forward_segment: context positions differ across layers");
    }
  }
  const auto& ctx_pos = context.front().positions;
  if (!ctx_pos.empty() && !positions.empty() && positions.front() <= ctx_pos.back()) {
    throw std::invalid_argument("forward_segment: segment position " +
                                std::to_string(positions.front()) +
                                " collides with or precedes context position " +
                                std::to_string(ctx_pos.back()));
  }
}

}  // namespace

ForwardResult forward_segment(const ModelBundle& model, std::span<const TokenId> token_ids,
                              std::span<const Position> positions, std::span<const LayerKv> context,
                              const VisibilitySpec& visibility, const ForwardOptions& options) {
  check_segment(model, token_ids, positions, context);
  visibility.validate(positions);

  const ModelConfig& c = model.config;
  const std::size_t n = token_ids.size();
  const std::size_t heads = c.num_heads;
  const std::size_t dim = c.head_dim;
  const std::size_t hidden = c.hidden_dim;
  static const std::vector<Position> kNoPositions;
  const std::vector<Position>& ctx_pos = context.empty() ? kNoPositions : context.front().positions;
  const std::size_t n_ctx = ctx_pos.size();

  // Resolve visible positions to indices: [0, n_ctx) context, [n_ctx, n_ctx + n) segment.
  std::vector<std::vector<std::uint32_t>> key_index(n);
  std::uint64_t pairs = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& row = visibility.keys[t];
    auto& idx = key_index[t];
    idx.reserve(row.size());
    for (Position p : row) {
      if (n > 0 && p >= positions.front()) {
        auto it = std::lower_bound(positions.begin(), positions.end(), p);
        if (it == positions.end() || *it != p) {
          throw std::invalid_argument("forward_segment: visibility references unknown position " +
                                      std::to_string(p));
        }
        idx.push_back(static_cast<std::uint32_t>(n_ctx + (it - positions.begin())));
      } else {
        auto it = std::lower_bound(ctx_pos.begin(), ctx_pos.end(), p);
        if (it == ctx_pos.end() || *it != p) {
          throw std::invalid_argument("forward_segment: visibility references unknown position " +
                                      std::to_string(p));
        }
        idx.push_back(static_cast<std::uint32_t>(it - ctx_pos.begin()));
      }
    }
    pairs += idx.size();
  }

  ForwardResult result;
  result.kvs.reserve(c.num_layers);
  const detail::RopeTable rope(c, positions);

  std::vector<float> x(n * hidden);
  for (std::size_t t = 0; t < n; ++t) {
    const float* e = model.weights.token_embedding.data() + static_cast<std::size_t>(token_ids[t]) * hidden;
    std::copy(e, e + hidden, x.begin() + static_cast<std::ptrdiff_t>(t * hidden));
  }

  std::vector<float> normed(hidden);
  std::vector<float> q(n * hidden);
  std::vector<float> proj(hidden);
  std::vector<float> attn_out(hidden);
  std::vector<float> scratch;
  std::vector<const float*> key_ptrs;
  std::vector<const float*> value_ptrs;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dim));

  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const LayerWeights& lw = model.weights.layers[l];
    LayerKv kv = LayerKv::empty(heads, dim);
    kv.positions.assign(positions.begin(), positions.end());
    kv.keys.resize(heads * n * dim);
    kv.values.resize(heads * n * dim);

    for (std::size_t t = 0; t < n; ++t) {
      detail::rmsnorm({x.data() + t * hidden, hidden}, lw.attn_norm, normed);
      detail::matvec(lw.wq, normed, {q.data() + t * hidden, hidden});
      detail::matvec(lw.wk, normed, proj);
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(proj.data() + h * dim, dim, kv.key(h, t).data());
      }
      detail::matvec(lw.wv, normed, proj);
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(proj.data() + h * dim, dim, kv.value(h, t).data());
        rope.apply(t, {q.data() + t * hidden + h * dim, dim});
        rope.apply(t, kv.key(h, t));
      }
    }
    if (options.capture_queries_layer && *options.capture_queries_layer == l) {
      result.captured_queries.resize(heads * n * dim);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < n; ++t) {
          std::copy_n(q.data() + t * hidden + h * dim, dim,
                      result.captured_queries.data() + (h * n + t) * dim);
        }
      }
    }

    const LayerKv* ctx = context.empty() ? nullptr : &context[l];
    for (std::size_t t = 0; t < n; ++t) {
      const auto& idx = key_index[t];
      for (std::size_t h = 0; h < heads; ++h) {
        key_ptrs.clear();
        value_ptrs.clear();
        for (std::uint32_t j : idx) {
          if (j < n_ctx) {
            key_ptrs.push_back(ctx->key(h, j).data());
            value_ptrs.push_back(ctx->value(h, j).data());
          } else {
            key_ptrs.push_back(kv.key(h, j - n_ctx).data());
            value_ptrs.push_back(kv.value(h, j - n_ctx).data());
          }
        }
        detail::attend({q.data() + t * hidden + h * dim, dim}, key_ptrs, value_ptrs, scale, scratch,
                       {attn_out.data() + h * dim, dim});
      }
      detail::residual_tail(lw, {x.data() + t * hidden, hidden}, attn_out);
    }
    result.kvs.push_back(std::move(kv));
    if (options.meter) options.meter->count_attention(pairs);
  }

  result.logits = detail::project_logits(model, x, n);
  if (options.meter) {
    options.meter->count_token_linear(n);
    options.meter->observe_resident(n_ctx + n);
  }
  return result;
}

Logits full_oracle(const ModelBundle& model, std::span<const TokenId> token_ids, CostMeter* meter) {
  const ModelConfig& c = model.config;
  const std::size_t n = token_ids.size();
  if (n > c.max_position) {
    throw std::out_of_range("full_oracle: length " + std::to_string(n) + " exceeds max_position " +
                            std::to_string(c.max_position));
  }
  for (TokenId id : token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw std::invalid_argument("full_oracle: token id outside vocabulary");
    }
  }
  const std::size_t heads = c.num_heads;
  const std::size_t dim = c.head_dim;
  const std::size_t hidden = c.hidden_dim;

  std::vector<Position> positions(n);
  for (std::size_t t = 0; t < n; ++t) positions[t] = static_cast<Position>(t);
  const detail::RopeTable rope(c, positions);

  std::vector<float> x(n * hidden);
  for (std::size_t t = 0; t < n; ++t) {
    const float* e = model.weights.token_embedding.data() + static_cast<std::size_t>(token_ids[t]) * hidden;
    std::copy(e, e + hidden, x.begin() + static_cast<std::ptrdiff_t>(t * hidden));
  }

  // Token-major q/k/v: [n x hidden]. Recomputed from scratch for every layer.
  std::vector<float> q(n * hidden), k(n * hidden), v(n * hidden);
  std::vector<float> normed(hidden);
  std::vector<float> attn_out(hidden);
  std::vector<float> scratch;
  std::vector<const float*> key_ptrs;
  std::vector<const float*> value_ptrs;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dim));

  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const LayerWeights& lw = model.weights.layers[l];
    for (std::size_t t = 0; t < n; ++t) {
      detail::rmsnorm({x.data() + t * hidden, hidden}, lw.attn_norm, normed);
      detail::matvec(lw.wq, normed, {q.data() + t * hidden, hidden});
      detail::matvec(lw.wk, normed, {k.data() + t * hidden, hidden});
      detail::matvec(lw.wv, normed, {v.data() + t * hidden, hidden});
      for (std::size_t h = 0; h < heads; ++h) {
        rope.apply(t, {q.data() + t * hidden + h * dim, dim});
        rope.apply(t, {k.data() + t * hidden + h * dim, dim});
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        key_ptrs.clear();
        value_ptrs.clear();
        for (std::size_t j = 0; j <= t; ++j) {
          key_ptrs.push_back(k.data() + j * hidden + h * dim);
          value_ptrs.push_back(v.data() + j * hidden + h * dim);
        }
        detail::attend({q.data() + t * hidden + h * dim, dim}, key_ptrs, value_ptrs, scale, scratch,
                       {attn_out.data() + h * dim, dim});
      }
      detail::residual_tail(lw, {x.data() + t * hidden, hidden}, attn_out);
    }
    if (meter) meter->count_attention(static_cast<std::uint64_t>(n) * (n + 1) / 2);
  }

  Logits logits = detail::project_logits(model, x, n);
  if (meter) {
    meter->count_token_linear(n);
    meter->observe_resident(n);
  }
  return logits;
}

TokenId greedy_token(std::span<const float> logits) {
  if (logits.empty()) throw std::invalid_argument("greedy_token: empty logits");
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

std::vector<TokenId> full_oracle_greedy(const ModelBundle& model, std::span<const TokenId> prompt,
                                        std::size_t max_new_tokens) {
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < max_new_tokens; ++i) {
    Logits logits = full_oracle(model, seq);
    const TokenId next = greedy_token(logits.row(logits.rows - 1));
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

}  // namespace chunkkv
