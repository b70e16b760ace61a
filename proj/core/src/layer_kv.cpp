// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/layer_kv.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <tuple>

namespace chunkkv {

LayerKv LayerKv::empty(std::size_t num_heads, std::size_t head_dim) {
  LayerKv kv;
  kv.num_heads = num_heads;
  kv.head_dim = head_dim;
  return kv;
}

std::span<const float> LayerKv::key(std::size_t head, std::size_t token) const {
  return {keys.data() + (head * n_tokens() + token) * head_dim, head_dim};
}

std::span<const float> LayerKv::value(std::size_t head, std::size_t token) const {
  return {values.data() + (head * n_tokens() + token) * head_dim, head_dim};
}

std::span<float> LayerKv::key(std::size_t head, std::size_t token) {
  return {keys.data() + (head * n_tokens() + token) * head_dim, head_dim};
}

std::span<float> LayerKv::value(std::size_t head, std::size_t token) {
  return {values.data() + (head * n_tokens() + token) * head_dim, head_dim};
}

void LayerKv::validate() const {
  const std::size_t expected = num_heads * n_tokens() * head_dim;
  if (keys.size() != expected || values.size() != expected) {
    throw std::invalid_argument("LayerKv: tensor size " + std::to_string(keys.size()) + "/" +
                                std::to_string(values.size()) + " does not match " +
                                std::to_string(expected));
  }
  for (std::size_t t = 1; t < positions.size(); ++t) {
    if (positions[t] <= positions[t - 1]) {
      throw std::invalid_argument("LayerKv: positions not strictly increasing at index " +
                                  std::to_string(t));
    }
  }
}

LayerKv LayerKv::select(std::span<const std::size_t> indices) const {
  LayerKv out = empty(num_heads, head_dim);
  const std::size_t n = indices.size();
  out.positions.reserve(n);
  for (std::size_t idx : indices) {
    out.positions.push_back(positions.at(idx));
  }
  out.keys.resize(num_heads * n * head_dim);
  out.values.resize(num_heads * n * head_dim);
  for (std::size_t h = 0; h < num_heads; ++h) {
    for (std::size_t j = 0; j < n; ++j) {
      auto src_k = key(h, indices[j]);
      auto src_v = value(h, indices[j]);
      std::copy(src_k.begin(), src_k.end(), out.key(h, j).begin());
      std::copy(src_v.begin(), src_v.end(), out.value(h, j).begin());
    }
  }
  return out;
}

LayerKv merge_kv(std::span<const LayerKv* const> blocks) {
  if (blocks.empty()) {
    throw std::invalid_argument("merge_kv: no blocks");
  }
  const std::size_t heads = blocks.front()->num_heads;
  const std::size_t dim = blocks.front()->head_dim;

  // (position, block, token) triples sorted by position.
  std::vector<std::tuple<Position, std::size_t, std::size_t>> order;
  std::size_t total = 0;
  for (const LayerKv* block : blocks) {
    if (block->num_heads != heads || block->head_dim != dim) {
      throw std::invalid_argument("merge_kv: head geometry mismatch");
    }
    total += block->n_tokens();
  }
  order.reserve(total);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t t = 0; t < blocks[b]->n_tokens(); ++t) {
      order.emplace_back(blocks[b]->positions[t], b, t);
    }
  }
  std::sort(order.begin(), order.end());
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (std::get<0>(order[i]) == std::get<0>(order[i - 1])) {
      throw std::invalid_argument("merge_kv: duplicate position " +
                                  std::to_string(std::get<0>(order[i])));
    }
  }

  LayerKv out = LayerKv::empty(heads, dim);
  out.positions.resize(total);
  out.keys.resize(heads * total * dim);
  out.values.resize(heads * total * dim);
  for (std::size_t j = 0; j < total; ++j) {
    out.positions[j] = std::get<0>(order[j]);
  }
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < total; ++j) {
      const auto& [pos, b, t] = order[j];
      auto src_k = blocks[b]->key(h, t);
      auto src_v = blocks[b]->value(h, t);
      std::copy(src_k.begin(), src_k.end(), out.key(h, j).begin());
      std::copy(src_v.begin(), src_v.end(), out.value(h, j).begin());
    }
  }
  return out;
}

KvLayers merge_layers(std::span<const KvLayers* const> caches) {
  if (caches.empty()) {
    throw std::invalid_argument("merge_layers: no caches");
  }
  const std::size_t layers = caches.front()->size();
  KvLayers out;
  out.reserve(layers);
  std::vector<const LayerKv*> blocks(caches.size());
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t c = 0; c < caches.size(); ++c) {
      if (caches[c]->size() != layers) {
        throw std::invalid_argument("merge_layers: layer count mismatch");
      }
      blocks[c] = &(*caches[c])[l];
    }
    out.push_back(merge_kv(blocks));
  }
  return out;
}

std::size_t kv_tokens(const KvLayers& cache) {
  return cache.empty() ? 0 : cache.front().n_tokens();
}

}  // namespace chunkkv
