// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

// Numeric primitives shared by the segment forward and the one-pass oracle.
// Both paths must reduce in the same order for bitwise equivalence.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "chunkkv/model.hpp"

namespace chunkkv::detail {

inline constexpr float kNormEps = 1e-6f;

// y = W x with W row-major [y.size() x x.size()].
inline void matvec(std::span<const float> w, std::span<const float> x, std::span<float> y) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < y.size(); ++o) {
    const float* row = w.data() + o * in;
    float acc = 0.0f;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

inline void rmsnorm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + kNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

inline float silu(float v) { return v / (1.0f + std::exp(-v)); }

// cos/sin per (token, rotary pair), angle = position * base^(-2i / rotary_dim).
class RopeTable {
 public:
  RopeTable(const ModelConfig& c, std::span<const Position> positions)
      : pairs_(c.rotary_dim / 2), cos_(positions.size() * pairs_), sin_(positions.size() * pairs_) {
    for (std::size_t t = 0; t < positions.size(); ++t) {
      for (std::size_t i = 0; i < pairs_; ++i) {
        const double freq =
            std::pow(c.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(c.rotary_dim));
        const double angle = static_cast<double>(positions[t]) * freq;
        cos_[t * pairs_ + i] = static_cast<float>(std::cos(angle));
        sin_[t * pairs_ + i] = static_cast<float>(std::sin(angle));
      }
    }
  }

  void apply(std::size_t token, std::span<float> v) const {
    for (std::size_t i = 0; i < pairs_; ++i) {
      const float c = cos_[token * pairs_ + i];
      const float s = sin_[token * pairs_ + i];
      const float a = v[2 * i];
      const float b = v[2 * i + 1];
      v[2 * i] = a * c - b * s;
      v[2 * i + 1] = a * s + b * c;
    }
  }

 private:
  std::size_t pairs_;
  std::vector<float> cos_;
  std::vector<float> sin_;
};

// Softmax attention of one query over an ordered key list (max-subtracted).
inline void attend(std::span<const float> q, std::span<const float* const> keys,
                   std::span<const float* const> values, float scale, std::vector<float>& scratch,
                   std::span<float> out) {
  const std::size_t d = q.size();
  const std::size_t m = keys.size();
  scratch.resize(m);
  float mx = -std::numeric_limits<float>::infinity();
  for (std::size_t j = 0; j < m; ++j) {
    float s = 0.0f;
    for (std::size_t i = 0; i < d; ++i) s += q[i] * keys[j][i];
    s *= scale;
    scratch[j] = s;
    if (s > mx) mx = s;
  }
  float sum = 0.0f;
  for (std::size_t j = 0; j < m; ++j) {
    scratch[j] = std::exp(scratch[j] - mx);
    sum += scratch[j];
  }
  const float inv = 1.0f / sum;
  for (std::size_t i = 0; i < d; ++i) out[i] = 0.0f;
  for (std::size_t j = 0; j < m; ++j) {
    const float w = scratch[j] * inv;
    for (std::size_t i = 0; i < d; ++i) out[i] += w * values[j][i];
  }
}

// x += Wo * attn; x += W_down * silu(W_up * rmsnorm(x)).
inline void residual_tail(const LayerWeights& lw, std::span<float> x, std::span<const float> attn) {
  const std::size_t hidden = x.size();
  const std::size_t ffn = lw.w_up.size() / hidden;
  thread_local std::vector<float> proj, normed, up;
  proj.resize(hidden);
  normed.resize(hidden);
  up.resize(ffn);
  matvec(lw.wo, attn, proj);
  for (std::size_t i = 0; i < hidden; ++i) x[i] += proj[i];
  rmsnorm(x, lw.ffn_norm, normed);
  matvec(lw.w_up, normed, up);
  for (float& u : up) u = silu(u);
  matvec(lw.w_down, up, proj);
  for (std::size_t i = 0; i < hidden; ++i) x[i] += proj[i];
}

inline Logits project_logits(const ModelBundle& model, std::span<const float> x, std::size_t n) {
  const std::size_t hidden = model.config.hidden_dim;
  Logits logits;
  logits.rows = n;
  logits.vocab = model.config.vocab_size;
  logits.data.resize(n * logits.vocab);
  std::vector<float> normed(hidden);
  for (std::size_t t = 0; t < n; ++t) {
    rmsnorm(x.subspan(t * hidden, hidden), model.weights.final_norm, normed);
    matvec(model.weights.unembedding, normed, {logits.data.data() + t * logits.vocab, logits.vocab});
  }
  return logits;
}

}  // namespace chunkkv::detail
