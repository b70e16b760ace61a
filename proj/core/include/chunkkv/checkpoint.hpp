// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chunkkv/model.hpp"

namespace chunkkv {

/// CRC-64/XZ (ECMA-182 polynomial, reflected, init and xorout all ones).
std::uint64_t crc64(std::span<const std::uint8_t> bytes);

/// Checkpoint layout, all little-endian:
///   magic "CKVMODEL" (8 bytes), format version (u64),
///   num_layers, num_heads, head_dim, hidden_dim, ffn_dim, vocab_size,
///   max_position, rotary_dim, seed (i64 each), rope_base (f64),
///   weight tensors in declaration order as row-major f32,
///   CRC-64 of every preceding byte (u64).
inline constexpr std::uint64_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ModelBundle& model);
ModelBundle deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

/// CRC-64 trailer value the checkpoint of `model` would carry.
std::uint64_t model_checksum(const ModelBundle& model);

std::string hex64(std::uint64_t value);

}  // namespace chunkkv
