// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <string_view>

#include "chunkkv/checkpoint.hpp"
#include "chunkkv/model.hpp"

namespace chunkkv {
namespace {

std::span<const std::uint8_t> bytes_of(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

TEST(Crc64, CheckValue) {
  EXPECT_EQ(crc64(bytes_of("123456789")), 0x995DC9BBDF1939FAull);
  EXPECT_EQ(crc64(bytes_of("")), 0u);
}

TEST(Hex64, SixteenDigits) {
  EXPECT_EQ(hex64(0x995DC9BBDF1939FAull), "995dc9bbdf1939fa");
  EXPECT_EQ(hex64(1), "0000000000000001");
}

TEST(Checkpoint, RoundTripInMemory) {
  ModelConfig c = ModelConfig::make(2, 2, 4, 12, 40, 9);
  c.rope_base = 500.0;
  c.rotary_dim = 2;
  const ModelBundle m = init_model(c);
  const auto bytes = serialize_checkpoint(m);
  EXPECT_EQ(std::string_view(reinterpret_cast<const char*>(bytes.data()), 8), "CKVMODEL");
  const ModelBundle back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.config, c);
  EXPECT_EQ(back.weights.token_embedding, m.weights.token_embedding);
  EXPECT_EQ(back.weights.layers[1].w_down, m.weights.layers[1].w_down);
  EXPECT_EQ(back.weights.unembedding, m.weights.unembedding);
  EXPECT_EQ(model_checksum(back), model_checksum(m));
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, TrailerIsCrcOfPrecedingBytes) {
  const ModelBundle m = init_model(ModelConfig::make(1, 1, 4, 8, 32, 2));
  const auto bytes = serialize_checkpoint(m);
  const auto body = std::span(bytes).first(bytes.size() - 8);
  std::uint64_t trailer = 0;
  for (int i = 7; i >= 0; --i) trailer = (trailer << 8) | bytes[bytes.size() - 8 + static_cast<std::size_t>(i)];
  EXPECT_EQ(trailer, crc64(body));
  EXPECT_EQ(trailer, model_checksum(m));
}

TEST(Checkpoint, RejectsCorruption) {
  const ModelBundle m = init_model(ModelConfig::make(1, 1, 4, 8, 32, 2));
  auto bytes = serialize_checkpoint(m);
  auto flipped = bytes;
  flipped[100] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(flipped), std::runtime_error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), std::runtime_error);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(bytes), std::runtime_error);
}

TEST(Checkpoint, FileRoundTrip) {
  const ModelBundle m = init_model(ModelConfig::make(2, 2, 4, 8, 32, 3));
  const auto path = std::filesystem::temp_directory_path() / "chunkkv_io_test.ckpt";
  save_checkpoint(m, path);
  const ModelBundle back = load_checkpoint(path);
  EXPECT_EQ(model_checksum(back), model_checksum(m));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

}  // namespace
}  // namespace chunkkv
