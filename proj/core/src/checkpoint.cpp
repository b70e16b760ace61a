// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include <boost/crc.hpp>

#include "byte_io.hpp"

namespace chunkkv {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'K', 'V', 'M', 'O', 'D', 'E', 'L'};

}  // namespace

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
    value >>= 4;
  }
  return out;
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelBundle& model) {
  const ModelConfig& c = model.config;
  detail::ByteWriter out;
  out.raw(kMagic.data(), kMagic.size());
  out.u64(kCheckpointVersion);
  for (std::size_t field : {c.num_layers, c.num_heads, c.head_dim, c.hidden_dim, c.ffn_dim,
                            c.vocab_size, c.max_position, c.rotary_dim}) {
    out.i64(static_cast<std::int64_t>(field));
  }
  out.i64(static_cast<std::int64_t>(c.seed));
  out.f64(c.rope_base);
  for_each_tensor(model.weights, [&](const std::vector<float>& t) { out.f32s(t); });
  const std::uint64_t crc = crc64(out.bytes());
  out.u64(crc);
  return out.take();
}

ModelBundle deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() + 8) {
    throw std::runtime_error("checkpoint: truncated header");
  }
  const std::uint64_t stored_crc = detail::read_u64_le(bytes.data() + bytes.size() - 8);
  if (crc64(bytes.first(bytes.size() - 8)) != stored_crc) {
    throw std::runtime_error("checkpoint: CRC-64 mismatch");
  }
  detail::ByteReader in(bytes.first(bytes.size() - 8));
  std::array<char, 8> magic{};
  in.raw(magic.data(), magic.size());
  if (magic != kMagic) throw std::runtime_error("checkpoint: bad magic");
  const std::uint64_t version = in.u64();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelBundle model;
  ModelConfig& c = model.config;
  for (std::size_t* field : {&c.num_layers, &c.num_heads, &c.head_dim, &c.hidden_dim, &c.ffn_dim,
                             &c.vocab_size, &c.max_position, &c.rotary_dim}) {
    const std::int64_t v = in.i64();
    if (v < 0) throw std::runtime_error("checkpoint: negative config field");
    *field = static_cast<std::size_t>(v);
  }
  c.seed = static_cast<std::uint64_t>(in.i64());
  c.rope_base = in.f64();
  c.validate();

  const auto sizes = tensor_sizes(c);
  model.weights.layers.resize(c.num_layers);
  std::size_t next = 0;
  for_each_tensor(model.weights, [&](std::vector<float>& t) { t = in.f32s(sizes.at(next++)); });
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes before CRC");
  return model;
}

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::uint64_t model_checksum(const ModelBundle& model) {
  const auto bytes = serialize_checkpoint(model);
  return detail::read_u64_le(bytes.data() + bytes.size() - 8);
}

}  // namespace chunkkv
