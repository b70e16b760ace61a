// Copyright 2026 The chunkkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "chunkkv/kv_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "byte_io.hpp"
#include "chunkkv/checkpoint.hpp"

namespace chunkkv {

namespace {

KvLayers empty_layers(std::size_t layers, std::size_t heads, std::size_t dim) {
  return KvLayers(layers, LayerKv::empty(heads, dim));
}

KvLayers select_positions(const KvLayers& kvs, TokenRange range) {
  if (kvs.empty()) return {};
  const auto& pos = kvs.front().positions;
  const auto lo = std::lower_bound(pos.begin(), pos.end(), range.begin);
  const auto hi = std::lower_bound(lo, pos.end(), range.end);
  std::vector<std::size_t> idx(static_cast<std::size_t>(hi - lo));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::size_t>(lo - pos.begin()) + i;
  KvLayers out;
  out.reserve(kvs.size());
  for (const LayerKv& layer : kvs) out.push_back(layer.select(idx));
  return out;
}

KvLayers merge_nonempty(std::span<const KvLayers* const> parts) {
  std::vector<const KvLayers*> used;
  for (const KvLayers* p : parts) {
    if (p != nullptr && !p->empty()) used.push_back(p);
  }
  if (used.empty()) return {};
  if (used.size() == 1) return *used.front();
  return merge_layers(used);
}

void check_geometry(const BiLevelKvStore& s, const KvLayers& kvs, const char* what) {
  if (kvs.empty()) return;
  if (kvs.size() != s.num_layers) {
    throw std::invalid_argument(std::string("kv store: ") + what + " has " +
                                std::to_string(kvs.size()) + " layers, expected " +
                                std::to_string(s.num_layers));
  }
  for (const LayerKv& layer : kvs) {
    if (layer.num_heads != s.num_heads || layer.head_dim != s.head_dim) {
      throw std::invalid_argument(std::string("kv store: ") + what + " head geometry mismatch");
    }
    layer.validate();
    if (layer.positions != kvs.front().positions) {
      throw std::invalid_argument(std::string("kv store: ") + what + " positions differ across layers");
    }
  }
}

double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

}  // namespace

BiLevelKvStore::BiLevelKvStore(std::size_t layers, std::size_t heads, std::size_t dim)
    : num_layers(layers), num_heads(heads), head_dim(dim) {}

std::size_t BiLevelKvStore::dense_visual_tokens() const {
  std::size_t n = 0;
  for (const auto& [id, kvs] : dense) n += kv_tokens(kvs);
  return n;
}

void BiLevelKvStore::set_system(KvLayers kvs) {
  check_geometry(*this, kvs, "system KVs");
  system_kvs = std::move(kvs);
}

void BiLevelKvStore::append_timestamps(const KvLayers& kvs) {
  check_geometry(*this, kvs, "timestamp KVs");
  if (kv_tokens(kvs) == 0) return;
  if (timestamp_kvs.empty()) {
    timestamp_kvs = kvs;
    return;
  }
  const KvLayers* parts[] = {&timestamp_kvs, &kvs};
  timestamp_kvs = merge_layers(parts);
}

void BiLevelKvStore::set_dense(std::size_t chunk_id, TokenRange range, KvLayers kvs) {
  check_geometry(*this, kvs, "dense chunk KVs");
  if (kvs.empty()) kvs = empty_layers(num_layers, num_heads, head_dim);
  for (Position p : kvs.front().positions) {
    if (!range.contains(p)) {
      throw std::invalid_argument("kv store: chunk " + std::to_string(chunk_id) + " position " +
                                  std::to_string(p) + " outside its token range");
    }
  }
  dense[chunk_id] = std::move(kvs);
  chunk_token_ranges[chunk_id] = range;
  sparse.erase(chunk_id);
}

KvLayers BiLevelKvStore::timestamps_in(TokenRange range) const {
  return select_positions(timestamp_kvs, range);
}

KvLayers BiLevelKvStore::gather(TokenRange range) const {
  std::vector<KvLayers> pieces;
  pieces.push_back(select_positions(timestamp_kvs, range));
  for (const auto& [id, r] : chunk_token_ranges) {
    if (r.end <= range.begin || r.begin >= range.end) continue;
    pieces.push_back(select_positions(dense.at(id), range));
  }
  std::vector<const KvLayers*> ptrs;
  for (const KvLayers& p : pieces) {
    if (kv_tokens(p) > 0) ptrs.push_back(&p);
  }
  return merge_nonempty(ptrs);
}

KvLayers pool_chunk(const KvLayers& dense, std::size_t pool_factor) {
  if (pool_factor == 0) throw std::invalid_argument("pool factor must be at least 1");
  if (kv_tokens(dense) == 0) throw std::invalid_argument("pool_chunk: empty chunk");
  KvLayers out;
  out.reserve(dense.size());
  for (const LayerKv& in : dense) {
    const std::size_t n = in.n_tokens();
    const std::size_t m = (n + pool_factor - 1) / pool_factor;
    LayerKv pooled = LayerKv::empty(in.num_heads, in.head_dim);
    pooled.positions.resize(m);
    pooled.keys.resize(in.num_heads * m * in.head_dim);
    pooled.values.resize(in.num_heads * m * in.head_dim);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t b = r * pool_factor;
      const std::size_t e = std::min(n, b + pool_factor);
      const auto count = static_cast<Position>(e - b);
      Position sum = 0;
      for (std::size_t t = b; t < e; ++t) sum += in.positions[t];
      pooled.positions[r] = sum >= 0 ? sum / count : -((-sum + count - 1) / count);
      std::vector<double> ks(in.head_dim), vs(in.head_dim);
      for (std::size_t h = 0; h < in.num_heads; ++h) {
        std::fill(ks.begin(), ks.end(), 0.0);
        std::fill(vs.begin(), vs.end(), 0.0);
        for (std::size_t t = b; t < e; ++t) {
          const auto kt = in.key(h, t);
          const auto vt = in.value(h, t);
          for (std::size_t i = 0; i < in.head_dim; ++i) {
            ks[i] += kt[i];
            vs[i] += vt[i];
          }
        }
        auto k = pooled.key(h, r);
        auto v = pooled.value(h, r);
        const auto denom = static_cast<double>(e - b);
        for (std::size_t i = 0; i < in.head_dim; ++i) {
          k[i] = static_cast<float>(ks[i] / denom);
          v[i] = static_cast<float>(vs[i] / denom);
        }
      }
    }
    out.push_back(std::move(pooled));
  }
  return out;
}

void BiLevelKvStore::build_sparse(std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("pool factor must be at least 1");
  const std::vector<Position> ts =
      timestamp_kvs.empty() ? std::vector<Position>{} : timestamp_kvs.front().positions;
  sparse.clear();
  for (const auto& [id, kvs] : dense) {
    KvLayers pooled = pool_chunk(kvs, factor);
    if (!pooled.empty()) {
      auto& pos = pooled.front().positions;
      for (Position& p : pos) {
        if (std::binary_search(ts.begin(), ts.end(), p)) --p;
      }
      for (std::size_t l = 1; l < pooled.size(); ++l) pooled[l].positions = pos;
    }
    sparse[id] = std::move(pooled);
  }
  pool_factor = factor;
}

void BiLevelKvStore::validate() const {
  check_geometry(*this, system_kvs, "system KVs");
  check_geometry(*this, timestamp_kvs, "timestamp KVs");
  std::set<Position> seen;
  const auto claim = [&](const KvLayers& kvs, const std::string& what) {
    if (kvs.empty()) return;
    for (Position p : kvs.front().positions) {
      if (!seen.insert(p).second) {
        throw std::logic_error("kv store: position " + std::to_string(p) + " stored twice (" + what +
                               ")");
      }
    }
  };
  claim(system_kvs, "system");
  claim(timestamp_kvs, "timestamp");
  for (const auto& [id, kvs] : dense) {
    check_geometry(*this, kvs, "dense chunk KVs");
    claim(kvs, "chunk " + std::to_string(id));
  }
  if (pool_factor > 0) {
    for (const auto& [id, kvs] : dense) {
      const auto it = sparse.find(id);
      if (it == sparse.end()) {
        throw std::logic_error("kv store: chunk " + std::to_string(id) + " has no sparse level");
      }
      check_geometry(*this, it->second, "sparse chunk KVs");
      const std::size_t want = (kv_tokens(kvs) + pool_factor - 1) / pool_factor;
      if (kv_tokens(it->second) != want) {
        throw std::logic_error("kv store: chunk " + std::to_string(id) + " sparse size " +
                               std::to_string(kv_tokens(it->second)) + ", expected " +
                               std::to_string(want));
      }
    }
  }
}

std::string to_string(OracleKind kind) {
  return kind == OracleKind::Centroid ? "centroid" : "attn";
}

OracleKind oracle_kind_from_string(const std::string& s) {
  if (s == "centroid") return OracleKind::Centroid;
  if (s == "attn" || s == "attention") return OracleKind::AttentionScore;
  throw std::invalid_argument("unknown oracle kind '" + s + "' (expected centroid or attn)");
}

std::size_t default_probe_layer(const ModelConfig& config) { return config.num_layers / 2; }

QueryRepr probe_query(const ModelBundle& model, const BiLevelKvStore& store,
                      std::span<const TokenId> query_tokens, Position first_position,
                      std::size_t probe_layer) {
  const ModelConfig& c = model.config;
  if (probe_layer >= c.num_layers) {
    throw std::invalid_argument("probe layer " + std::to_string(probe_layer) + " out of range");
  }
  if (query_tokens.empty()) throw std::invalid_argument("probe_query: empty query");
  if (store.pool_factor == 0) throw std::logic_error("probe_query: sparse level not built");

  std::vector<const KvLayers*> parts = {&store.system_kvs, &store.timestamp_kvs};
  for (const auto& [id, kvs] : store.sparse) parts.push_back(&kvs);
  const KvLayers context = merge_nonempty(parts);

  std::vector<Position> positions(query_tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = first_position + static_cast<Position>(i);
  const std::vector<Position> ctx_pos =
      context.empty() ? std::vector<Position>{} : context.front().positions;

  ForwardOptions opts;
  opts.capture_queries_layer = probe_layer;
  ForwardResult r = forward_segment(model, query_tokens, positions, context,
                                    VisibilitySpec::full_causal(ctx_pos, positions), opts);

  QueryRepr q;
  q.num_heads = c.num_heads;
  q.head_dim = c.head_dim;
  q.n_query = query_tokens.size();
  q.queries = std::move(r.captured_queries);
  q.keys = r.kvs[probe_layer].keys;
  return q;
}

std::vector<RelevanceScore> score_chunks(const BiLevelKvStore& store, const QueryRepr& query,
                                         OracleKind kind, std::size_t probe_layer) {
  if (store.pool_factor == 0) throw std::logic_error("score_chunks: sparse level not built");
  if (query.num_heads != store.num_heads || query.head_dim != store.head_dim) {
    throw std::invalid_argument("score_chunks: query geometry does not match the store");
  }
  const std::size_t heads = query.num_heads;
  const std::size_t dim = query.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));

  std::vector<double> query_centroid(heads * dim, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < query.n_query; ++i) {
      const auto k = query.key(h, i);
      for (std::size_t j = 0; j < dim; ++j) query_centroid[h * dim + j] += k[j];
    }
  }
  for (double& v : query_centroid) v /= static_cast<double>(query.n_query);

  std::vector<RelevanceScore> scores;
  for (const auto& [id, kvs] : store.sparse) {
    const LayerKv& layer = kvs.at(probe_layer);
    const std::size_t n = layer.n_tokens();
    double score = 0.0;
    if (n > 0 && kind == OracleKind::AttentionScore) {
      double total = 0.0;
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < query.n_query; ++i) {
          double best = -std::numeric_limits<double>::infinity();
          for (std::size_t t = 0; t < n; ++t) {
            best = std::max(best, dot(query.query(h, i), layer.key(h, t)) * scale);
          }
          total += best;
        }
      }
      score = total / static_cast<double>(heads * query.n_query);
    } else if (n > 0) {
      std::vector<double> centroid(heads * dim, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < n; ++t) {
          const auto k = layer.key(h, t);
          for (std::size_t j = 0; j < dim; ++j) centroid[h * dim + j] += k[j];
        }
      }
      double ab = 0.0, aa = 0.0, bb = 0.0;
      for (std::size_t j = 0; j < centroid.size(); ++j) {
        centroid[j] /= static_cast<double>(n);
        ab += centroid[j] * query_centroid[j];
        aa += centroid[j] * centroid[j];
        bb += query_centroid[j] * query_centroid[j];
      }
      score = (aa > 0.0 && bb > 0.0) ? ab / (std::sqrt(aa) * std::sqrt(bb)) : 0.0;
    }
    scores.push_back({id, score});
  }
  return scores;
}

double MixedCache::kv_fraction() const {
  const std::uint64_t full = system_tokens + timestamp_tokens + all_dense_visual_tokens;
  return full == 0 ? 1.0 : static_cast<double>(total_tokens()) / static_cast<double>(full);
}

double MixedCache::visual_fraction() const {
  return all_dense_visual_tokens == 0
             ? 1.0
             : static_cast<double>(visual_tokens()) / static_cast<double>(all_dense_visual_tokens);
}

MixedCache assemble_mixed(const BiLevelKvStore& store, std::span<const RelevanceScore> scores,
                          std::int64_t top_k, CostMeter* meter) {
  if (top_k < 0) throw std::invalid_argument("top_k must be non-negative, got " + std::to_string(top_k));
  if (store.pool_factor == 0) throw std::logic_error("assemble_mixed: sparse level not built");

  std::vector<RelevanceScore> ranked;
  std::set<std::size_t> seen;
  for (const RelevanceScore& s : scores) {
    if (!store.dense.contains(s.chunk_id)) {
      throw std::invalid_argument("assemble_mixed: score for unknown chunk " + std::to_string(s.chunk_id));
    }
    if (!seen.insert(s.chunk_id).second) {
      throw std::invalid_argument("assemble_mixed: duplicate score for chunk " + std::to_string(s.chunk_id));
    }
    ranked.push_back(s);
  }
  std::sort(ranked.begin(), ranked.end(), [](const RelevanceScore& a, const RelevanceScore& b) {
    const bool an = std::isnan(a.score);
    const bool bn = std::isnan(b.score);
    if (an != bn) return bn;
    if (!an && a.score != b.score) return a.score > b.score;
    return a.chunk_id < b.chunk_id;
  });

  MixedCache cache;
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(top_k), ranked.size());
  for (std::size_t i = 0; i < k; ++i) cache.selection.push_back(ranked[i].chunk_id);
  std::sort(cache.selection.begin(), cache.selection.end());

  std::vector<const KvLayers*> parts = {&store.system_kvs, &store.timestamp_kvs};
  for (const auto& [id, kvs] : store.dense) {
    const std::uint64_t n_dense = kv_tokens(kvs);
    cache.all_dense_visual_tokens += n_dense;
    if (std::binary_search(cache.selection.begin(), cache.selection.end(), id)) {
      parts.push_back(&kvs);
      cache.dense_visual_tokens += n_dense;
    } else {
      const KvLayers& sp = store.sparse.at(id);
      parts.push_back(&sp);
      cache.sparse_visual_tokens += kv_tokens(sp);
    }
  }
  cache.system_tokens = store.system_tokens();
  cache.timestamp_tokens = store.timestamp_tokens();
  cache.layers = merge_nonempty(parts);
  if (meter != nullptr) meter->count_loaded(cache.total_tokens());
  return cache;
}

DecodeResult decode(const ModelBundle& model, MixedCache cache, std::span<const TokenId> query_tokens,
                    Position first_position, std::size_t max_new_tokens) {
  if (query_tokens.empty()) throw std::invalid_argument("decode: empty query");
  CostMeter meter(model.config, Phase::Decode);
  meter.count_loaded(cache.total_tokens());
  ForwardOptions opts;
  opts.meter = &meter;

  DecodeResult out;
  out.step_logits.vocab = model.config.vocab_size;

  const auto extend = [&](std::span<const TokenId> ids, Position first) {
    std::vector<Position> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = first + static_cast<Position>(i);
    const std::vector<Position> ctx_pos =
        cache.layers.empty() ? std::vector<Position>{} : cache.layers.front().positions;
    ForwardResult r = forward_segment(model, ids, positions, cache.layers,
                                      VisibilitySpec::full_causal(ctx_pos, positions), opts);
    if (cache.layers.empty()) {
      cache.layers = std::move(r.kvs);
    } else {
      const KvLayers* parts[] = {&cache.layers, &r.kvs};
      cache.layers = merge_layers(parts);
    }
    return std::move(r.logits);
  };

  out.query_logits = extend(query_tokens, first_position);
  std::span<const float> last = out.query_logits.row(out.query_logits.rows - 1);
  Logits step;
  Position next_pos = first_position + static_cast<Position>(query_tokens.size());
  for (std::size_t i = 0; i < max_new_tokens; ++i) {
    out.step_logits.data.insert(out.step_logits.data.end(), last.begin(), last.end());
    ++out.step_logits.rows;
    const TokenId token = greedy_token(last);
    out.generated.push_back(token);
    if (i + 1 == max_new_tokens) break;
    step = extend(std::span<const TokenId>(&out.generated.back(), 1), next_pos++);
    last = step.row(0);
  }
  out.cost = meter.report();
  return out;
}

namespace {

constexpr int kStoreFormatVersion = 1;

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

nlohmann::json write_block(const std::filesystem::path& dir, const std::string& name, const KvLayers& kvs) {
  detail::ByteWriter w;
  for (const LayerKv& layer : kvs) {
    w.f32s(layer.keys);
    w.f32s(layer.values);
  }
  write_file(dir / name, w.bytes());
  return {{"file", name},
          {"n_tokens", kv_tokens(kvs)},
          {"positions", kvs.empty() ? std::vector<Position>{} : kvs.front().positions}};
}

KvLayers read_block(const std::filesystem::path& dir, const nlohmann::json& j, const BiLevelKvStore& s) {
  const auto positions = j.at("positions").get<std::vector<Position>>();
  if (positions.size() != j.at("n_tokens").get<std::size_t>()) {
    throw std::runtime_error("kv store index: token count disagrees with positions");
  }
  const auto bytes = read_file(dir / j.at("file").get<std::string>());
  detail::ByteReader r(bytes);
  const std::size_t n = s.num_heads * positions.size() * s.head_dim;
  KvLayers kvs;
  for (std::size_t l = 0; l < s.num_layers; ++l) {
    LayerKv layer = LayerKv::empty(s.num_heads, s.head_dim);
    layer.keys = r.f32s(n);
    layer.values = r.f32s(n);
    layer.positions = positions;
    kvs.push_back(std::move(layer));
  }
  if (!r.done()) throw std::runtime_error("kv store: trailing bytes in " + j.at("file").get<std::string>());
  return kvs;
}

}  // namespace

void save_store(const BiLevelKvStore& store, const std::filesystem::path& dir,
                std::uint64_t model_checksum) {
  store.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json index = {
      {"format_version", kStoreFormatVersion},
      {"num_layers", store.num_layers},
      {"num_heads", store.num_heads},
      {"head_dim", store.head_dim},
      {"pool_factor", store.pool_factor},
      {"model_checksum", hex64(model_checksum)},
  };
  index["system"] = write_block(dir, "system.f32", store.system_kvs);
  index["timestamps"] = write_block(dir, "timestamps.f32", store.timestamp_kvs);
  nlohmann::json chunks = nlohmann::json::array();
  for (const auto& [id, kvs] : store.dense) {
    const TokenRange r = store.chunk_token_ranges.at(id);
    nlohmann::json c = {{"id", id}, {"token_range", {r.begin, r.end}}};
    c["dense"] = write_block(dir, "chunk_" + std::to_string(id) + "_dense.f32", kvs);
    const auto sp = store.sparse.find(id);
    if (sp != store.sparse.end()) {
      c["sparse"] = write_block(dir, "chunk_" + std::to_string(id) + "_sparse.f32", sp->second);
    }
    chunks.push_back(std::move(c));
  }
  index["chunks"] = std::move(chunks);
  const std::string text = index.dump(2) + "\n";
  write_file(dir / "index.json",
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

BiLevelKvStore load_store(const std::filesystem::path& dir, std::uint64_t* model_checksum) {
  const auto raw = read_file(dir / "index.json");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("kv store index: " + std::string(e.what()));
  }
  try {
    if (index.at("format_version").get<int>() != kStoreFormatVersion) {
      throw std::runtime_error("kv store: unsupported format version");
    }
    BiLevelKvStore s(index.at("num_layers").get<std::size_t>(), index.at("num_heads").get<std::size_t>(),
                     index.at("head_dim").get<std::size_t>());
    s.pool_factor = index.at("pool_factor").get<std::size_t>();
    if (model_checksum != nullptr) {
      *model_checksum = std::stoull(index.at("model_checksum").get<std::string>(), nullptr, 16);
    }
    s.system_kvs = read_block(dir, index.at("system"), s);
    s.timestamp_kvs = read_block(dir, index.at("timestamps"), s);
    if (kv_tokens(s.system_kvs) == 0) s.system_kvs.clear();
    if (kv_tokens(s.timestamp_kvs) == 0) s.timestamp_kvs.clear();
    for (const auto& c : index.at("chunks")) {
      const auto id = c.at("id").get<std::size_t>();
      const auto range = c.at("token_range").get<std::vector<Position>>();
      if (range.size() != 2) throw std::runtime_error("kv store index: bad token_range");
      s.dense[id] = read_block(dir, c.at("dense"), s);
      s.chunk_token_ranges[id] = {range[0], range[1]};
      if (c.contains("sparse")) s.sparse[id] = read_block(dir, c.at("sparse"), s);
    }
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("kv store index: " + std::string(e.what()));
  }
}

}  // namespace chunkkv
