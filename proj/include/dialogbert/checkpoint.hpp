// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <unordered_map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dialogbert/error.hpp"
#include "dialogbert/model.hpp"

// Checkpoint container:
//
//   bytes 0..7   magic "DLGBCKPT"
//   u32 LE       format version (1)
//   u64 LE       header length N
//   N bytes      UTF-8 JSON header:
//                  {"config": ModelConfig, "vocab_hash": "<16 hex digits>",
//                   "tensors": [{"name", "shape", "offset"}...]}
//   rest         float32 little-endian data; "offset" counts floats from the
//                start of this section, tensors are stored in header order.

namespace dialogbert {

inline constexpr char kCheckpointMagic[8] = {'D', 'L', 'G', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const BlockConfig& c) {
  return {{"hidden_size", c.hidden_size}, {"num_heads", c.num_heads},   {"num_layers", c.num_layers},
          {"ffn_size", c.ffn_size},       {"dropout", c.dropout},       {"max_positions", c.max_positions}};
}

inline BlockConfig block_config_from_json(const nlohmann::json& j) {
  BlockConfig c;
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.ffn_size = j.at("ffn_size").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"utt_encoder", to_json(c.utt_encoder)},
          {"ctx_encoder", to_json(c.ctx_encoder)},
          {"decoder", to_json(c.decoder)},
          {"max_utt_len", c.max_utt_len},
          {"max_ctx_utts", c.max_ctx_utts},
          {"tie_word_embeddings", c.tie_word_embeddings},
          {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.utt_encoder = block_config_from_json(j.at("utt_encoder"));
    c.ctx_encoder = block_config_from_json(j.at("ctx_encoder"));
    c.decoder = block_config_from_json(j.at("decoder"));
    c.max_utt_len = j.at("max_utt_len").get<std::size_t>();
    c.max_ctx_utts = j.at("max_ctx_utts").get<std::size_t>();
    c.tie_word_embeddings = j.at("tie_word_embeddings").get<bool>();
    c.init_std = j.value("init_std", c.init_std);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

/// Writes `data` to `path` through a temporary file and a rename.
inline void write_atomic(const std::filesystem::path& path, const std::string& data) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

/// Serialized checkpoint bytes for a set of named tensor values.
template <class T>
std::string encode_checkpoint(const ModelConfig& cfg, std::uint64_t vocab_hash, const ParamStore<T>& params) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params.params()) {
    tensors.push_back({{"name", p.name},
                       {"shape", std::vector<std::size_t>(p.tensor.shape().dims().begin(), p.tensor.shape().dims().end())},
                       {"offset", offset}});
    offset += p.tensor.numel();
  }
  const nlohmann::json header = {{"config", to_json(cfg)}, {"vocab_hash", hex64(vocab_hash)}, {"tensors", tensors}};
  const std::string head = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le(out, kCheckpointVersion, 4);
  detail::put_le(out, head.size(), 8);
  out += head;
  out.reserve(out.size() + offset * 4);
  for (const auto& p : params.params()) {
    for (const T v : p.tensor.data()) detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const DialogBert<T>& model, std::uint64_t vocab_hash) {
  detail::write_atomic(path, encode_checkpoint(model.config(), vocab_hash, model.params()));
}

struct CheckpointHeader {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  nlohmann::json tensors;
  std::size_t data_offset = 0;  // byte offset of the float section
};

inline CheckpointHeader parse_checkpoint_header(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  if (detail::get_le(p + 8, 4) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  const std::size_t head_len = detail::get_le(p + 12, 8);
  if (20 + head_len > bytes.size()) throw FormatError("checkpoint: truncated header");
  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(bytes.substr(20, head_len));
    h.config = model_config_from_json(j.at("config"));
    h.vocab_hash = std::stoull(j.at("vocab_hash").get<std::string>(), nullptr, 16);
    h.tensors = j.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  h.data_offset = 20 + head_len;
  return h;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Copies checkpoint values into `model`. Every parameter of the model must be
/// present with the same shape, and no extra tensors are allowed.
template <class T>
void load_parameters(DialogBert<T>& model, const std::string& bytes, const CheckpointHeader& h) {
  auto& params = model.params().params();
  if (h.tensors.size() != params.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(params.size()) + " tensors, found " +
                      std::to_string(h.tensors.size()));
  }
  std::unordered_map<std::string, const nlohmann::json*> by_name;
  for (const auto& t : h.tensors) by_name[t.at("name").get<std::string>()] = &t;
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data()) + h.data_offset;
  const std::size_t available = (bytes.size() - h.data_offset) / 4;
  for (auto& p : params) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + p.name);
    const nlohmann::json& entry = *it->second;
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (!(Shape(std::span<const std::size_t>(shape)) == p.tensor.shape())) {
      throw FormatError("checkpoint: tensor " + p.name + " has shape " + Shape(std::span<const std::size_t>(shape)).str() +
                        ", expected " + p.tensor.shape().str());
    }
    const std::size_t off = entry.at("offset").get<std::size_t>();
    if (off + p.tensor.numel() > available) throw FormatError("checkpoint: data for " + p.name + " is truncated");
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(base + 4 * (off + i), 4))));
    }
  }
}

template <class T>
struct LoadedModel {
  std::unique_ptr<DialogBert<T>> model;
  std::uint64_t vocab_hash = 0;
};

template <class T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const CheckpointHeader h = parse_checkpoint_header(bytes);
  LoadedModel<T> out{std::make_unique<DialogBert<T>>(h.config, 0), h.vocab_hash};
  load_parameters(*out.model, bytes, h);
  return out;
}

}  // namespace dialogbert
