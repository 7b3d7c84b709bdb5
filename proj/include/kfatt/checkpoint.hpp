// Model checkpoint container.
//
//   offset  size  field
//   0       8     magic "KFATTCKP"
//   8       4     format version, u32 little-endian (currently 1)
//   12      8     manifest length in bytes, u64 little-endian
//   20      L     manifest, UTF-8 JSON
//   20+L    ...   parameter data, f64 little-endian, row-major, in manifest order
//
// The manifest records the run's config digest, the digest of the dataset the
// model was trained on, the full model configuration, and for each parameter
// its name, shape, and element offset into the data section.

#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "kfatt/behavior_model.hpp"

namespace kfatt {

inline constexpr char kCheckpointMagic[8] = {'K', 'F', 'A', 'T', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
  std::string config_digest;
  std::string dataset_digest;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const std::string& path) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw Error(path + ": truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline nlohmann::json model_config_json(const model::ModelConfig& c) {
  return {{"kernel", model::to_string(c.kernel)},
          {"num_queries", c.num_queries},
          {"num_items", c.num_items},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"d_k", c.d_k},
          {"d_v", c.d_v},
          {"mlp_hidden", c.mlp_hidden},
          {"head_hidden", c.head_hidden},
          {"session_gap", c.session_gap},
          {"max_sessions", c.max_sessions},
          {"max_per_session", c.max_per_session},
          {"single_session", c.single_session},
          {"scale_logits", c.scale_logits},
          {"embedding_sd", c.embedding_sd},
          {"ctr_raw_item", c.ctr_raw_item}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  const auto kernel = model::parse_kernel(j.at("kernel").get<std::string>());
  if (!kernel) throw Error("checkpoint: unknown kernel '" + j.at("kernel").get<std::string>() + "'");
  c.kernel = *kernel;
  j.at("num_queries").get_to(c.num_queries);
  j.at("num_items").get_to(c.num_items);
  j.at("d_model").get_to(c.d_model);
  j.at("heads").get_to(c.heads);
  j.at("d_k").get_to(c.d_k);
  j.at("d_v").get_to(c.d_v);
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("session_gap").get_to(c.session_gap);
  j.at("max_sessions").get_to(c.max_sessions);
  j.at("max_per_session").get_to(c.max_per_session);
  j.at("single_session").get_to(c.single_session);
  j.at("scale_logits").get_to(c.scale_logits);
  j.at("embedding_sd").get_to(c.embedding_sd);
  j.at("ctr_raw_item").get_to(c.ctr_raw_item);
  return c;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const model::Model& m, const CheckpointInfo& info) {
  const auto& ps = m.params();
  nlohmann::json manifest;
  manifest["format"] = "kfatt-checkpoint";
  manifest["config_digest"] = info.config_digest;
  manifest["dataset_digest"] = info.dataset_digest;
  manifest["model"] = detail::model_config_json(m.config());
  nlohmann::json params = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    params.push_back({{"name", ps.name(i)}, {"shape", ps.value(i).shape()}, {"offset", offset}});
    offset += ps.value(i).size();
  }
  manifest["params"] = std::move(params);
  manifest["total_elements"] = offset;
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (double x : ps.value(i).data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(x));
  if (!os) throw Error("write failed: " + path);
}

struct LoadedCheckpoint {
  model::Model model;
  CheckpointInfo info;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw Error(path + ": not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw Error(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(is, path);
  if (len > (1u << 26)) throw Error(path + ": manifest too large");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw Error(path + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": malformed manifest: " + e.what());
  }
  try {
    CheckpointInfo info{manifest.at("config_digest").get<std::string>(),
                        manifest.at("dataset_digest").get<std::string>()};
    const model::ModelConfig cfg = detail::model_config_from_json(manifest.at("model"));
    model::ParamStore store;
    for (const auto& p : manifest.at("params")) {
      Tensor t(p.at("shape").get<Shape>());
      for (auto& x : t.data()) x = std::bit_cast<double>(detail::get_le<std::uint64_t>(is, path));
      store.add(p.at("name").get<std::string>(), std::move(t));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw Error(path + ": trailing bytes after parameter data");
    return {model::Model(cfg, std::move(store)), std::move(info)};
  } catch (const nlohmann::json::exception& e) {
    throw Error(path + ": bad manifest field: " + e.what());
  }
}

}  // namespace kfatt
