#pragma once

// Checkpoint file layout:
//   "TKFD" | u32 version (LE) | u32 header length (LE) | JSON header |
//   raw little-endian arrays in manifest order.
// The header carries the model config, the array manifest (name, shape,
// dtype) and optionally the tokenizer vocabulary.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokenforge/bpe.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/image_io.hpp"
#include "tokenforge/model.hpp"

namespace tokenforge {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'T', 'K', 'F', 'D'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else return "float64";
}

template <typename T>
struct CheckpointBundle {
  ModelParams<T> params;
  std::optional<BpeVocab> vocab;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ModelParams<T>& params,
                                               const BpeVocab* vocab = nullptr,
                                               const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json manifest = nlohmann::json::array();
  for_each_array(params, [&](const std::string& name, const Tensor<T>& t) {
    if (t.empty()) return;
    manifest.push_back({{"name", name}, {"shape", t.shape}, {"dtype", dtype_name<T>()}});
  });
  nlohmann::json header{{"config", params.config.to_json()}, {"arrays", manifest}, {"extra", extra}};
  if (vocab) header["vocab"] = vocab->to_json();
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for_each_array(params, [&](const std::string&, const Tensor<T>& t) {
    if (t.empty()) return;
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data.data());
    out.insert(out.end(), bytes, bytes + t.size() * sizeof(T));
  });
  return out;
}

template <typename T>
CheckpointBundle<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    fail(Errc::CorruptCheckpoint, "bad magic");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion)
    fail(Errc::CorruptCheckpoint, "unsupported version " + std::to_string(version) +
                                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t header_len = detail::get_u32(bytes.data() + 8);
  if (bytes.size() < 12ull + header_len) fail(Errc::CorruptCheckpoint, "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::CorruptCheckpoint, std::string("header: ") + e.what());
  }

  CheckpointBundle<T> bundle;
  try {
    bundle.params = allocate_params<T>(ModelConfig::from_json(header.at("config")));
    std::map<std::string, Tensor<T>*> slots;
    for_each_array(bundle.params, [&](const std::string& name, Tensor<T>& t) {
      if (!t.empty()) slots[name] = &t;
    });
    std::size_t off = 12ull + header_len;
    std::size_t filled = 0;
    for (const auto& entry : header.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto dtype = entry.at("dtype").get<std::string>();
      auto it = slots.find(name);
      if (it == slots.end()) fail(Errc::CorruptCheckpoint, "unexpected array " + name);
      Tensor<T>& dst = *it->second;
      if (shape != dst.shape) fail(Errc::CorruptCheckpoint, "shape mismatch for " + name);
      const std::size_t width = dtype == "float32" ? 4 : dtype == "float64" ? 8 : 0;
      if (width == 0) fail(Errc::CorruptCheckpoint, "unknown dtype " + dtype);
      if (off + dst.size() * width > bytes.size())
        fail(Errc::CorruptCheckpoint, "truncated array data for " + name);
      for (std::size_t i = 0; i < dst.size(); ++i) {
        const std::uint8_t* p = bytes.data() + off + i * width;
        if (width == 4) {
          float v;
          std::memcpy(&v, p, 4);
          dst.data[i] = static_cast<T>(v);
        } else {
          double v;
          std::memcpy(&v, p, 8);
          dst.data[i] = static_cast<T>(v);
        }
      }
      off += dst.size() * width;
      ++filled;
    }
    if (filled != slots.size())
      fail(Errc::CorruptCheckpoint, "manifest lists " + std::to_string(filled) + " of " +
                                        std::to_string(slots.size()) + " arrays");
    if (off != bytes.size()) fail(Errc::CorruptCheckpoint, "trailing bytes after array data");
    if (header.contains("vocab")) bundle.vocab = BpeVocab::from_json(header.at("vocab"));
    if (header.contains("extra")) bundle.extra = header.at("extra");
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::CorruptCheckpoint, std::string("header: ") + e.what());
  }
  return bundle;
}

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path,
                     const BpeVocab* vocab = nullptr,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  write_file_bytes(path, serialize_checkpoint(params, vocab, extra));
}

template <typename T>
CheckpointBundle<T> load_checkpoint_bundle(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_checkpoint<T>(bytes);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint_bundle<T>(path).params;
}

}  // namespace tokenforge
