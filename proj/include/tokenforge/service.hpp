#pragma once

// Interactive token -> region queries over a loaded checkpoint, and the HTTP
// front end that exposes them.
//
// Uploaded images are resized so both sides are multiples of 4p, their dense
// features are computed once and cached under the SHA-256 of the uploaded
// bytes. A query tokenizes its text, scores every token against the cached
// grid and returns min-max normalized heatmaps at feature resolution. The
// single-space query is the background probe and takes the negation path.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "tokenforge/bpe.hpp"
#include "tokenforge/checkpoint.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/evalkit.hpp"
#include "tokenforge/image_io.hpp"
#include "tokenforge/model.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    fail(Errc::NumericalFailure, "SHA-256 digest failed");
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

/// Nearest multiple of 4p to `side`, clamped to [4p, largest multiple <= 1024].
inline std::size_t serving_side(std::size_t side, std::size_t patch_size) {
  const std::size_t m = 4 * patch_size;
  const std::size_t hi = std::max(m, (std::size_t{1024} / m) * m);
  const std::size_t r = static_cast<std::size_t>(std::llround(static_cast<double>(side) / m)) * m;
  return std::clamp(r, m, hi);
}

struct ServedModel {
  ModelParams<float> params;
  BpeVocab vocab;
  std::string checkpoint_id;  // "<file name>@<first 12 hex of SHA-256>"
  std::filesystem::path path;
  std::uint64_t serial = 0;  // distinguishes loads for the feature cache
};

/// Loads a checkpoint that embeds its vocabulary.
inline std::shared_ptr<const ServedModel> load_served_model(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  auto bundle = deserialize_checkpoint<float>(bytes);
  if (!bundle.vocab) fail(Errc::CorruptCheckpoint, path.string() + " carries no vocabulary");
  auto m = std::make_shared<ServedModel>();
  m->params = std::move(bundle.params);
  m->vocab = std::move(*bundle.vocab);
  m->checkpoint_id = path.filename().string() + "@" + sha256_hex(bytes).substr(0, 12);
  m->path = path;
  static std::atomic<std::uint64_t> next_serial{1};
  m->serial = next_serial++;
  return m;
}

struct UploadResult {
  std::string image_id;
  std::size_t width = 0;   // after resizing
  std::size_t height = 0;
  std::size_t grid_h = 0;  // feature grid
  std::size_t grid_w = 0;

  nlohmann::json to_json() const {
    return {{"image_id", image_id}, {"width", width},   {"height", height},
            {"grid_h", grid_h},     {"grid_w", grid_w}};
  }
};

struct TokenHeatmap {
  std::string text;
  std::int64_t token_id = -1;
  std::optional<SimilarityMap> heatmap;  // empty for unknown tokens
  std::string error;
};

struct QueryResponse {
  std::vector<TokenHeatmap> tokens;
  std::optional<SimilarityMap> combined;
  std::string checkpoint;
  bool background_probe = false;

  nlohmann::json to_json() const {
    auto map_json = [](const std::optional<SimilarityMap>& m) -> nlohmann::json {
      if (!m) return nullptr;
      return {{"height", m->height}, {"width", m->width}, {"values", m->scores}};
    };
    nlohmann::json toks = nlohmann::json::array();
    for (const auto& t : tokens) {
      nlohmann::json j = {{"text", t.text}, {"token_id", t.token_id}, {"heatmap", map_json(t.heatmap)}};
      if (!t.error.empty()) j["error"] = t.error;
      toks.push_back(std::move(j));
    }
    return {{"tokens", toks},
            {"combined", map_json(combined)},
            {"checkpoint", checkpoint},
            {"background_probe", background_probe}};
  }
};

/// Cell-wise maximum of the maps present; empty when none is.
inline std::optional<SimilarityMap> combine_max(const std::vector<TokenHeatmap>& tokens) {
  std::optional<SimilarityMap> out;
  for (const auto& t : tokens) {
    if (!t.heatmap) continue;
    if (!out) {
      out = *t.heatmap;
      continue;
    }
    for (std::size_t i = 0; i < out->scores.size(); ++i)
      out->scores[i] = std::max(out->scores[i], t.heatmap->scores[i]);
  }
  return out;
}

class QueryEngine {
 public:
  explicit QueryEngine(std::shared_ptr<const ServedModel> model) : model_(std::move(model)) {
    if (!model_) fail(Errc::InvalidArgument, "QueryEngine needs a model");
  }

  std::shared_ptr<const ServedModel> model() const {
    std::lock_guard<std::mutex> lock(model_mutex_);
    return model_;
  }

  std::string checkpoint_id() const { return model()->checkpoint_id; }

  /// Loads the new checkpoint without holding any lock, then swaps it in.
  /// Cached features belong to the old model and are recomputed lazily.
  std::string reload(const std::filesystem::path& path) {
    auto next = load_served_model(path);
    std::lock_guard<std::mutex> lock(model_mutex_);
    model_ = std::move(next);
    return model_->checkpoint_id;
  }

  std::string reload() { return reload(model()->path); }

  UploadResult upload(std::span<const std::uint8_t> bytes) {
    RgbImage img;
    try {
      img = decode_rgb_png(bytes);
    } catch (const Error& e) {
      fail(Errc::BadImage, e.detail());
    }
    if (img.width == 0 || img.height == 0) fail(Errc::BadImage, "image has no pixels");
    const std::string id = sha256_hex(bytes);
    const auto model = this->model();
    {
      std::shared_lock lock(cache_mutex_);
      if (auto it = cache_.find(id); it != cache_.end() && it->second.serial == model->serial)
        return it->second.info;
    }
    Entry entry;
    entry.original = image_to_grid<float>(img);
    entry.info.image_id = id;
    prepare(entry, *model);
    std::unique_lock lock(cache_mutex_);
    auto [it, inserted] = cache_.try_emplace(id, std::move(entry));
    if (!inserted && it->second.serial != model->serial) it->second = std::move(entry);
    return it->second.info;
  }

  std::size_t cached_images() const {
    std::shared_lock lock(cache_mutex_);
    return cache_.size();
  }

  QueryResponse query(const std::string& image_id, const std::string& text) {
    const bool probe = text == " ";
    if (!probe && trimmed_empty(text)) fail(Errc::InvalidArgument, "query text is empty");
    const auto model = this->model();
    const FeatureGrid<float> features = features_for(image_id, *model);

    QueryResponse resp;
    resp.checkpoint = model->checkpoint_id;
    resp.background_probe = probe;
    for (const auto& span : tokenize(text, model->vocab, /*lenient=*/true)) {
      if (!probe && is_whitespace_text(span.text)) continue;
      TokenHeatmap t{span.text, span.id, std::nullopt, {}};
      if (span.id < 0 || static_cast<std::size_t>(span.id) >= model->params.config.vocab_size) {
        t.error = "UnknownToken";
      } else {
        try {
          const auto e = token_embedding(model->params, span.id);
          t.heatmap = probe ? zero_shot_foreground(features, e)
                            : minmax_normalize(similarity_map(features, e));
        } catch (const Error& err) {
          t.error = std::string(errc_name(err.code()));
        }
      }
      resp.tokens.push_back(std::move(t));
    }
    resp.combined = combine_max(resp.tokens);
    return resp;
  }

 private:
  struct Entry {
    FeatureGrid<float> original;  // decoded upload, kept to recompute after a reload
    FeatureGrid<float> features;
    std::uint64_t serial = 0;
    UploadResult info;
  };

  static bool trimmed_empty(const std::string& text) {
    for (const auto& ch : utf8_chars(text))
      if (!is_whitespace_symbol(ch)) return false;
    return true;
  }

  FeatureGrid<float> features_for(const std::string& image_id, const ServedModel& model) {
    {
      std::shared_lock lock(cache_mutex_);
      auto it = cache_.find(image_id);
      if (it == cache_.end()) fail(Errc::IndexError, "unknown image_id " + image_id);
      if (it->second.serial == model.serial) return it->second.features;
    }
    std::unique_lock lock(cache_mutex_);
    auto& entry = cache_.at(image_id);
    if (entry.serial != model.serial) prepare(entry, model);
    return entry.features;
  }

  /// Resizes for the model's patch size and recomputes the dense features.
  static void prepare(Entry& entry, const ServedModel& model) {
    const std::size_t p = model.params.config.patch_size;
    const auto grid = bilinear_resize(entry.original, serving_side(entry.original.height, p),
                                      serving_side(entry.original.width, p));
    entry.features = visual_forward(grid, model.params);
    entry.serial = model.serial;
    entry.info.width = grid.width;
    entry.info.height = grid.height;
    entry.info.grid_h = entry.features.height;
    entry.info.grid_w = entry.features.width;
  }

  mutable std::mutex model_mutex_;
  std::shared_ptr<const ServedModel> model_;
  mutable std::shared_mutex cache_mutex_;
  std::map<std::string, Entry> cache_;
};

inline int http_status(Errc code) {
  switch (code) {
    case Errc::IndexError: return 404;
    case Errc::BadImage:
    case Errc::InvalidArgument:
    case Errc::ParseError:
    case Errc::MissingField:
    case Errc::UnrepresentableInput: return 400;
    case Errc::IoFailure:
    case Errc::CorruptCheckpoint: return 422;
    default: return 500;
  }
}

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

inline void send_error(httplib::Response& res, int status, const std::string& error,
                       const std::string& detail) {
  send_json(res, status, {{"error", error}, {"detail", detail}});
}

/// Registers the four endpoints on `server`. Library errors become
/// {error, detail} bodies with the mapped status code.
inline void install_routes(httplib::Server& server, QueryEngine& engine) {
  auto guarded = [](auto handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
      try {
        handler(req, res);
      } catch (const Error& e) {
        send_error(res, http_status(e.code()), std::string(errc_name(e.code())), e.detail());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, "ParseError", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "InternalError", e.what());
      }
    };
  };

  server.Get("/health", guarded([&engine](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"checkpoint", engine.checkpoint_id()}});
  }));

  server.Post("/images", guarded([&engine](const httplib::Request& req, httplib::Response& res) {
    const auto* data = reinterpret_cast<const std::uint8_t*>(req.body.data());
    send_json(res, 200, engine.upload({data, req.body.size()}).to_json());
  }));

  server.Post("/query", guarded([&engine](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    if (!body.is_object() || !body.contains("image_id") || !body.contains("text"))
      fail(Errc::MissingField, "query needs image_id and text");
    const auto id = body.at("image_id").get<std::string>();
    const auto text = body.at("text").get<std::string>();
    send_json(res, 200, engine.query(id, text).to_json());
  }));

  server.Post("/checkpoint", guarded([&engine](const httplib::Request& req, httplib::Response& res) {
    std::string id;
    if (req.body.empty()) {
      id = engine.reload();
    } else {
      const auto body = nlohmann::json::parse(req.body);
      id = body.contains("path") ? engine.reload(body.at("path").get<std::string>()) : engine.reload();
    }
    send_json(res, 200, {{"status", "reloaded"}, {"checkpoint", id}});
  }));
}

}  // namespace tokenforge
