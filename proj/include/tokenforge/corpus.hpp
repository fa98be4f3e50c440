#pragma once

// Token-level image/text records: building token masks from character masks,
// the on-disk record format (RGB PNG + 16-bit mask PNG + JSON metadata),
// validation, overlay rendering, corpus statistics and parsing prompts.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokenforge/bpe.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/image_io.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

namespace fs = std::filesystem;

struct TokenEntry {
  std::string text;
  std::int64_t token_id = 0;
  std::uint32_t pixel_value = 0;
  std::size_t index_in_text = 0;

  bool operator==(const TokenEntry&) const = default;
};

/// A labelled text region, used by the box-based parsing prompts.
struct Region {
  std::string text;
  std::array<int, 4> bbox{};  // x1, y1, x2, y2

  bool operator==(const Region&) const = default;
};

struct TokenRecord {
  std::string image_path;  // relative to the metadata document
  std::string mask_path;
  RgbImage image;
  MaskPlane mask;
  std::string question;
  std::string answer;
  std::vector<TokenEntry> entries;
  std::string image_type = "unknown";
  std::vector<Region> regions;

  std::size_t width() const { return image.width; }
  std::size_t height() const { return image.height; }

  /// Binary mask of the pixels labelled with `pixel_value`.
  BinaryMask token_mask(std::uint32_t pixel_value) const {
    BinaryMask m(mask.height, mask.width);
    for (std::size_t i = 0; i < mask.values.size(); ++i)
      m.bits[i] = mask.values[i] == pixel_value ? 1 : 0;
    return m;
  }

  bool operator==(const TokenRecord&) const = default;
};

struct CharMask {
  std::size_t char_index = 0;
  BinaryMask mask;
};

struct TokenMaskPair {
  TokenSpan token;
  std::size_t index_in_text = 0;
  BinaryMask mask;
  bool empty = true;
};

inline std::size_t max_pixel_value() { return 65535; }

// ---------------------------------------------------------------------------
// Pipeline: token spans + character masks -> token masks.

/// Each token's mask is the union of the character masks inside its span.
/// Characters with no mask contribute nothing; tokens whose union is empty
/// are returned flagged `empty`.
inline std::vector<TokenMaskPair> build_token_masks(const std::vector<TokenSpan>& spans,
                                                    const std::vector<CharMask>& char_masks,
                                                    std::size_t height, std::size_t width) {
  std::multimap<std::size_t, const BinaryMask*> by_char;
  for (const auto& cm : char_masks) {
    if (cm.mask.height != height || cm.mask.width != width)
      fail(Errc::DimensionMismatch,
           "char mask " + std::to_string(cm.char_index) + " is " + std::to_string(cm.mask.width) +
               "x" + std::to_string(cm.mask.height) + ", expected " + std::to_string(width) + "x" +
               std::to_string(height));
    by_char.emplace(cm.char_index, &cm.mask);
  }
  std::vector<TokenMaskPair> out;
  out.reserve(spans.size());
  for (std::size_t t = 0; t < spans.size(); ++t) {
    TokenMaskPair pair{spans[t], t, BinaryMask(height, width), true};
    for (auto it = by_char.lower_bound(spans[t].begin);
         it != by_char.end() && it->first < spans[t].end; ++it) {
      const auto& bits = it->second->bits;
      for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) pair.mask.bits[i] = 1;
    }
    pair.empty = pair.mask.empty();
    out.push_back(std::move(pair));
  }
  return out;
}

/// Chooses `count` token indices (all when count == 0 or count >= n) with a
/// seeded shuffle, returned in ascending order.
inline std::vector<std::size_t> select_tokens(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (count == 0 || count >= n) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct RecordAssembly {
  TokenRecord record;
  std::vector<std::string> warnings;
};

/// Writes the selected token masks into a 16-bit plane with pixel values
/// 1..n in entry order. Pixels claimed by several tokens go to the token with
/// the lower index_in_text and produce an "overlap" warning.
inline RecordAssembly encode_record(const RgbImage& image, std::string question, std::string answer,
                                    std::vector<TokenMaskPair> tokens, std::string stem = "record") {
  if (tokens.size() > max_pixel_value())
    fail(Errc::PixelValueOverflow, std::to_string(tokens.size()) +
                                       " tokens exceed the 16-bit mask plane limit of " +
                                       std::to_string(max_pixel_value()));
  std::stable_sort(tokens.begin(), tokens.end(), [](const auto& a, const auto& b) {
    return a.index_in_text < b.index_in_text;
  });
  RecordAssembly out;
  auto& rec = out.record;
  rec.image = image;
  rec.mask = MaskPlane(image.width, image.height);
  rec.question = std::move(question);
  rec.answer = std::move(answer);
  rec.image_path = stem + ".png";
  rec.mask_path = stem + "_mask.png";
  std::size_t overlaps = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (t.mask.height != image.height || t.mask.width != image.width)
      fail(Errc::DimensionMismatch, "token mask dims differ from image dims");
    const auto pv = static_cast<std::uint16_t>(i + 1);
    rec.entries.push_back({t.token.text, t.token.id, pv, t.index_in_text});
    for (std::size_t p = 0; p < t.mask.bits.size(); ++p) {
      if (!t.mask.bits[p]) continue;
      if (rec.mask.values[p] == 0) rec.mask.values[p] = pv;
      else ++overlaps;
    }
  }
  if (overlaps > 0)
    out.warnings.push_back("overlap: " + std::to_string(overlaps) +
                           " contested pixels assigned to the lower index_in_text");
  return out;
}

// ---------------------------------------------------------------------------
// Metadata document.

inline nlohmann::json record_to_json(const TokenRecord& r) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& e : r.entries)
    tokens.push_back({{"text", e.text},
                      {"id", e.token_id},
                      {"pixel_value", e.pixel_value},
                      {"index_in_text", e.index_in_text}});
  nlohmann::json j{{"image", r.image_path},   {"mask", r.mask_path},
                   {"width", r.image.width},  {"height", r.image.height},
                   {"question", r.question},  {"answer", r.answer},
                   {"tokens", tokens},        {"image_type", r.image_type}};
  if (!r.regions.empty()) {
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& reg : r.regions) regions.push_back({{"text", reg.text}, {"bbox", reg.bbox}});
    j["regions"] = regions;
  }
  return j;
}

/// Parses a metadata document; pixel data is left empty (see load_record).
inline TokenRecord record_from_json(const nlohmann::json& j) {
  TokenRecord r;
  try {
    r.image_path = j.at("image").get<std::string>();
    r.mask_path = j.at("mask").get<std::string>();
    r.image.width = j.at("width").get<std::size_t>();
    r.image.height = j.at("height").get<std::size_t>();
    r.question = j.at("question").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
    for (const auto& t : j.at("tokens"))
      r.entries.push_back({t.at("text").get<std::string>(), t.at("id").get<std::int64_t>(),
                           t.at("pixel_value").get<std::uint32_t>(),
                           t.at("index_in_text").get<std::size_t>()});
    r.image_type = j.value("image_type", std::string("unknown"));
    if (j.contains("regions"))
      for (const auto& reg : j.at("regions"))
        r.regions.push_back({reg.at("text").get<std::string>(),
                             reg.at("bbox").get<std::array<int, 4>>()});
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, std::string("record metadata: ") + e.what());
  }
  return r;
}

inline std::string record_stem(const TokenRecord& r) {
  return fs::path(r.image_path).stem().string();
}

/// Writes image, mask and metadata under `dir`; returns the metadata path.
inline fs::path save_record(const TokenRecord& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_file_bytes(dir / r.image_path, encode_rgb_png(r.image));
  write_file_bytes(dir / r.mask_path, encode_mask_png(r.mask));
  const fs::path meta = dir / (record_stem(r) + ".json");
  std::ofstream out(meta, std::ios::trunc);
  if (!out) fail(Errc::IoFailure, "cannot write " + meta.string());
  out << record_to_json(r).dump(2) << '\n';
  return meta;
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoFailure, "cannot open " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, path.string() + ": " + e.what());
  }
}

inline TokenRecord load_record(const fs::path& meta_path) {
  TokenRecord r = record_from_json(read_json_file(meta_path));
  const std::size_t w = r.image.width, h = r.image.height;
  const fs::path dir = meta_path.parent_path();
  r.image = read_rgb_png(dir / r.image_path);
  r.mask = read_mask_png(dir / r.mask_path);
  // Keep the declared dims visible to validation when files disagree.
  if (r.image.width != w || r.image.height != h) {
    r.image.width = w;
    r.image.height = h;
    r.image.pixels.clear();
  }
  return r;
}

/// Metadata documents of a corpus directory in name order (vocab.json and
/// other non-record JSON files are skipped).
inline std::vector<fs::path> list_record_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(Errc::IoFailure, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".json") continue;
    if (e.path().filename() == "vocab.json") continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

inline std::vector<TokenRecord> load_corpus(const fs::path& dir) {
  std::vector<TokenRecord> records;
  for (const auto& f : list_record_files(dir)) records.push_back(load_record(f));
  return records;
}

// ---------------------------------------------------------------------------
// Validation.

struct Violation {
  std::string kind;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  std::vector<Violation> warnings;

  bool ok() const { return violations.empty(); }
  bool has(const std::string& kind) const {
    return std::any_of(violations.begin(), violations.end(),
                       [&](const Violation& v) { return v.kind == kind; });
  }
};

inline ValidationReport validate_record(const TokenRecord& r, const BpeVocab* vocab) {
  ValidationReport rep;
  auto violate = [&](std::string kind, std::string detail) {
    rep.violations.push_back({std::move(kind), std::move(detail)});
  };
  const bool dims_ok = r.mask.width == r.image.width && r.mask.height == r.image.height &&
                       r.image.pixels.size() == r.image.width * r.image.height * 3 &&
                       r.mask.values.size() == r.mask.width * r.mask.height;
  if (!dims_ok) {
    violate("dimension mismatch", "image " + std::to_string(r.image.width) + "x" +
                                      std::to_string(r.image.height) + ", mask " +
                                      std::to_string(r.mask.width) + "x" +
                                      std::to_string(r.mask.height));
  }

  std::map<std::uint32_t, std::size_t> pixel_counts;
  if (dims_ok)
    for (auto v : r.mask.values)
      if (v != 0) ++pixel_counts[v];

  std::set<std::uint32_t> seen;
  for (const auto& e : r.entries) {
    if (e.pixel_value == 0 || e.pixel_value > max_pixel_value())
      violate("invalid pixel value", "token '" + e.text + "' has pixel_value " +
                                         std::to_string(e.pixel_value));
    if (!seen.insert(e.pixel_value).second)
      violate("duplicate pixel value", "pixel_value " + std::to_string(e.pixel_value));
    if (dims_ok && pixel_counts.find(e.pixel_value) == pixel_counts.end()) {
      if (is_whitespace_text(e.text))
        rep.warnings.push_back({"empty whitespace token",
                                "pixel_value " + std::to_string(e.pixel_value) + " has no pixels"});
      else
        violate("orphan metadata entry", "token '" + e.text + "' pixel_value " +
                                             std::to_string(e.pixel_value) +
                                             " does not occur in the mask");
    }
  }
  for (const auto& [v, n] : pixel_counts)
    if (!seen.count(v))
      violate("unlabeled mask value", "mask value " + std::to_string(v) + " (" +
                                          std::to_string(n) + " pixels) has no token entry");

  if (vocab == nullptr) {
    rep.warnings.push_back({"no vocabulary", "token text checks skipped"});
    return rep;
  }
  std::vector<TokenSpan> answer_tokens;
  try {
    answer_tokens = tokenize(r.answer, *vocab);
  } catch (const Error& e) {
    violate("answer not tokenizable", e.detail());
    return rep;
  }
  for (const auto& e : r.entries) {
    if (e.index_in_text >= answer_tokens.size()) {
      violate("index out of range", "token '" + e.text + "' index_in_text " +
                                        std::to_string(e.index_in_text) + " >= " +
                                        std::to_string(answer_tokens.size()));
      continue;
    }
    const auto& expect = answer_tokens[e.index_in_text];
    if (expect.text != e.text)
      violate("token text mismatch", "index " + std::to_string(e.index_in_text) + ": '" + e.text +
                                         "' vs re-tokenized '" + expect.text + "'");
    else if (expect.id != e.token_id)
      violate("token id mismatch", "index " + std::to_string(e.index_in_text) + ": id " +
                                       std::to_string(e.token_id) + " vs " +
                                       std::to_string(expect.id));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Overlay rendering for visual inspection.

inline std::array<std::uint8_t, 3> pixel_value_color(std::uint32_t v) {
  std::uint64_t z = static_cast<std::uint64_t>(v) + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return {static_cast<std::uint8_t>(64 + (z & 0xbf)), static_cast<std::uint8_t>(64 + ((z >> 8) & 0xbf)),
          static_cast<std::uint8_t>(64 + ((z >> 16) & 0xbf))};
}

struct Overlay {
  RgbImage image;
  PngText labels;  // ("token:<pixel_value>", token text), stored as PNG text chunks

  std::vector<std::uint8_t> png() const { return encode_rgb_png(image, labels); }
};

/// Tints each labelled pixel halfway towards its token colour. Labels travel
/// as PNG text chunks so that only masked pixels change.
inline Overlay render_overlay(const TokenRecord& r) {
  Overlay out{r.image, {}};
  std::map<std::uint32_t, std::array<std::uint8_t, 3>> colors;
  for (const auto& e : r.entries) {
    colors[e.pixel_value] = pixel_value_color(e.pixel_value);
    out.labels.emplace_back("token:" + std::to_string(e.pixel_value), e.text);
  }
  for (std::size_t i = 0; i < r.mask.values.size(); ++i) {
    const auto v = r.mask.values[i];
    if (v == 0) continue;
    auto it = colors.find(v);
    const auto color = it != colors.end() ? it->second : pixel_value_color(v);
    std::uint8_t* px = out.image.pixels.data() + i * 3;
    std::array<std::uint8_t, 3> blended{};
    for (int c = 0; c < 3; ++c) blended[c] = static_cast<std::uint8_t>((px[c] + color[c] + 1) / 2);
    if (blended[0] == px[0] && blended[1] == px[1] && blended[2] == px[2])
      for (int c = 0; c < 3; ++c) blended[c] = static_cast<std::uint8_t>((px[c] + (255 - color[c]) + 1) / 2);
    for (int c = 0; c < 3; ++c) px[c] = blended[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics.

struct CorpusStats {
  std::size_t records = 0;
  std::size_t total_entries = 0;
  std::map<std::string, std::size_t> per_image_type;
  std::map<std::size_t, std::size_t> token_count_histogram;  // n_e -> records
  std::vector<std::pair<std::string, std::size_t>> top_tokens;

  nlohmann::json to_json() const {
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [k, v] : token_count_histogram) hist[std::to_string(k)] = v;
    nlohmann::json top = nlohmann::json::array();
    for (const auto& [t, n] : top_tokens) top.push_back({{"token", t}, {"count", n}});
    return {{"records", records},
            {"total_entries", total_entries},
            {"per_image_type", per_image_type},
            {"token_count_histogram", hist},
            {"top_tokens", top}};
  }
};

inline CorpusStats corpus_stats(const std::vector<TokenRecord>& records, std::size_t top_k = 100) {
  if (records.empty()) fail(Errc::EmptyCorpus, "no records");
  CorpusStats s;
  std::map<std::string, std::size_t> freq;
  for (const auto& r : records) {
    ++s.records;
    s.total_entries += r.entries.size();
    ++s.per_image_type[r.image_type];
    ++s.token_count_histogram[r.entries.size()];
    for (const auto& e : r.entries) ++freq[e.text];
  }
  s.top_tokens.assign(freq.begin(), freq.end());
  std::stable_sort(s.top_tokens.begin(), s.top_tokens.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (s.top_tokens.size() > top_k) s.top_tokens.resize(top_k);
  return s;
}

// ---------------------------------------------------------------------------
// Parsing-task prompts.

enum class ParsingTask { FullText, TextInBox, GroundText, Formula2Latex, Table2Markdown, Chart2Csv };

struct PromptPair {
  std::string question;
  std::string answer;
};

inline std::string format_bbox(const std::array<int, 4>& b) {
  std::ostringstream os;
  os << "<bbox>" << b[0] << ", " << b[1] << ", " << b[2] << ", " << b[3] << "</bbox>";
  return os.str();
}

inline PromptPair make_parsing_prompt(const TokenRecord& r, ParsingTask task,
                                      std::size_t region_index = 0) {
  auto region = [&]() -> const Region& {
    if (region_index >= r.regions.size())
      fail(Errc::MissingField, "task needs a bounding-box region, record has " +
                                   std::to_string(r.regions.size()));
    return r.regions[region_index];
  };
  switch (task) {
    case ParsingTask::FullText:
      return {"Recognizing full text.", r.answer};
    case ParsingTask::TextInBox: {
      const auto& reg = region();
      return {"Recognizing the text within the bounding box " + format_bbox(reg.bbox) + ".",
              reg.text};
    }
    case ParsingTask::GroundText: {
      const auto& reg = region();
      return {"Predict the bounding box of the text <ocr>" + reg.text + "</ocr>",
              format_bbox(reg.bbox) + "."};
    }
    case ParsingTask::Formula2Latex:
      return {"Converting the formula into LaTeX format.", r.answer};
    case ParsingTask::Table2Markdown:
      return {"Converting the table into Markdown format.", r.answer};
    case ParsingTask::Chart2Csv:
      return {"Converting the chart into CSV format.", r.answer};
  }
  fail(Errc::InvalidArgument, "unknown parsing task");
}

// ---------------------------------------------------------------------------
// Corpus builder: a directory of character-mask descriptions -> records.
//
// Input document (one per record, *.json):
//   {"image": "x.png", "answer": "...", "question": "..." (optional),
//    "image_type": "..." (optional), "regions": [...] (optional),
//    "chars": [{"char_index": 0, "mask": "x_c0.png"}, ...]     and/or
//    "char_plane": "x_chars.png"   (16-bit, value = char_index + 1)}

struct BuildOptions {
  std::size_t select_count = 0;  // tokens kept per record; 0 keeps all
  std::uint64_t seed = 0;
};

struct BuildSummary {
  std::size_t records = 0;
  std::vector<std::string> warnings;
};

inline std::vector<CharMask> load_char_masks(const nlohmann::json& doc, const fs::path& dir,
                                             std::size_t height, std::size_t width) {
  std::vector<CharMask> masks;
  if (doc.contains("chars"))
    for (const auto& c : doc.at("chars")) {
      const auto bytes = read_file_bytes(dir / c.at("mask").get<std::string>());
      masks.push_back({c.at("char_index").get<std::size_t>(), decode_binary_png(bytes)});
    }
  if (doc.contains("char_plane")) {
    const MaskPlane plane = read_mask_png(dir / doc.at("char_plane").get<std::string>());
    if (plane.width != width || plane.height != height)
      fail(Errc::DimensionMismatch, "char plane dims differ from image dims");
    std::map<std::uint16_t, BinaryMask> by_value;
    for (std::size_t i = 0; i < plane.values.size(); ++i) {
      const auto v = plane.values[i];
      if (v == 0) continue;
      auto [it, inserted] = by_value.try_emplace(v, height, width);
      it->second.bits[i] = 1;
    }
    for (auto& [v, m] : by_value) masks.push_back({static_cast<std::size_t>(v - 1), std::move(m)});
  }
  return masks;
}

/// Builds one record from a character-mask description document.
inline RecordAssembly build_record(const nlohmann::json& doc, const fs::path& dir,
                                   const BpeVocab& vocab, const BuildOptions& opts,
                                   const std::string& stem, std::uint64_t record_seed) {
  try {
    const RgbImage image = read_rgb_png(dir / doc.at("image").get<std::string>());
    const std::string answer = doc.at("answer").get<std::string>();
    const std::string question = doc.value("question", std::string("Recognizing full text."));
    const auto spans = tokenize(answer, vocab);
    const auto char_masks = load_char_masks(doc, dir, image.height, image.width);
    auto pairs = build_token_masks(spans, char_masks, image.height, image.width);
    const auto keep = select_tokens(pairs.size(), opts.select_count, record_seed);
    std::vector<TokenMaskPair> selected;
    for (auto i : keep) selected.push_back(std::move(pairs[i]));
    auto out = encode_record(image, question, answer, std::move(selected), stem);
    out.record.image_type = doc.value("image_type", std::string("unknown"));
    if (doc.contains("regions"))
      for (const auto& reg : doc.at("regions"))
        out.record.regions.push_back({reg.at("text").get<std::string>(),
                                      reg.at("bbox").get<std::array<int, 4>>()});
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ParseError, stem + ": " + e.what());
  }
}

inline BuildSummary build_corpus(const fs::path& chars_dir, const fs::path& out_dir,
                                 const BpeVocab& vocab, const BuildOptions& opts = {}) {
  if (!fs::is_directory(chars_dir)) fail(Errc::IoFailure, chars_dir.string() + " is not a directory");
  std::vector<fs::path> docs;
  for (const auto& e : fs::directory_iterator(chars_dir))
    if (e.is_regular_file() && e.path().extension() == ".json") docs.push_back(e.path());
  std::sort(docs.begin(), docs.end());
  fs::create_directories(out_dir);
  BuildSummary summary;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const std::string stem = docs[i].stem().string();
    auto built = build_record(read_json_file(docs[i]), chars_dir, vocab, opts, stem,
                              opts.seed * 1000003ull + i);
    save_record(built.record, out_dir);
    for (auto& w : built.warnings) summary.warnings.push_back(stem + ": " + w);
    ++summary.records;
  }
  vocab.save(out_dir / "vocab.json");
  return summary;
}

}  // namespace tokenforge
