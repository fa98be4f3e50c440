#pragma once

// Desk-scale byte-pair-encoding tokenizer. Text is split into whitespace
// characters (one token each) and maximal non-whitespace pieces; each piece
// starts as a sequence of base symbols (UTF-8 code points) and adjacent pairs
// are merged lowest-rank-first until no ranked pair remains.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokenforge/error.hpp"

namespace tokenforge {

/// Splits a UTF-8 string into code-point substrings. Invalid lead bytes are
/// passed through as single-byte symbols.
inline std::vector<std::string> utf8_chars(const std::string& text) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.size();) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    len = std::min(len, text.size() - i);
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_whitespace_symbol(const std::string& s) {
  return s == " " || s == "\t" || s == "\n" || s == "\r" || s == "\v" || s == "\f";
}

inline bool is_whitespace_text(const std::string& s) {
  if (s.empty()) return false;
  for (const auto& ch : utf8_chars(s))
    if (!is_whitespace_symbol(ch)) return false;
  return true;
}

/// A token with its half-open code-point span in the source text.
struct TokenSpan {
  std::string text;
  std::int64_t id = -1;
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const TokenSpan&) const = default;
};

class BpeVocab {
 public:
  BpeVocab() = default;

  BpeVocab(std::vector<std::string> base, std::vector<std::pair<std::string, std::string>> merges,
           std::optional<std::string> unk = std::nullopt)
      : base_(std::move(base)), merges_(std::move(merges)), unk_(std::move(unk)) {
    rebuild();
  }

  static BpeVocab from_json(const nlohmann::json& j) {
    try {
      std::vector<std::string> base = j.at("base").get<std::vector<std::string>>();
      std::vector<std::pair<std::string, std::string>> merges;
      if (j.contains("merges"))
        for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0), m.at(1));
      std::optional<std::string> unk;
      if (j.contains("unk") && !j.at("unk").is_null()) unk = j.at("unk").get<std::string>();
      return BpeVocab(std::move(base), std::move(merges), std::move(unk));
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ParseError, std::string("vocab document: ") + e.what());
    }
  }

  static BpeVocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::IoFailure, "cannot open vocab " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::ParseError, "vocab " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [l, r] : merges_) merges.push_back({l, r});
    nlohmann::json j{{"base", base_}, {"merges", merges}};
    j["unk"] = unk_ ? nlohmann::json(*unk_) : nlohmann::json(nullptr);
    return j;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(Errc::IoFailure, "cannot write vocab " + path.string());
    out << to_json().dump(2) << '\n';
  }

  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<std::string>& base() const { return base_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const std::optional<std::string>& unk() const { return unk_; }

  std::optional<std::int64_t> id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& token_of(std::int64_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      fail(Errc::UnknownToken, "token id " + std::to_string(id));
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::optional<std::int64_t> unk_id() const { return unk_ ? id_of(*unk_) : std::nullopt; }

  /// Rank of merging (left, right), or nullopt when the pair is not ranked.
  std::optional<std::size_t> rank(const std::string& left, const std::string& right) const {
    auto it = ranks_.find(left + '\x00' + right);
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const BpeVocab& o) const {
    return base_ == o.base_ && merges_ == o.merges_ && unk_ == o.unk_;
  }

 private:
  void add_token(const std::string& t) {
    if (token_to_id_.count(t)) return;
    token_to_id_.emplace(t, static_cast<std::int64_t>(id_to_token_.size()));
    id_to_token_.push_back(t);
  }

  void rebuild() {
    token_to_id_.clear();
    id_to_token_.clear();
    ranks_.clear();
    for (const auto& b : base_) add_token(b);
    if (unk_) add_token(*unk_);
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rr] = merges_[r];
      // First occurrence of a pair keeps its rank.
      ranks_.emplace(l + '\x00' + rr, r);
      add_token(l + rr);
    }
  }

  std::vector<std::string> base_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::optional<std::string> unk_;
  std::unordered_map<std::string, std::int64_t> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

namespace detail {

struct Symbol {
  std::string text;
  std::size_t begin;
  std::size_t end;
};

inline void merge_piece(const BpeVocab& vocab, std::vector<Symbol>& syms) {
  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto r = vocab.rank(syms[i].text, syms[i + 1].text);
      if (r && *r < best_rank) {
        best_rank = *r;
        best_pos = i;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    syms[best_pos].text += syms[best_pos + 1].text;
    syms[best_pos].end = syms[best_pos + 1].end;
    syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
}

}  // namespace detail

/// Tokenizes `text`. When `lenient` is set, symbols that are neither base
/// symbols nor covered by an unknown symbol come back with id -1 instead of
/// throwing UnrepresentableInput.
inline std::vector<TokenSpan> tokenize(const std::string& text, const BpeVocab& vocab,
                                       bool lenient = false) {
  const auto chars = utf8_chars(text);
  std::vector<TokenSpan> out;
  auto resolve = [&](const std::string& sym, std::size_t pos) -> std::int64_t {
    if (auto id = vocab.id_of(sym)) return *id;
    if (auto unk = vocab.unk_id()) return *unk;
    if (lenient) return -1;
    fail(Errc::UnrepresentableInput,
         "character '" + sym + "' at position " + std::to_string(pos) + " is not in the vocabulary");
  };

  std::size_t i = 0;
  while (i < chars.size()) {
    if (is_whitespace_symbol(chars[i])) {
      out.push_back({chars[i], resolve(chars[i], i), i, i + 1});
      ++i;
      continue;
    }
    std::vector<detail::Symbol> syms;
    std::size_t j = i;
    for (; j < chars.size() && !is_whitespace_symbol(chars[j]); ++j) {
      resolve(chars[j], j);
      syms.push_back({chars[j], j, j + 1});
    }
    detail::merge_piece(vocab, syms);
    for (auto& s : syms) {
      auto id = vocab.id_of(s.text);
      out.push_back({s.text, id ? *id : resolve(s.text, s.begin), s.begin, s.end});
    }
    i = j;
  }
  return out;
}

}  // namespace tokenforge
