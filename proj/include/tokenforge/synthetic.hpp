#pragma once

// Seeded glyph corpus for desk-scale training and acceptance runs.
//
// Each glyph class is a random 6x6 bit pattern drawn 2x as a 12x12 block in
// one cell of a 16px grid, at a random even offset inside the cell. A class
// is spelled by two characters (its left and right halves) that BPE merges
// into one token, so the token mask is the union of the two half masks:
// exactly the glyph's dark pixels. Answers list the glyph tokens in reading
// order, separated by spaces.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "tokenforge/bpe.hpp"
#include "tokenforge/corpus.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/image_io.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

struct SyntheticCorpusSpec {
  std::size_t image_side = 64;
  std::size_t glyph_classes = 8;
  std::size_t glyphs_per_image = 3;
  double noise = 0.0;  // uniform pixel noise amplitude as a fraction of 255
  std::size_t records = 200;
  std::uint64_t seed = 0;
  std::size_t cell = 16;  // grid cell holding one glyph
  std::size_t first_record = 0;  // index offset for stems and per-record seeds
  bool jitter = true;  // random even offset of each glyph inside its cell
};

struct GlyphPattern {
  static constexpr std::size_t kSide = 6;
  static constexpr std::size_t kScale = 2;
  std::array<std::uint8_t, kSide * kSide> bits{};

  bool at(std::size_t y, std::size_t x) const { return bits[y * kSide + x] != 0; }
};

struct SyntheticCorpus {
  BpeVocab vocab;
  std::vector<GlyphPattern> glyphs;
  std::vector<std::string> glyph_tokens;  // token text per class
  std::vector<TokenRecord> records;
};

/// Characters spelling class g: letters a..z then A..Z, two per class.
inline std::pair<std::string, std::string> glyph_chars(std::size_t g) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
  if (2 * g + 1 >= alphabet.size()) fail(Errc::SpecError, "too many glyph classes");
  return {alphabet.substr(2 * g, 1), alphabet.substr(2 * g + 1, 1)};
}

/// Space, the 2 * classes half characters, and one merge per class.
inline BpeVocab synthetic_vocab(std::size_t classes) {
  std::vector<std::string> base{" "};
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t g = 0; g < classes; ++g) {
    auto [l, r] = glyph_chars(g);
    base.push_back(l);
    base.push_back(r);
    merges.emplace_back(l, r);
  }
  return BpeVocab(std::move(base), std::move(merges));
}

/// Distinct patterns with ~2/3 fill and both halves non-empty.
inline std::vector<GlyphPattern> synthetic_glyphs(std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x676c797068ull);
  std::bernoulli_distribution on(2.0 / 3.0);
  std::vector<GlyphPattern> out;
  while (out.size() < classes) {
    GlyphPattern p;
    for (auto& b : p.bits) b = on(rng) ? 1 : 0;
    std::size_t left = 0, right = 0;
    for (std::size_t y = 0; y < GlyphPattern::kSide; ++y)
      for (std::size_t x = 0; x < GlyphPattern::kSide; ++x)
        (x < GlyphPattern::kSide / 2 ? left : right) += p.at(y, x);
    if (left == 0 || right == 0) continue;
    if (std::any_of(out.begin(), out.end(), [&](const GlyphPattern& q) { return q.bits == p.bits; }))
      continue;
    out.push_back(p);
  }
  return out;
}

inline void check_spec(const SyntheticCorpusSpec& spec) {
  const std::size_t glyph_px = GlyphPattern::kSide * GlyphPattern::kScale;
  if (spec.cell < glyph_px || spec.image_side < spec.cell)
    fail(Errc::SpecError, "cell must hold a 12px glyph and fit in the image");
  const std::size_t per_side = spec.image_side / spec.cell;
  const std::size_t capacity = per_side * per_side;
  if (spec.glyph_classes == 0) fail(Errc::SpecError, "need at least one glyph class");
  if (spec.glyphs_per_image > capacity)
    fail(Errc::SpecError, std::to_string(spec.glyphs_per_image) + " glyphs per image exceed grid capacity " +
                              std::to_string(capacity));
  if (spec.glyphs_per_image > spec.glyph_classes)
    fail(Errc::SpecError, "glyphs per image exceed the number of distinct classes");
  if (spec.noise < 0 || spec.noise > 1) fail(Errc::SpecError, "noise must be in [0, 1]");
}

inline TokenRecord synthetic_record(const SyntheticCorpusSpec& spec, const BpeVocab& vocab,
                                    const std::vector<GlyphPattern>& glyphs, std::size_t index) {
  const std::size_t side = spec.image_side, per_side = side / spec.cell;
  const std::size_t glyph_px = GlyphPattern::kSide * GlyphPattern::kScale;
  const std::size_t slack = spec.cell - glyph_px;
  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ull + index + 1);

  std::vector<std::size_t> cells(per_side * per_side), classes(spec.glyph_classes);
  std::iota(cells.begin(), cells.end(), 0);
  std::iota(classes.begin(), classes.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);
  std::shuffle(classes.begin(), classes.end(), rng);
  cells.resize(spec.glyphs_per_image);
  classes.resize(spec.glyphs_per_image);
  std::sort(cells.begin(), cells.end());  // reading order

  RgbImage image(side, side);
  std::uniform_real_distribution<double> jitter(-spec.noise * 255.0, spec.noise * 255.0);
  auto shade = [&](double base) {
    return static_cast<std::uint8_t>(std::clamp(base + (spec.noise > 0 ? jitter(rng) : 0.0), 0.0, 255.0));
  };
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      auto* px = image.px(y, x);
      px[0] = px[1] = px[2] = shade(235.0);
    }

  std::uniform_int_distribution<std::size_t> shift(0, slack / 2);
  std::string answer;
  std::vector<CharMask> char_masks;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0) answer += ' ';
    const auto [l, r] = glyph_chars(classes[i]);
    const std::size_t char_left = utf8_chars(answer).size();
    answer += l + r;
    BinaryMask left(side, side), right(side, side);
    const std::size_t dy = spec.jitter ? 2 * shift(rng) : (slack / 2) & ~std::size_t(1);
    const std::size_t dx = spec.jitter ? 2 * shift(rng) : (slack / 2) & ~std::size_t(1);
    const std::size_t oy = (cells[i] / per_side) * spec.cell + dy;
    const std::size_t ox = (cells[i] % per_side) * spec.cell + dx;
    const auto& g = glyphs[classes[i]];
    for (std::size_t y = 0; y < glyph_px; ++y)
      for (std::size_t x = 0; x < glyph_px; ++x) {
        const std::size_t gy = y / GlyphPattern::kScale, gx = x / GlyphPattern::kScale;
        if (!g.at(gy, gx)) continue;
        (gx < GlyphPattern::kSide / 2 ? left : right).set(oy + y, ox + x, true);
        auto* px = image.px(oy + y, ox + x);
        px[0] = px[1] = px[2] = shade(25.0);
      }
    char_masks.push_back({char_left, std::move(left)});
    char_masks.push_back({char_left + 1, std::move(right)});
  }

  const auto spans = tokenize(answer, vocab);
  auto pairs = build_token_masks(spans, char_masks, side, side);
  char stem[32];
  std::snprintf(stem, sizeof stem, "syn_%06zu", index);
  auto assembly = encode_record(image, "Recognizing full text.", answer, std::move(pairs), stem);
  assembly.record.image_type = "synthetic";
  return std::move(assembly.record);
}

/// Deterministic per seed; records are independent of `records` so a larger
/// corpus extends a smaller one with the same seed.
inline SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  check_spec(spec);
  SyntheticCorpus corpus;
  corpus.vocab = synthetic_vocab(spec.glyph_classes);
  corpus.glyphs = synthetic_glyphs(spec.glyph_classes, spec.seed);
  for (std::size_t g = 0; g < spec.glyph_classes; ++g) {
    auto [l, r] = glyph_chars(g);
    corpus.glyph_tokens.push_back(l + r);
  }
  corpus.records.reserve(spec.records);
  for (std::size_t i = 0; i < spec.records; ++i)
    corpus.records.push_back(synthetic_record(spec, corpus.vocab, corpus.glyphs, spec.first_record + i));
  return corpus;
}

/// Union of all token masks in a record (the rendered foreground).
inline BinaryMask foreground_mask(const TokenRecord& r) {
  BinaryMask m(r.mask.height, r.mask.width);
  for (std::size_t i = 0; i < r.mask.values.size(); ++i) m.bits[i] = r.mask.values[i] != 0;
  return m;
}

}  // namespace tokenforge
