#pragma once

// Evaluation protocols: cosine similarity maps, zero-shot foreground via the
// space prompt, segmentation IoU / F-score, retrieval mAP, normalized edit
// distance, and a logistic linear probe on frozen features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tokenforge/bpe.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/tensorcore.hpp"

namespace tokenforge {

struct SimilarityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> scores;

  SimilarityMap() = default;
  SimilarityMap(std::size_t h, std::size_t w) : height(h), width(w), scores(h * w, 0.0) {}

  double at(std::size_t y, std::size_t x) const { return scores[y * width + x]; }
  double max() const { return scores.empty() ? 0.0 : *std::max_element(scores.begin(), scores.end()); }
};

/// Per-cell cosine against e; zero-norm cells score 0.
template <typename T>
SimilarityMap similarity_map(const FeatureGrid<T>& grid, std::span<const T> e) {
  if (e.size() != grid.dim) fail(Errc::DimensionMismatch, "similarity_map: query dim != grid dim");
  const double ne = l2_norm(e);
  if (!(ne > 0)) fail(Errc::ZeroNorm, "similarity_map: zero-norm query");
  SimilarityMap map(grid.height, grid.width);
  for (std::size_t i = 0; i < grid.height * grid.width; ++i) {
    const T* f = grid.data.data() + i * grid.dim;
    double d = 0, nf = 0;
    for (std::size_t c = 0; c < grid.dim; ++c) {
      d += static_cast<double>(f[c]) * static_cast<double>(e[c]);
      nf += static_cast<double>(f[c]) * static_cast<double>(f[c]);
    }
    nf = std::sqrt(nf);
    map.scores[i] = nf > 0 ? std::clamp(d / (nf * ne), -1.0, 1.0) : 0.0;
  }
  return map;
}

/// Min-max to [0, 1]; a constant map becomes all 0.5.
inline SimilarityMap minmax_normalize(const SimilarityMap& map) {
  SimilarityMap out = map;
  if (map.scores.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
  const double a = *lo, range = *hi - *lo;
  for (auto& v : out.scores) v = range > 0 ? (v - a) / range : 0.5;
  return out;
}

/// Foreground = 1 - minmax(similarity to the space embedding).
template <typename T>
SimilarityMap zero_shot_foreground(const FeatureGrid<T>& grid, std::span<const T> space_embedding) {
  SimilarityMap s = minmax_normalize(similarity_map(grid, space_embedding));
  for (auto& v : s.scores) v = 1.0 - v;
  return s;
}

/// Bilinear upsampling of a map to (h, w), then >= threshold.
inline BinaryMask segment_map(const SimilarityMap& map, std::size_t h, std::size_t w,
                              double threshold = 0.5) {
  FeatureGrid<double> g(map.height, map.width, 1);
  g.data = map.scores;
  const auto up = bilinear_resize(g, h, w);
  BinaryMask out(h, w);
  for (std::size_t i = 0; i < h * w; ++i)
    if (up.data[i] >= threshold) out.bits[i] = 1;
  return out;
}

/// |a & b| / |a | b|; two empty masks score 1.
inline double fg_iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    fail(Errc::DimensionMismatch, "fg_iou: mask dims differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += pred.bits[i] && gt.bits[i];
    uni += pred.bits[i] || gt.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Harmonic mean of pixel precision and recall; two empty masks score 1.
inline double fg_fscore(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    fail(Errc::DimensionMismatch, "fg_fscore: mask dims differ");
  std::size_t tp = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    tp += pred.bits[i] && gt.bits[i];
    np += pred.bits[i] != 0;
    ng += gt.bits[i] != 0;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(np + ng);
}

// ---------------------------------------------------------------------------

struct EvalReport {
  std::string metric;
  double value = 0;
  nlohmann::json items = nlohmann::json::array();

  nlohmann::json to_json() const { return {{"metric", metric}, {"value", value}, {"items", items}}; }
};

/// Mean precision@rank over the relevant hits, ranking by score descending
/// with ties broken by gallery index.
inline double average_precision(std::span<const double> scores, const std::vector<bool>& relevant) {
  if (scores.size() != relevant.size())
    fail(Errc::DimensionMismatch, "average_precision: scores and relevance differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank)
    if (relevant[order[rank]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  if (hits == 0) fail(Errc::UndefinedAP, "query has no relevant gallery item");
  return sum / static_cast<double>(hits);
}

/// Affine rescoring learned by the linear probe (identity by default).
struct ScoreAffine {
  double scale = 1.0;
  double bias = 0.0;
};

/// Image score = max cell of the similarity map after the affine; items
/// record the per-query AP and the gallery items scoring above `threshold`.
template <typename T>
EvalReport retrieval_score_and_map(const std::vector<std::vector<T>>& queries,
                                   const std::vector<FeatureGrid<T>>& gallery,
                                   const std::vector<std::vector<bool>>& relevance,
                                   ScoreAffine affine = {}, double threshold = 0.5) {
  if (relevance.size() != queries.size())
    fail(Errc::DimensionMismatch, "relevance rows != number of queries");
  EvalReport report{"mAP", 0.0, nlohmann::json::array()};
  if (queries.empty()) fail(Errc::EmptyBatch, "no retrieval queries");
  double total = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (relevance[q].size() != gallery.size())
      fail(Errc::DimensionMismatch, "relevance columns != gallery size");
    std::vector<double> scores(gallery.size());
    nlohmann::json above = nlohmann::json::array();
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      SimilarityMap m = similarity_map(gallery[g], std::span<const T>(queries[q]));
      for (auto& v : m.scores) v = affine.scale * v + affine.bias;
      scores[g] = m.max();
      if (scores[g] > threshold) above.push_back(g);
    }
    const double ap = average_precision(scores, relevance[q]);
    total += ap;
    report.items.push_back({{"query", q}, {"ap", ap}, {"scores", scores}, {"above_threshold", above}});
  }
  report.value = total / static_cast<double>(queries.size());
  return report;
}

// ---------------------------------------------------------------------------

struct EditDistance {
  std::size_t raw = 0;
  double normalized = 0;
};

/// Levenshtein distance over Unicode code points with unit costs.
inline EditDistance edit_distance(const std::string& pred, const std::string& gt) {
  const auto a = utf8_chars(pred), b = utf8_chars(gt);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  const std::size_t len = std::max(a.size(), b.size());
  EditDistance d;
  d.raw = prev[b.size()];
  d.normalized = len == 0 ? 0.0 : static_cast<double>(d.raw) / static_cast<double>(len);
  return d;
}

// ---------------------------------------------------------------------------

struct LinearProbe {
  std::vector<double> weights;
  double bias = 0;

  double logit(std::span<const double> x) const {
    double z = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) z += weights[i] * x[i];
    return z;
  }
  double probability(std::span<const double> x) const { return 1.0 / (1.0 + std::exp(-logit(x))); }
  int predict(std::span<const double> x) const { return logit(x) > 0 ? 1 : 0; }
};

/// Full-batch gradient descent on the mean logistic loss. The seed sets the
/// small random initial weights.
inline LinearProbe linear_probe_train(const std::vector<std::vector<double>>& features,
                                      const std::vector<int>& labels, std::size_t epochs,
                                      double lr, std::uint64_t seed = 0) {
  if (features.size() != labels.size() || features.empty())
    fail(Errc::DimensionMismatch, "linear_probe_train: features and labels differ in count");
  const std::size_t dim = features[0].size();
  bool has0 = false, has1 = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (features[i].size() != dim) fail(Errc::DimensionMismatch, "ragged feature vectors");
    if (labels[i] != 0 && labels[i] != 1) fail(Errc::InvalidArgument, "labels must be 0 or 1");
    (labels[i] ? has1 : has0) = true;
  }
  if (!has0 || !has1) fail(Errc::DegenerateLabels, "linear probe needs both classes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> init(0.0, 0.01);
  LinearProbe probe;
  probe.weights.resize(dim);
  for (auto& w : probe.weights) w = init(rng);
  const double inv_n = 1.0 / static_cast<double>(features.size());
  std::vector<double> gw(dim);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      const double r = probe.probability(features[i]) - labels[i];
      for (std::size_t c = 0; c < dim; ++c) gw[c] += r * features[i][c];
      gb += r;
    }
    for (std::size_t c = 0; c < dim; ++c) probe.weights[c] -= lr * gw[c] * inv_n;
    probe.bias -= lr * gb * inv_n;
  }
  return probe;
}

/// Probability that a random positive outscores a random negative; ties
/// count one half.
inline double ranking_auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) fail(Errc::EmptyBatch, "AUC needs both pair kinds");
  std::vector<double> neg(negatives.begin(), negatives.end());
  std::sort(neg.begin(), neg.end());
  double wins = 0;
  for (double p : positives) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(positives.size()) * static_cast<double>(neg.size()));
}

}  // namespace tokenforge
