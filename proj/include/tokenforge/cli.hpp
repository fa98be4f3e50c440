#pragma once

// The `tokenforge` command line. cli_dispatch parses arguments, routes to the
// corpus, train, eval, serve and demo-data handlers and maps failures to exit
// codes: 0 success, 1 domain error, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tokenforge/bpe.hpp"
#include "tokenforge/checkpoint.hpp"
#include "tokenforge/corpus.hpp"
#include "tokenforge/error.hpp"
#include "tokenforge/evalkit.hpp"
#include "tokenforge/service.hpp"
#include "tokenforge/synthetic.hpp"
#include "tokenforge/trainer.hpp"

namespace tokenforge {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitDomain = 1, kExitUsage = 2 };

namespace cli {

inline void emit_json(const nlohmann::json& doc, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << doc.dump(2) << '\n';
    return;
  }
  std::ofstream f(out_path, std::ios::trunc);
  if (!f) fail(Errc::IoFailure, "cannot write " + out_path);
  f << doc.dump(2) << '\n';
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::IoFailure, "cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// Corpus vocabulary: vocab.json in the corpus directory.
inline BpeVocab corpus_vocab(const fs::path& dir) {
  const fs::path p = dir / "vocab.json";
  if (!fs::exists(p)) fail(Errc::MissingField, dir.string() + " has no vocab.json");
  return BpeVocab::load(p);
}

/// Loads a checkpoint, taking the vocabulary from it or else from the corpus.
inline std::pair<ModelParams<double>, BpeVocab> model_and_vocab(const fs::path& ckpt,
                                                                const fs::path& corpus_dir) {
  auto bundle = load_checkpoint_bundle<double>(ckpt);
  BpeVocab vocab = bundle.vocab ? std::move(*bundle.vocab) : corpus_vocab(corpus_dir);
  return {std::move(bundle.params), std::move(vocab)};
}

// ---------------------------------------------------------------------------

inline int corpus_build(const std::string& chars, const std::string& out_dir,
                        const std::string& vocab_path, std::size_t select, std::uint64_t seed,
                        std::ostream& out) {
  const BpeVocab vocab = BpeVocab::load(vocab_path);
  const auto summary = build_corpus(chars, out_dir, vocab, {select, seed});
  emit_json({{"records", summary.records}, {"warnings", summary.warnings}}, "", out);
  return kExitOk;
}

inline int corpus_validate(const std::string& dir, std::ostream& out) {
  const auto files = list_record_files(dir);
  if (files.empty()) fail(Errc::EmptyCorpus, dir + " holds no records");
  std::optional<BpeVocab> vocab;
  if (fs::exists(fs::path(dir) / "vocab.json")) vocab = corpus_vocab(dir);
  nlohmann::json violations = nlohmann::json::array(), warnings = nlohmann::json::array();
  for (const auto& f : files) {
    const auto rep = validate_record(load_record(f), vocab ? &*vocab : nullptr);
    for (const auto& v : rep.violations)
      violations.push_back({{"record", f.filename().string()}, {"kind", v.kind}, {"detail", v.detail}});
    for (const auto& w : rep.warnings)
      warnings.push_back({{"record", f.filename().string()}, {"kind", w.kind}, {"detail", w.detail}});
  }
  emit_json({{"records", files.size()}, {"violations", violations}, {"warnings", warnings}}, "", out);
  return violations.empty() ? kExitOk : kExitDomain;
}

inline int corpus_stats_cmd(const std::string& dir, std::size_t top_k, std::ostream& out) {
  emit_json(corpus_stats(load_corpus(dir), top_k).to_json(), "", out);
  return kExitOk;
}

inline int corpus_render(const std::string& record, const std::string& png, std::ostream& out) {
  const auto overlay = render_overlay(load_record(record));
  write_file_bytes(png, overlay.png());
  out << png << '\n';
  return kExitOk;
}

inline int train_cmd(const std::string& config, const std::string& corpus_dir,
                     const std::string& out_dir, std::ostream& out) {
  const TrainConfig cfg = TrainConfig::load(config);
  const auto records = load_corpus(corpus_dir);
  const BpeVocab vocab = corpus_vocab(corpus_dir);
  fs::create_directories(out_dir);
  const auto res = train<float>(cfg, records, vocab, out_dir);
  const double last = res.metrics.empty() ? 0.0 : res.metrics.back().loss;
  emit_json({{"steps", res.metrics.size()},
             {"final_loss", last},
             {"best_loss", res.best_loss},
             {"out", out_dir}},
            "", out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

/// Token mode: each labelled token's thresholded similarity map against its
/// mask. Space mode: the negated space-prompt map against the record's
/// whole foreground.
inline int eval_seg(const std::string& ckpt, const std::string& corpus_dir, double threshold,
                    const std::string& mode, const std::string& out_path, std::ostream& out) {
  const auto records = load_corpus(corpus_dir);
  const auto [params, vocab] = model_and_vocab(ckpt, corpus_dir);
  EvalReport report;
  if (mode == "token") {
    const auto ev = evaluate_alignment(params, records, vocab, PoolMode::Threshold, threshold);
    report = {"fg_iou", ev.mean_fg_iou, ev.items};
  } else {
    const auto space = vocab.id_of(" ");
    if (!space) fail(Errc::UnknownToken, "vocabulary has no space token");
    double total = 0;
    report.metric = "fg_iou_space";
    for (const auto& r : records) {
      const auto F = visual_forward(image_to_grid<double>(r.image), params);
      const auto fg = zero_shot_foreground(F, token_embedding(params, *space));
      const BinaryMask gt = foreground_mask(r);
      const double iou = fg_iou(segment_map(fg, gt.height, gt.width, threshold), gt);
      total += iou;
      report.items.push_back({{"record", r.image_path}, {"fg_iou", iou}});
    }
    report.value = total / static_cast<double>(records.size());
  }
  emit_json(report.to_json(), out_path, out);
  return kExitOk;
}

/// Queries are token texts (all distinct non-space answer tokens by default).
/// A query's vector is the mean embedding of its tokens; a record is relevant
/// when its answer contains every one of them.
inline int eval_retrieval(const std::string& ckpt, const std::string& corpus_dir,
                          const std::vector<std::string>& query_texts, bool probe,
                          const std::string& out_path, std::ostream& out) {
  const auto records = load_corpus(corpus_dir);
  const auto [params, vocab] = model_and_vocab(ckpt, corpus_dir);
  std::vector<std::string> texts = query_texts;
  if (texts.empty()) {
    std::set<std::string> seen;
    for (const auto& r : records)
      for (const auto& e : r.entries)
        if (!is_whitespace_text(e.text)) seen.insert(e.text);
    texts.assign(seen.begin(), seen.end());
  }
  std::vector<std::set<std::int64_t>> record_ids;
  for (const auto& r : records) {
    std::set<std::int64_t> ids;
    for (const auto& s : tokenize(r.answer, vocab, true)) ids.insert(s.id);
    record_ids.push_back(std::move(ids));
  }
  std::vector<std::vector<double>> queries;
  std::vector<std::vector<bool>> relevance;
  for (const auto& text : texts) {
    std::vector<double> q(params.config.embed_dim, 0.0);
    std::vector<std::int64_t> ids;
    for (const auto& s : tokenize(text, vocab)) {
      if (is_whitespace_text(s.text)) continue;
      ids.push_back(s.id);
      const auto e = token_embedding(params, s.id);
      for (std::size_t c = 0; c < q.size(); ++c) q[c] += e[c];
    }
    if (ids.empty()) fail(Errc::InvalidArgument, "query '" + text + "' has no non-space token");
    queries.push_back(std::move(q));
    std::vector<bool> rel;
    for (const auto& have : record_ids)
      rel.push_back(std::all_of(ids.begin(), ids.end(), [&](auto id) { return have.count(id) > 0; }));
    relevance.push_back(std::move(rel));
  }
  std::vector<FeatureGrid<double>> gallery;
  for (const auto& r : records) gallery.push_back(visual_forward(image_to_grid<double>(r.image), params));

  ScoreAffine affine;
  if (probe) {
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    for (std::size_t q = 0; q < queries.size(); ++q)
      for (std::size_t g = 0; g < gallery.size(); ++g) {
        feats.push_back({similarity_map(gallery[g], std::span<const double>(queries[q])).max()});
        labels.push_back(relevance[q][g] ? 1 : 0);
      }
    const auto lp = linear_probe_train(feats, labels, 500, 1.0, 0);
    affine = {lp.weights[0], lp.bias};
  }
  auto report = retrieval_score_and_map(queries, gallery, relevance, affine);
  for (std::size_t q = 0; q < texts.size(); ++q) report.items[q]["text"] = texts[q];
  emit_json(report.to_json(), out_path, out);
  return kExitOk;
}

/// Line i of --pred is compared with line i of --gt.
inline int eval_edit(const std::string& pred_path, const std::string& gt_path,
                     const std::string& out_path, std::ostream& out) {
  const auto pred = read_lines(pred_path), gt = read_lines(gt_path);
  if (pred.size() != gt.size())
    fail(Errc::DimensionMismatch, std::to_string(pred.size()) + " prediction lines vs " +
                                      std::to_string(gt.size()) + " ground-truth lines");
  EvalReport report{"normalized_edit_distance", 0.0, nlohmann::json::array()};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto d = edit_distance(pred[i], gt[i]);
    report.value += d.normalized;
    report.items.push_back({{"line", i}, {"pred", pred[i]}, {"gt", gt[i]},
                            {"raw", d.raw}, {"normalized", d.normalized}});
  }
  if (!pred.empty()) report.value /= static_cast<double>(pred.size());
  emit_json(report.to_json(), out_path, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

inline int serve_cmd(std::string checkpoint, std::string host, int port, const std::string& static_dir,
                     std::ostream& err) {
  if (checkpoint.empty())
    if (const char* env = std::getenv("CHECKPOINT_PATH")) checkpoint = env;
  if (checkpoint.empty()) fail(Errc::MissingField, "no checkpoint (use --checkpoint or CHECKPOINT_PATH)");
  if (port < 0)
    if (const char* env = std::getenv("PORT")) port = std::atoi(env);
  if (port <= 0) port = 8080;
  QueryEngine engine(load_served_model(checkpoint));
  httplib::Server server;
  install_routes(server, engine);
  if (!static_dir.empty() && !server.set_mount_point("/", static_dir))
    fail(Errc::IoFailure, "cannot serve static files from " + static_dir);
  err << "serving " << engine.checkpoint_id() << " on " << host << ":" << port << std::endl;
  if (!server.listen(host, port)) fail(Errc::IoFailure, "cannot listen on port " + std::to_string(port));
  return kExitOk;
}

/// Synthetic glyph corpus, a bundled demo image and (unless steps == 0) a
/// small checkpoint trained on that corpus.
inline int demo_data(const std::string& out_dir, std::size_t records, std::uint64_t seed,
                     std::size_t steps, std::ostream& out) {
  SyntheticCorpusSpec spec;
  spec.records = records;
  spec.seed = seed;
  const auto corpus = generate_synthetic_corpus(spec);
  const fs::path root(out_dir), cdir = root / "corpus";
  fs::create_directories(cdir);
  for (const auto& r : corpus.records) save_record(r, cdir);
  corpus.vocab.save(cdir / "vocab.json");
  write_file_bytes(root / "demo.png", encode_rgb_png(corpus.records.front().image));
  nlohmann::json summary = {{"records", corpus.records.size()},
                            {"corpus", cdir.string()},
                            {"image", (root / "demo.png").string()},
                            {"glyph_tokens", corpus.glyph_tokens}};
  if (steps > 0) {
    const auto res = train<float>(glyph_train_config(steps, seed), corpus.records, corpus.vocab);
    save_checkpoint(res.params, root / "demo.ckpt", &corpus.vocab, {{"stage", "Pretrain"}});
    summary["checkpoint"] = (root / "demo.ckpt").string();
  }
  emit_json(summary, "", out);
  return kExitOk;
}

}  // namespace cli

/// Runs one command line (args exclude the program name).
inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  CLI::App app{"Token-level image/text alignment toolkit", "tokenforge"};
  app.require_subcommand(1);

  auto* corpus = app.add_subcommand("corpus", "Build, validate, summarize and render token-mask records");
  corpus->require_subcommand(1);
  std::string chars, out_dir, vocab, dir, record, png;
  std::size_t select = 0, top_k = 100;
  std::uint64_t seed = 0;
  auto* build = corpus->add_subcommand("build", "Build records from character-mask documents");
  build->add_option("--chars", chars, "Directory of character-mask documents")->required();
  build->add_option("--out", out_dir, "Output corpus directory")->required();
  build->add_option("--vocab", vocab, "Vocabulary JSON")->required();
  build->add_option("--select", select, "Tokens kept per record (0 keeps all)");
  build->add_option("--seed", seed, "Token selection seed");
  auto* validate = corpus->add_subcommand("validate", "Check every record of a corpus");
  validate->add_option("dir", dir, "Corpus directory")->required();
  auto* stats = corpus->add_subcommand("stats", "Corpus statistics as JSON");
  stats->add_option("dir", dir, "Corpus directory")->required();
  stats->add_option("--top-k", top_k, "Most frequent tokens to list");
  auto* render = corpus->add_subcommand("render", "Overlay a record's token masks on its image");
  render->add_option("record", record, "Record metadata JSON")->required();
  render->add_option("--out", png, "Output PNG")->required();

  auto* train_sc = app.add_subcommand("train", "Train on a corpus from a key = value config");
  std::string config, corpus_dir;
  train_sc->add_option("--config", config, "Config file")->required();
  train_sc->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train_sc->add_option("--out", out_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluation reports as JSON {metric, value, items}");
  eval->require_subcommand(1);
  std::string ckpt, report_out, mode = "token", pred, gt;
  double threshold = 0.5;
  std::vector<std::string> queries;
  bool probe = false;
  auto* seg = eval->add_subcommand("seg", "Zero-shot segmentation fgIoU");
  seg->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  seg->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  seg->add_option("--threshold", threshold, "Binarization threshold")->check(CLI::Range(0.0, 1.0));
  seg->add_option("--mode", mode, "token or space")->check(CLI::IsMember({"token", "space"}));
  seg->add_option("--out", report_out, "Write the report here instead of stdout");
  auto* retrieval = eval->add_subcommand("retrieval", "Text-to-image retrieval mAP");
  retrieval->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  retrieval->add_option("--corpus", corpus_dir, "Corpus directory (the gallery)")->required();
  retrieval->add_option("--query", queries, "Query text (repeatable; default: every answer token)");
  retrieval->add_flag("--probe", probe, "Rescore with a linear probe fitted on the gallery");
  retrieval->add_option("--out", report_out, "Write the report here instead of stdout");
  auto* edit = eval->add_subcommand("edit", "Normalized edit distance, line by line");
  edit->add_option("--pred", pred, "Predictions, one per line")->required();
  edit->add_option("--gt", gt, "Ground truth, one per line")->required();
  edit->add_option("--out", report_out, "Write the report here instead of stdout");

  auto* serve = app.add_subcommand("serve", "HTTP query service (env PORT, CHECKPOINT_PATH)");
  std::string host = "0.0.0.0", static_dir;
  int port = -1;
  serve->add_option("--checkpoint", ckpt, "Checkpoint (default $CHECKPOINT_PATH)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (default $PORT or 8080)");
  serve->add_option("--static", static_dir, "Directory of static client files");

  auto* demo = app.add_subcommand("demo-data", "Synthetic glyph corpus, demo image and checkpoint");
  std::size_t records = 64, steps = 300;
  demo->add_option("--out", out_dir, "Output directory")->required();
  demo->add_option("--records", records, "Records to generate")->check(CLI::PositiveNumber);
  demo->add_option("--seed", seed, "Corpus and training seed");
  demo->add_option("--steps", steps, "Training steps for demo.ckpt (0 skips training)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (build->parsed()) return cli::corpus_build(chars, out_dir, vocab, select, seed, out);
    if (validate->parsed()) return cli::corpus_validate(dir, out);
    if (stats->parsed()) return cli::corpus_stats_cmd(dir, top_k, out);
    if (render->parsed()) return cli::corpus_render(record, png, out);
    if (train_sc->parsed()) return cli::train_cmd(config, corpus_dir, out_dir, out);
    if (seg->parsed()) return cli::eval_seg(ckpt, corpus_dir, threshold, mode, report_out, out);
    if (retrieval->parsed()) return cli::eval_retrieval(ckpt, corpus_dir, queries, probe, report_out, out);
    if (edit->parsed()) return cli::eval_edit(pred, gt, report_out, out);
    if (serve->parsed()) return cli::serve_cmd(ckpt, host, port, static_dir, err);
    if (demo->parsed()) return cli::demo_data(out_dir, records, seed, steps, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitDomain;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitDomain;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace tokenforge
