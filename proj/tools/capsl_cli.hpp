#pragma once

// Subcommand front end. dispatch() never calls exit(); it returns 0 on
// success, 1 on usage errors and 2 on data or validation errors.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "capsl/capsl.hpp"

namespace capsl::cli {

namespace fs = std::filesystem;

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline std::vector<int> labels_for(const fs::path& labels_path, const std::vector<std::string>& ids) {
  return io::align_labels(io::read_labels(labels_path), ids);
}

// ---- gen-synth --------------------------------------------------------------

struct GenSynthArgs {
  SyntheticConfig cfg;
  std::optional<std::uint64_t> seed;
  double corrupt_fraction = 0.0;
  std::string out_dir;
};

inline void run_gen_synth(const GenSynthArgs& a, Streams io_) {
  SyntheticConfig cfg = a.cfg;
  cfg.seed = *a.seed;
  const auto ds = gen_synthetic(cfg);
  const fs::path dir = a.out_dir;
  ensure_dir(dir);
  io::write_images(ds.images, dir / "images.img");
  io::write_masks(ds.masks, dir / "masks.msk");
  io::write_captions(ds.captions, dir / "captions.jsonl");
  io::write_labels({ds.images.ids, ds.labels}, dir / "labels.tsv");
  if (a.corrupt_fraction > 0.0) {
    CorruptionConfig cc;
    cc.fraction = a.corrupt_fraction;
    cc.seed = derive_seed(cfg.seed, {0xc0ff});
    io::write_captions(corrupt_captions(ds.captions, ds.labels, ds.vocabulary, cc), dir / "captions_corrupted.jsonl");
  }
  io_.out << "images=" << ds.images.count() << "\nclasses=" << cfg.num_classes << "\n";
}

// ---- embed ------------------------------------------------------------------

inline void run_embed(const std::string& captions, const std::string& out, std::optional<std::string> ids, std::size_t dim,
                      std::uint64_t seed, Streams io_) {
  if (dim == 0) throw ConfigError("--dim must be positive");
  const auto records = io::read_captions(captions);
  EmbedSummary summary;
  const auto m = embed_captions(records, dim, seed, &summary);
  io::write_embeddings(m, out, ids ? fs::path(*ids) : io::sidecar(out));
  io_.out << "rows=" << m.rows() << "\ndim=" << dim << "\nfallbacks=" << summary.fallbacks << "\n";
  if (summary.fallbacks > 0) io_.err << "warning: " << summary.fallbacks << " captions had no tokens and got a fallback embedding\n";
}

// ---- sample-pairs -----------------------------------------------------------

inline void run_sample_pairs(const std::string& embeddings, std::optional<std::string> ids, const std::string& out, std::size_t block,
                             bool no_exclude_self, std::optional<std::string> labels, Streams io_) {
  const auto m = io::read_embeddings(embeddings, ids ? fs::path(*ids) : io::sidecar(embeddings));
  NNQueryConfig cfg;
  cfg.block_size = block;
  cfg.exclude_self = !no_exclude_self;
  const auto manifest = build_pair_manifest(m, cfg);
  io::write_manifest(manifest, out);
  std::unordered_map<std::string, int> label_map;
  if (labels) {
    const auto t = io::read_labels(*labels);
    for (std::size_t i = 0; i < t.ids.size(); ++i) label_map[t.ids[i]] = t.labels[i];
  }
  const auto st = manifest_stats(manifest, labels ? &label_map : nullptr);
  io_.out << "pairs=" << st.pairs << "\nmean_similarity=" << format_value(st.mean_similarity, 6) << "\n";
  if (st.same_class_rate) io_.out << "same_class_rate=" << format_value(*st.same_class_rate, 6) << "\n";
}

// ---- filter-captions --------------------------------------------------------

inline void run_filter(const std::string& in, const std::string& out, std::optional<double> min_score, const std::string& report,
                       Streams io_) {
  const auto records = io::read_captions(in);
  const auto [kept, rep] = filter_captions(records, FilterPolicy{min_score});
  io::write_captions(kept, out);
  std::ostringstream kv;
  kv << "total=" << rep.total << "\nkept_original=" << rep.kept_original << "\nkept_generated=" << rep.kept_generated
     << "\ndropped=" << rep.dropped << "\nthresholded=" << (rep.thresholded ? "true" : "false") << "\n";
  if (rep.min_score) kv << "min_score=" << format_value(*rep.min_score, 6) << "\n";
  io::write_file(report, kv.str());
  io_.out << kv.str();
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config, captions, manifest, pair_source, objective;
  std::string dataset, labels, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool quiet = false;
};

inline void run_train(const TrainArgs& a, Streams io_) {
  nlohmann::json j = nlohmann::json::object();
  if (a.config) {
    try {
      j = nlohmann::json::parse(io::read_file(*a.config));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config '" + *a.config + "': " + e.what());
    }
  }
  TrainConfig cfg = train_config_from_json(j);
  cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.objective) cfg.objective.kind = objective_from_string(*a.objective);
  if (a.pair_source) cfg.pair_source = pair_source_from_string(*a.pair_source);
  if (a.manifest) cfg.manifest_path = *a.manifest;
  if (cfg.objective.kind == ObjectiveKind::simsiam && cfg.encoder.pred_dims.empty())
    cfg.encoder.pred_dims = {cfg.encoder.proj_dims.back(), cfg.encoder.proj_dims.back()};
  const auto images = io::read_images(a.dataset);
  cfg.encoder.input = images.shape;
  validate(cfg);
  const auto labels = labels_for(a.labels, images.ids);
  if (a.captions) {
    const auto caps = io::read_captions(*a.captions);
    const auto index = index_ids(images.ids);
    for (const auto& r : caps)
      if (!index.count(r.id)) throw ValidationError("caption id '" + r.id + "' is not in the dataset");
  }
  std::optional<PairManifest> manifest;
  if (cfg.pair_source == PairSource::manifest) manifest = io::read_manifest(*cfg.manifest_path);

  const auto result = train(cfg, images, labels, manifest ? &*manifest : nullptr, [&](const EpochRecord& r) {
    if (!a.quiet) io_.err << "epoch " << r.epoch << " loss " << format_value(r.train_loss, 6) << " val_acc " << format_value(r.val_acc, 4) << "\n";
  });
  const fs::path dir = a.out_dir;
  ensure_dir(dir);
  write_checkpoint(result.best, dir / "best.ckpt");
  write_checkpoint(result.final, dir / "final.ckpt");
  io::write_file(dir / "history.csv", format_history_csv(result.history));
  io::write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::ostringstream kv;
  kv << "epochs=" << cfg.epochs << "\nbest_epoch=" << result.history.best_epoch << "\ninitial_val_acc="
     << format_value(result.history.initial_val_acc, 6) << "\nbest_val_acc="
     << format_value(result.history.epochs[result.history.best_epoch - 1].val_acc, 6) << "\nfinal_val_acc="
     << format_value(result.history.epochs.back().val_acc, 6) << "\ntotal_steps=" << result.history.total_steps << "\nwarmup_steps="
     << result.history.warmup_steps << "\n";
  io::write_file(dir / "summary.txt", kv.str());
  io_.out << kv.str();
}

// ---- saliency ---------------------------------------------------------------

inline void run_saliency(const std::string& ckpt_path, const std::string& dataset, const std::string& labels_path, const std::string& out,
                         Streams io_) {
  const auto ckpt = read_checkpoint(ckpt_path);
  const auto images = io::read_images(dataset);
  const auto labels = labels_for(labels_path, images.ids);
  const auto maps = saliency_maps(ckpt, images, labels);
  std::size_t zero = 0;
  for (const auto& m : maps) zero += m.all_zero ? 1 : 0;
  io::write_images(maps_to_images(maps, images.ids), out);
  io_.out << "maps=" << maps.size() << "\nall_zero=" << zero << "\n";
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, dataset, labels, out;
  std::optional<std::string> masks, name;
  std::optional<std::uint64_t> seed;
  std::size_t episodes = 200, way = 5, shot = 5, queries = 15;
  double test_fraction = 0.2;
  bool per_image = false;
};

inline void run_eval(const std::string& task, const EvalArgs& a, Streams io_) {
  const auto ckpt = read_checkpoint(a.checkpoint);
  const auto images = io::read_images(a.dataset);
  const auto labels = labels_for(a.labels, images.ids);
  MetricsReport r;
  r.task = task;
  r.corner = "Model";
  r.seed = a.seed;
  const std::string model = a.name.value_or(ckpt.objective);
  r.config.emplace_back("checkpoint", fs::path(a.checkpoint).filename().string());
  r.config.emplace_back("images", std::to_string(images.count()));
  if (task == "linear") {
    const auto feats = checkpoint_features(ckpt, images);
    const auto res = linear_eval(feats, labels, a.test_fraction, *a.seed);
    r.config.emplace_back("test_fraction", format_value(a.test_fraction, 4));
    r.config.emplace_back("converged", res.probe.converged ? "true" : "false");
    r.columns = {"accuracy", "train_accuracy"};
    r.add_row(model, {res.test_accuracy, res.train_accuracy});
    if (!res.probe.converged) io_.err << "warning: linear probe did not converge (gradient norm " << res.probe.grad_norm << ")\n";
  } else if (task == "fewshot") {
    const auto feats = checkpoint_features(ckpt, images);
    const auto res = fewshot_eval(feats, labels, {a.episodes, a.way, a.shot, a.queries, *a.seed});
    r.config.emplace_back("episodes", std::to_string(a.episodes));
    r.config.emplace_back("way", std::to_string(a.way));
    r.config.emplace_back("shot", std::to_string(a.shot));
    r.config.emplace_back("queries", std::to_string(a.queries));
    r.columns = {"accuracy", "stderr"};
    r.add_row(model, {res.mean, res.stderr_});
    for (int c : res.excluded_classes) io_.err << "warning: class " << c << " has too few examples and was excluded\n";
  } else {
    if (!a.masks) throw ConfigError("eval saliency needs --masks");
    const auto masks = io::read_masks(*a.masks);
    if (masks.ids != images.ids) throw ValidationError("mask ids do not match dataset ids");
    const auto maps = saliency_maps(ckpt, images, labels);
    const auto res = saliency_auc(maps, masks, a.per_image ? AucAveraging::per_image : AucAveraging::pooled);
    r.config.emplace_back("averaging", a.per_image ? "per_image" : "pooled");
    r.columns = {"AUC-ROC", "AUC-PR"};
    r.add_row(model, {res.auc_roc, res.auc_pr});
  }
  const auto text = render_report(r);
  io::write_file(a.out, text);
  io_.out << text;
}

// ---- report -----------------------------------------------------------------

// Merges eval reports: one row per model, one column per metric.
inline MetricsReport merge_reports(const std::vector<std::string>& inputs) {
  MetricsReport r;
  r.corner = "Model";
  std::vector<std::string> row_order;
  std::map<std::string, std::map<std::string, double>> values;
  for (const auto& path : inputs) {
    for (const auto& [k, v] : parse_kv(io::read_file(path))) {
      if (k == "task") {
        if (r.task.empty()) r.task = v;
        else if (r.task != v) r.task = "mixed";
        continue;
      }
      if (k == "seed" || k.rfind("config.", 0) == 0) continue;
      const auto dot = k.rfind('.');
      if (dot == std::string::npos) throw FormatError(path + ": unexpected key '" + k + "'");
      const std::string row = k.substr(0, dot), col = k.substr(dot + 1);
      if (col == "Avg") continue;
      double x = 0.0;
      try {
        std::size_t used = 0;
        x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::exception&) {
        throw FormatError(path + ": value of '" + k + "' is not a number");
      }
      if (!values.count(row)) row_order.push_back(row);
      if (std::find(r.columns.begin(), r.columns.end(), col) == r.columns.end()) r.columns.push_back(col);
      values[row][col] = x;
    }
  }
  for (const auto& row : row_order) {
    std::vector<std::optional<double>> line;
    for (const auto& c : r.columns) {
      auto it = values[row].find(c);
      line.push_back(it == values[row].end() ? std::nullopt : std::optional<double>(it->second));
    }
    r.add_row(row, line);
  }
  return r;
}

inline void run_report(const std::vector<std::string>& inputs, const std::string& fixture, const std::string& format, bool average,
                       const std::string& out, Streams io_) {
  MetricsReport r;
  if (!fixture.empty()) {
    if (fixture != "saliency-auc") throw ConfigError("unknown fixture '" + fixture + "'");
    if (!inputs.empty()) throw ConfigError("--fixture and --inputs are exclusive");
    r = saliency_fixture();
  } else {
    if (inputs.empty()) throw ConfigError("report needs --inputs or --fixture");
    r = merge_reports(inputs);
  }
  r.average_column = average;
  const auto text = format == "kv" ? render_kv(r) : render_table(r);
  io::write_file(out, text);
  io_.out << text;
}

// ---- dispatch ---------------------------------------------------------------

inline int dispatch(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Streams io_{out, err};
  CLI::App app{"capsl: language-guided contrastive pair sampling on small image sets", "capsl"};
  app.require_subcommand(1);
  std::size_t threads = thread_count();
  app.add_option("--threads", threads, "Worker threads (output does not depend on this)")->check(CLI::PositiveNumber);

  GenSynthArgs gs;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic labeled image/caption/mask dataset");
  gen->add_option("--classes", gs.cfg.num_classes, "Number of classes")->capture_default_str();
  gen->add_option("--per-class", gs.cfg.per_class, "Images per class")->capture_default_str();
  gen->add_option("--channels", gs.cfg.shape.channels, "Image channels")->capture_default_str();
  gen->add_option("--height", gs.cfg.shape.height, "Image height")->capture_default_str();
  gen->add_option("--width", gs.cfg.shape.width, "Image width")->capture_default_str();
  gen->add_option("--noise", gs.cfg.noise_level, "Scale of per-image nuisance variation")->capture_default_str();
  gen->add_option("--distractors", gs.cfg.distractor_tokens, "Distractor tokens per caption")->capture_default_str();
  gen->add_option("--corrupt-fraction", gs.corrupt_fraction,
                  "Also write captions_corrupted.jsonl with this fraction of cross-class captions and ITM scores")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", gs.seed, "Random seed")->required();
  gen->add_option("--out-dir", gs.out_dir, "Output directory")->required();

  std::string emb_captions, emb_out;
  std::optional<std::string> emb_ids;
  std::size_t emb_dim = 128;
  std::uint64_t emb_seed = 0;
  auto* emb = app.add_subcommand("embed", "Embed captions with the hashed bag-of-words text encoder");
  emb->add_option("--captions", emb_captions, "Captions file (JSONL)")->required();
  emb->add_option("--out", emb_out, "Output embeddings file (EMB1)")->required();
  emb->add_option("--ids", emb_ids, "Output id list (default: <out>.ids)");
  emb->add_option("--dim", emb_dim, "Embedding dimension")->capture_default_str();
  emb->add_option("--seed", emb_seed, "Hashing seed")->capture_default_str();

  std::string sp_emb, sp_out;
  std::optional<std::string> sp_ids, sp_labels;
  std::size_t sp_block = 256;
  bool sp_no_excl = false;
  auto* sp = app.add_subcommand("sample-pairs", "Pair every image with its caption nearest neighbor");
  sp->add_option("--embeddings", sp_emb, "Embeddings file (EMB1)")->required();
  sp->add_option("--ids", sp_ids, "Id list (default: <embeddings>.ids)");
  sp->add_option("--out", sp_out, "Output manifest (JSONL)")->required();
  sp->add_option("--block-size", sp_block, "Query block size")->capture_default_str()->check(CLI::PositiveNumber);
  sp->add_flag("--no-exclude-self", sp_no_excl, "Allow a row to be its own neighbor");
  sp->add_option("--labels", sp_labels, "Labels file; prints the same-class pair rate");

  std::string fc_in, fc_out, fc_report;
  std::optional<double> fc_min;
  auto* fc = app.add_subcommand("filter-captions", "Keep the higher-ITM caption per record");
  fc->add_option("--in", fc_in, "Input captions (JSONL)")->required();
  fc->add_option("--out", fc_out, "Output captions (JSONL)")->required();
  fc->add_option("--min-score", fc_min, "Drop records whose retained score is below this");
  fc->add_option("--report", fc_report, "Key-value report path")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train an encoder with a contrastive or non-contrastive objective");
  tr->add_option("--config", ta.config, "Flat JSON training config");
  tr->add_option("--dataset", ta.dataset, "Image tensor file (IMG1)")->required();
  tr->add_option("--labels", ta.labels, "Labels file (TSV) for the validation probe")->required();
  tr->add_option("--captions", ta.captions, "Captions file; ids are checked against the dataset");
  tr->add_option("--manifest", ta.manifest, "Pair manifest (sets manifest_path)");
  tr->add_option("--pair-source", ta.pair_source, "augment or manifest (overrides config)");
  tr->add_option("--objective", ta.objective, "ntxent, simsiam, nnclr or swav (overrides config)");
  tr->add_option("--epochs", ta.epochs, "Epochs (overrides config)");
  tr->add_option("--seed", ta.seed, "Random seed")->required();
  tr->add_option("--out-dir", ta.out_dir, "Output directory")->required();
  tr->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");

  std::string sal_ckpt, sal_data, sal_labels, sal_out;
  auto* sal = app.add_subcommand("saliency", "Write GradCAM maps for every image (IMG1, one channel)");
  sal->add_option("--checkpoint", sal_ckpt, "Checkpoint file")->required();
  sal->add_option("--dataset", sal_data, "Image tensor file (IMG1)")->required();
  sal->add_option("--labels", sal_labels, "Labels file (TSV); each map targets the image's label")->required();
  sal->add_option("--out", sal_out, "Output map file (IMG1)")->required();

  EvalArgs ea;
  std::string eval_task;
  auto* ev = app.add_subcommand("eval", "Evaluate frozen features: linear, fewshot or saliency");
  ev->add_option("task", eval_task, "linear | fewshot | saliency")->required()->check(CLI::IsMember({"linear", "fewshot", "saliency"}));
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  ev->add_option("--dataset", ea.dataset, "Image tensor file (IMG1)")->required();
  ev->add_option("--labels", ea.labels, "Labels file (TSV)")->required();
  ev->add_option("--masks", ea.masks, "Mask file (MSK1), saliency only");
  ev->add_option("--out", ea.out, "Report path")->required();
  ev->add_option("--seed", ea.seed, "Random seed (linear split, few-shot episodes)");
  ev->add_option("--name", ea.name, "Row name in the report (default: checkpoint objective)");
  ev->add_option("--episodes", ea.episodes, "Few-shot episodes")->capture_default_str();
  ev->add_option("--way", ea.way, "Classes per episode")->capture_default_str();
  ev->add_option("--shot", ea.shot, "Support examples per class")->capture_default_str();
  ev->add_option("--queries", ea.queries, "Query examples per class")->capture_default_str();
  ev->add_option("--test-fraction", ea.test_fraction, "Held-out fraction for the linear probe")->capture_default_str();
  ev->add_flag("--per-image", ea.per_image, "Average AUCs per image instead of pooling pixels");

  std::vector<std::string> rp_inputs;
  std::string rp_fixture, rp_format = "table", rp_out;
  bool rp_avg = false;
  auto* rp = app.add_subcommand("report", "Merge eval reports into one table");
  rp->add_option("--inputs", rp_inputs, "Eval report files");
  rp->add_option("--fixture", rp_fixture, "Render a built-in fixture instead (saliency-auc)");
  rp->add_option("--format", rp_format, "table or kv")->capture_default_str()->check(CLI::IsMember({"table", "kv"}));
  rp->add_flag("--average", rp_avg, "Add an Avg column (mean over each row)");
  rp->add_option("--out", rp_out, "Output path")->required();

  std::vector<std::string> reversed(argv.rbegin(), argv.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    if (const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) err << sub->help();
    return 1;
  }
  if (ev->parsed() && eval_task != "saliency" && !ea.seed) {
    err << "error: --seed is required for eval " << eval_task << "\n";
    return 1;
  }
  set_thread_count(threads);
  try {
    if (gen->parsed()) run_gen_synth(gs, io_);
    else if (emb->parsed()) run_embed(emb_captions, emb_out, emb_ids, emb_dim, emb_seed, io_);
    else if (sp->parsed()) run_sample_pairs(sp_emb, sp_ids, sp_out, sp_block, sp_no_excl, sp_labels, io_);
    else if (fc->parsed()) run_filter(fc_in, fc_out, fc_min, fc_report, io_);
    else if (tr->parsed()) run_train(ta, io_);
    else if (sal->parsed()) run_saliency(sal_ckpt, sal_data, sal_labels, sal_out, io_);
    else if (ev->parsed()) run_eval(eval_task, ea, io_);
    else if (rp->parsed()) run_report(rp_inputs, rp_fixture, rp_format, rp_avg, rp_out, io_);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace capsl::cli
