#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "bml/config.hpp"
#include "bml/data.hpp"
#include "bml/dataset.hpp"
#include "bml/errors.hpp"
#include "bml/gradcam.hpp"
#include "bml/image_io.hpp"
#include "bml/pipeline.hpp"
#include "bml/ribbon.hpp"
#include "bml/tensor_io.hpp"
#include "bml/text.hpp"

namespace bmlgest {

namespace fs = std::filesystem;
using namespace bml;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out = "out";
  std::vector<std::string> overrides;
};

RunConfig resolve(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(std::string(trim(std::string_view(kv).substr(0, eq))), std::string(trim(std::string_view(kv).substr(eq + 1))));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = std::max<std::size_t>(1, *g.threads);
  cfg.validate();
  return cfg;
}

// Every command leaves its resolved settings beside its outputs.
void write_config(const fs::path& out, const RunConfig& cfg, const std::string& command) {
  fs::create_directories(out);
  write_text_file(out / "config.txt", "# bmlgest " + command + "\n" + cfg.to_text());
}

std::string percent(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << 100.0 * v << '%';
  return os.str();
}

void adopt_classes(RunConfig& cfg, std::size_t num_classes) {
  if (num_classes != cfg.task.num_classes) cfg.set("synth.num_classes", std::to_string(num_classes));
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string kind = "video";
  std::optional<std::size_t> count;
};

void cmd_synth(const Globals& g, const SynthArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(g);
  const fs::path dir = g.out;
  std::size_t written = 0;
  if (a.kind == "video") {
    if (a.count) cfg.trials = *a.count;
    const auto trials = make_video_trials(cfg);
    write_frame_dataset(dir, trials, cfg.frame_stride, cfg.task.num_classes);
    written = trials.size();
  } else if (a.kind == "features") {
    if (a.count) cfg.trials = *a.count;
    const auto trials = make_feature_trials(cfg);
    write_feature_dataset(dir, trials, cfg.frame_stride, cfg.task.num_classes);
    written = trials.size();
  } else if (a.kind == "images") {
    const auto images = make_blob_images(cfg, a.count.value_or(cfg.source_images));
    write_image_dataset(dir, images, cfg.image.num_classes);
    written = images.size();
  } else {
    if (a.count) cfg.source_images = *a.count;
    const auto images = make_source_images(cfg);
    write_image_dataset(dir, images, cfg.source_classes);
    written = images.size();
  }
  write_config(dir, cfg, "synth --kind " + a.kind);
  out << "wrote " << written << ' ' << (a.kind == "video" || a.kind == "features" ? "trials" : "images") << " to "
      << dir.string() << '\n';
}

// ---- train-cnn ---------------------------------------------------------------

struct TrainCnnArgs {
  std::string data;
  std::string init;
  std::vector<std::string> holdout;
};

std::vector<ImageSample> load_training_images(const fs::path& dir, const std::vector<std::string>& holdout,
                                              std::size_t& num_classes) {
  const auto manifest = read_manifest(dir);
  num_classes = manifest.num_classes;
  if (manifest.kind == DatasetKind::images) {
    if (!holdout.empty()) throw ConfigError("--holdout applies to frame datasets only");
    return load_image_dataset(dir);
  }
  if (manifest.kind != DatasetKind::frames) {
    throw StructureError(dir.string() + " holds features; train-cnn needs images or frames");
  }
  auto trials = load_frame_dataset(dir);
  for (const auto& id : holdout) {
    if (std::none_of(trials.begin(), trials.end(), [&](const FrameTrial& t) { return t.trial_id == id; })) {
      throw ConfigError("--holdout names unknown trial '" + id + "'");
    }
  }
  std::erase_if(trials, [&](const FrameTrial& t) {
    return std::find(holdout.begin(), holdout.end(), t.trial_id) != holdout.end();
  });
  return frames_to_images(trials);
}

void cmd_train_cnn(const Globals& g, const TrainCnnArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(g);
  std::size_t num_classes = 0;
  const auto images = load_training_images(a.data, a.holdout, num_classes);
  if (images.empty()) throw StructureError(a.data + " contains no training images");
  TrainingLog log;
  ConvNetModel model;
  if (a.init.empty()) {
    model = pretrain_cnn(cfg, images, num_classes, &log);
  } else {
    const auto source = ConvNetModel::from_checkpoint(load_checkpoint(a.init));
    model = finetune_cnn(cfg, source, images, num_classes, &log);
  }
  const fs::path dir = g.out;
  write_config(dir, cfg, a.init.empty() ? "train-cnn" : "train-cnn --init " + a.init);
  save_checkpoint(dir / "cnn.ckpt", model.to_checkpoint());
  write_text_file(dir / "cnn_log.csv", log.to_csv());
  out << "trained on " << images.size() << " images, training accuracy " << percent(image_accuracy(model, images))
      << '\n';
}

// ---- extract-features --------------------------------------------------------

struct ExtractArgs {
  std::string model;
  std::string data;
};

void cmd_extract(const Globals& g, const ExtractArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(g);
  const auto model = ConvNetModel::from_checkpoint(load_checkpoint(a.model));
  const auto manifest = read_manifest(a.data);
  const auto trials = load_frame_dataset(a.data);
  std::vector<SequenceSample> samples;
  try {
    samples = extract_trial_features(model, trials, cfg.threads);
  } catch (const DimensionError& e) {
    throw DimensionError(a.model + " vs " + a.data + ": " + e.what());
  }
  const fs::path dir = g.out;
  write_feature_dataset(dir, samples, manifest.frame_stride, manifest.num_classes);
  write_config(dir, cfg, "extract-features");
  out << "extracted " << model.config().feature_dim << "-d features for " << samples.size() << " trials\n";
}

// ---- train-rnn ---------------------------------------------------------------

struct TrainRnnArgs {
  std::string data;
  bool loto = false;
  std::string cnn;
};

void cmd_train_rnn(const Globals& g, const TrainRnnArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(g);
  const auto manifest = read_manifest(a.data);
  adopt_classes(cfg, manifest.num_classes);
  const fs::path dir = g.out;
  if (manifest.kind == DatasetKind::frames) {
    if (!a.loto || a.cnn.empty()) {
      throw ConfigError("a frame dataset needs --loto and --cnn (frames are fine-tuned and encoded per fold)");
    }
    const auto source = ConvNetModel::from_checkpoint(load_checkpoint(a.cnn));
    const auto trials = load_frame_dataset(a.data);
    write_config(dir, cfg, "train-rnn --loto --cnn " + a.cnn);
    const auto result = run_loto(cfg, std::span<const FrameTrial>(trials), source, dir);
    out << "leave-one-trial-out over " << result.folds.size() << " trials: micro " << percent(result.aggregate.micro)
        << ", macro " << percent(result.aggregate.macro) << '\n';
    return;
  }
  if (manifest.kind != DatasetKind::features) throw StructureError(a.data + " is not a sequence dataset");
  if (!a.cnn.empty()) throw ConfigError("--cnn only applies to frame datasets");
  const auto samples = load_feature_dataset(a.data);
  if (a.loto) {
    write_config(dir, cfg, "train-rnn --loto");
    const auto result = run_loto(cfg, std::span<const SequenceSample>(samples), dir);
    out << "leave-one-trial-out over " << result.folds.size() << " trials: micro " << percent(result.aggregate.micro)
        << ", macro " << percent(result.aggregate.macro) << '\n';
    return;
  }
  TrainingLog log;
  const auto model = train_sequence_model(cfg, samples, &log);
  write_config(dir, cfg, "train-rnn");
  save_checkpoint(dir / "rnn.ckpt", model.to_checkpoint());
  write_text_file(dir / "rnn_log.csv", log.to_csv());
  write_text_file(dir / "model.txt", model.summary());
  out << "trained on " << samples.size() << " trials";
  if (!log.epochs.empty()) out << ", last epoch frame accuracy " << percent(log.epochs.back().frame_accuracy);
  out << '\n';
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::string model;
  std::string predictions;
};

std::vector<int> labels_from_transcript(const fs::path& path, const SequenceSample& s) {
  std::vector<TranscriptEntry> entries;
  try {
    entries = parse_transcript(read_text_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  std::vector<int> out;
  for (long long f : s.frame_indices) {
    const auto label = label_at(entries, f);
    if (!label) throw StructureError(path.string() + " has no label for frame " + std::to_string(f));
    out.push_back(*label);
  }
  return out;
}

void cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  if (a.model.empty() == a.predictions.empty()) throw ConfigError("eval needs exactly one of --model or --predictions");
  RunConfig cfg = resolve(g);
  const auto manifest = read_manifest(a.data);
  if (manifest.kind != DatasetKind::features) throw StructureError(a.data + " is not a features dataset");
  const auto samples = load_feature_dataset(a.data);
  std::vector<TrialPrediction> preds;
  if (!a.model.empty()) {
    const auto model = BmlIndRnnModel::from_checkpoint(load_checkpoint(a.model));
    if (model.num_classes() != manifest.num_classes) {
      throw DimensionError(a.model + " predicts " + std::to_string(model.num_classes()) + " classes but " + a.data +
                           " has " + std::to_string(manifest.num_classes));
    }
    for (const auto& s : samples) {
      try {
        preds.push_back(predict_trial(model, s));
      } catch (const DimensionError& e) {
        throw DimensionError(a.model + " vs " + a.data + ": " + e.what());
      }
    }
  } else {
    for (const auto& s : samples) {
      preds.push_back({s.trial_id, s.labels, labels_from_transcript(fs::path(a.predictions) / (s.trial_id + ".txt"), s)});
    }
  }
  adopt_classes(cfg, manifest.num_classes);
  const auto report = evaluate_predictions(preds, manifest.num_classes);
  const fs::path dir = g.out;
  write_config(dir, cfg, "eval");
  write_report(dir, report);
  fs::create_directories(dir / "ribbons");
  fs::create_directories(dir / "predictions");
  std::ostringstream per_trial;
  per_trial << "trial,frames,correct,accuracy\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    std::size_t correct = 0;
    for (std::size_t t = 0; t < p.truth.size(); ++t) correct += p.truth[t] == p.predicted[t];
    per_trial << p.trial_id << ',' << p.truth.size() << ',' << correct << ','
              << format_double(p.truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(p.truth.size()))
              << '\n';
    write_text_file(dir / "ribbons" / (p.trial_id + ".svg"),
                    emit_ribbon(p.truth, p.predicted, default_palette(), "trial " + p.trial_id));
    write_text_file(dir / "predictions" / (p.trial_id + ".txt"),
                    serialize_transcript(labels_to_transcript(samples[i].frame_indices, p.predicted, manifest.frame_stride)));
  }
  write_text_file(dir / "per_trial.csv", per_trial.str());
  out << "evaluated " << preds.size() << " trials, " << report.confusion.total() << " frames: micro "
      << percent(report.micro) << ", macro " << percent(report.macro) << '\n';
}

// ---- gradcam -----------------------------------------------------------------

struct GradcamArgs {
  std::string model;
  std::string image;
  std::string data;
  std::optional<int> target;
  std::size_t limit = 0;
  std::size_t save = 4;
  double threshold = 0.6;
};

void write_heatmap_files(const fs::path& dir, const std::string& stem, const Heatmap& h, const Tensor& image,
                         double alpha) {
  write_text_file(dir / (stem + "_heatmap.csv"), heatmap_csv(h.values));
  Tensor gray({h.values.rows(), h.values.cols(), 1});
  std::copy_n(h.values.data(), h.values.size(), gray.data());
  save_pnm(dir / (stem + "_heatmap.pgm"), gray);
  save_pnm(dir / (stem + "_colormap.ppm"), colorize(h.values));
  save_pnm(dir / (stem + "_overlay.ppm"), render_overlay(h.values, image, alpha));
}

void cmd_gradcam(const Globals& g, const GradcamArgs& a, std::ostream& out) {
  if (a.image.empty() == a.data.empty()) throw ConfigError("gradcam needs exactly one of --image or --data");
  RunConfig cfg = resolve(g);
  const auto model = ConvNetModel::from_checkpoint(load_checkpoint(a.model));
  const fs::path dir = g.out;
  write_config(dir, cfg, "gradcam");
  if (!a.image.empty()) {
    const Tensor image = load_pnm(a.image);
    const int predicted = predicted_class(model, image);
    const int target = a.target.value_or(predicted);
    const auto h = grad_cam(model, image, target);
    write_heatmap_files(dir, "image", h, image, cfg.gradcam_alpha);
    out << "predicted class " << predicted << ", explained class " << target << '\n';
    return;
  }
  auto images = load_image_dataset(a.data);
  if (a.limit > 0 && images.size() > a.limit) images.resize(a.limit);
  std::ostringstream csv;
  csv << "index,label,predicted,target,score\n";
  std::size_t boxed = 0, localized = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const int predicted = predicted_class(model, img.pixels);
    const int target = a.target.value_or(img.label);
    const auto h = grad_cam(model, img.pixels, target);
    csv << i << ',' << img.label << ',' << predicted << ',' << target << ',';
    if (img.box) {
      const double score = localization_score(h.values, *img.box);
      csv << format_double(score);
      ++boxed;
      total += score;
      localized += score >= a.threshold;
    }
    csv << '\n';
    if (i < a.save) write_heatmap_files(dir, "image_" + std::to_string(i), h, img.pixels, cfg.gradcam_alpha);
  }
  write_text_file(dir / "localization.csv", csv.str());
  std::ostringstream summary;
  summary << "images=" << images.size() << '\n'
          << "with_box=" << boxed << '\n'
          << "threshold=" << format_double(a.threshold) << '\n'
          << "localized=" << localized << '\n'
          << "localized_fraction=" << format_double(boxed ? static_cast<double>(localized) / boxed : 0.0) << '\n'
          << "mean_score=" << format_double(boxed ? total / static_cast<double>(boxed) : 0.0) << '\n';
  write_text_file(dir / "localization.txt", summary.str());
  out << "localized " << localized << " of " << boxed << " boxed images (top-decile share >= "
      << format_double(a.threshold) << ")\n";
}

// ---- ribbon ------------------------------------------------------------------

struct RibbonArgs {
  std::string truth;
  std::string predicted;
  std::size_t stride = 1;
  std::string title;
};

std::vector<TranscriptEntry> read_transcript_file(const std::string& path) {
  try {
    return parse_transcript(read_text_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void cmd_ribbon(const Globals& g, const RibbonArgs& a, std::ostream& out) {
  RunConfig cfg = resolve(g);
  if (a.stride == 0) throw ConfigError("--stride must be positive");
  const auto truth = read_transcript_file(a.truth);
  const auto pred = read_transcript_file(a.predicted);
  std::vector<int> t, p;
  const long long last = truth.empty() ? -1 : truth.back().end_frame;
  for (long long f = 0; f <= last; f += static_cast<long long>(a.stride)) {
    const auto lt = label_at(truth, f);
    if (!lt) continue;
    const auto lp = label_at(pred, f);
    if (!lp) throw StructureError(a.predicted + " has no label for frame " + std::to_string(f));
    t.push_back(*lt);
    p.push_back(*lp);
  }
  const fs::path dir = g.out;
  write_config(dir, cfg, "ribbon");
  write_text_file(dir / "ribbon.svg", emit_ribbon(t, p, default_palette(), a.title));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < t.size(); ++i) correct += t[i] == p[i];
  out << "ribbon over " << t.size() << " frames, " << run_length_encode(t).size() << " true segments, agreement "
      << percent(t.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(t.size())) << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Frame-wise gesture recognition with bidirectional IndRNNs", "bmlgest"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "key = value settings file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master random seed (overrides the config)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads (overrides the config)");
  app.add_option("--set", g.overrides, "override one setting, key=value (repeatable)");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "write a synthetic dataset");
  c_synth->add_option("--kind", synth.kind, "video, features, images or source")
      ->check(CLI::IsMember({"video", "features", "images", "source"}))
      ->capture_default_str();
  c_synth->add_option("--count", synth.count, "trials (video, features) or images (images, source)");

  TrainCnnArgs tcnn;
  auto* c_tcnn = app.add_subcommand("train-cnn", "train a CNN from scratch, or fine-tune one with --init");
  c_tcnn->add_option("--data", tcnn.data, "image or frame dataset")->required();
  c_tcnn->add_option("--init", tcnn.init, "source checkpoint to fine-tune");
  c_tcnn->add_option("--holdout", tcnn.holdout, "trial to leave out (repeatable)");

  ExtractArgs ext;
  auto* c_ext = app.add_subcommand("extract-features", "encode every frame with a CNN");
  c_ext->add_option("--model", ext.model, "CNN checkpoint")->required();
  c_ext->add_option("--data", ext.data, "frame dataset")->required();

  TrainRnnArgs trnn;
  auto* c_trnn = app.add_subcommand("train-rnn", "train the bidirectional IndRNN");
  c_trnn->add_option("--data", trnn.data, "features or frame dataset")->required();
  c_trnn->add_flag("--loto", trnn.loto, "leave-one-trial-out evaluation");
  c_trnn->add_option("--cnn", trnn.cnn, "source CNN checkpoint (frame datasets)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score predictions against a features dataset");
  c_eval->add_option("--data", ev.data, "features dataset")->required();
  c_eval->add_option("--model", ev.model, "RNN checkpoint");
  c_eval->add_option("--predictions", ev.predictions, "directory of <trial>.txt transcripts");

  GradcamArgs gc;
  auto* c_gc = app.add_subcommand("gradcam", "explain CNN decisions with Grad-CAM");
  c_gc->add_option("--model", gc.model, "CNN checkpoint")->required();
  c_gc->add_option("--image", gc.image, "one PGM/PPM image");
  c_gc->add_option("--data", gc.data, "image dataset");
  c_gc->add_option("--class", gc.target, "class to explain (default: predicted, or the label with --data)");
  c_gc->add_option("--limit", gc.limit, "use at most this many dataset images (0 = all)");
  c_gc->add_option("--save", gc.save, "write heatmaps for this many dataset images")->capture_default_str();
  c_gc->add_option("--threshold", gc.threshold, "localization threshold")->capture_default_str();

  RibbonArgs rb;
  auto* c_rb = app.add_subcommand("ribbon", "draw a ground-truth versus prediction ribbon");
  c_rb->add_option("--truth", rb.truth, "ground-truth transcript")->required();
  c_rb->add_option("--pred", rb.predicted, "predicted transcript")->required();
  c_rb->add_option("--stride", rb.stride, "frame step")->capture_default_str();
  c_rb->add_option("--title", rb.title, "SVG title");

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ExitCode::ok : ExitCode::usage;
  }

  try {
    if (c_synth->parsed()) cmd_synth(g, synth, out);
    else if (c_tcnn->parsed()) cmd_train_cnn(g, tcnn, out);
    else if (c_ext->parsed()) cmd_extract(g, ext, out);
    else if (c_trnn->parsed()) cmd_train_rnn(g, trnn, out);
    else if (c_eval->parsed()) cmd_eval(g, ev, out);
    else if (c_gc->parsed()) cmd_gradcam(g, gc, out);
    else if (c_rb->parsed()) cmd_ribbon(g, rb, out);
  } catch (const ConfigError& e) {
    err << "bmlgest: configuration error: " << e.what() << '\n';
    return ExitCode::usage;
  } catch (const DivergenceError& e) {
    err << "bmlgest: training diverged: " << e.what() << '\n';
    return ExitCode::divergence;
  } catch (const Error& e) {
    err << "bmlgest: " << e.what() << '\n';
    return ExitCode::data_error;
  } catch (const fs::filesystem_error& e) {
    err << "bmlgest: " << e.what() << '\n';
    return ExitCode::data_error;
  }
  return ExitCode::ok;
}

}  // namespace bmlgest
