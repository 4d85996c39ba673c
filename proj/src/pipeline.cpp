#include "bml/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "bml/dataset.hpp"
#include "bml/errors.hpp"
#include "bml/parallel.hpp"
#include "bml/ribbon.hpp"
#include "bml/synthetic.hpp"
#include "bml/tensor_io.hpp"
#include "bml/text.hpp"

namespace bml {

namespace fs = std::filesystem;

Rng stream_rng(const RunConfig& cfg, Stream stream) {
  return Rng(cfg.seed).fork(static_cast<std::uint64_t>(stream));
}

namespace {

TrainConfig with_run(TrainConfig t, const RunConfig& cfg, std::uint64_t salt) {
  t.threads = cfg.threads;
  t.seed = cfg.seed * 1000003ULL + salt;
  return t;
}

}  // namespace

std::vector<ImageSample> make_source_images(const RunConfig& cfg) {
  auto rng = stream_rng(cfg, Stream::source_images);
  return generate_synthetic_images(cfg.source_image_spec(), cfg.source_images, rng);
}

std::vector<FrameTrial> make_video_trials(const RunConfig& cfg) {
  auto rng = stream_rng(cfg, Stream::video);
  return generate_synthetic_video(cfg.task, cfg.image, cfg.trials, cfg.frame_stride, rng);
}

std::vector<SequenceSample> make_feature_trials(const RunConfig& cfg) {
  auto rng = stream_rng(cfg, Stream::sequences);
  auto out = generate_synthetic_sequences(cfg.task, cfg.trials, rng);
  for (auto& s : out)
    for (auto& f : s.frame_indices) f *= static_cast<long long>(cfg.frame_stride);
  return out;
}

std::vector<ImageSample> make_blob_images(const RunConfig& cfg, std::size_t count) {
  auto rng = stream_rng(cfg, Stream::blob_images);
  return generate_synthetic_images(cfg.image, count, rng);
}

ConvNetModel pretrain_cnn(const RunConfig& cfg, std::span<const ImageSample> images, std::size_t num_classes,
                          TrainingLog* log) {
  auto rng = stream_rng(cfg, Stream::cnn_init);
  auto model = ConvNetModel::random(cfg.cnn_config(num_classes), rng);
  auto l = train_cnn(model, images, with_run(cfg.cnn_train, cfg, 1));
  if (log) *log = std::move(l);
  return model;
}

ConvNetModel finetune_cnn(const RunConfig& cfg, const ConvNetModel& source, std::span<const ImageSample> images,
                          std::size_t num_classes, TrainingLog* log) {
  FineTuneOptions opts;
  opts.freeze_prefix = cfg.freeze_blocks;
  opts.num_classes = num_classes;
  opts.freeze_fc1 = cfg.freeze_fc1;
  opts.head_seed = stream_rng(cfg, Stream::head_init).next_u64();
  return fine_tune(source, images, opts, with_run(cfg.finetune_train, cfg, 2), log);
}

std::vector<SequenceSample> extract_trial_features(const ConvNetModel& model, std::span<const FrameTrial> trials,
                                                   std::size_t threads) {
  std::vector<SequenceSample> out;
  out.reserve(trials.size());
  const auto& mc = model.config();
  for (const auto& t : trials) {
    if (t.frames.rank() != 4 || t.frames.dim(1) != mc.height || t.frames.dim(2) != mc.width ||
        t.frames.dim(3) != mc.channels) {
      throw DimensionError("trial '" + t.trial_id + "': frames " + shape_to_string(t.frames.shape()) +
                           " do not fit a CNN expecting " + std::to_string(mc.height) + "x" + std::to_string(mc.width) +
                           "x" + std::to_string(mc.channels));
    }
    const std::size_t steps = t.labels.size(), px = mc.height * mc.width * mc.channels;
    SequenceSample s;
    s.trial_id = t.trial_id;
    s.labels = t.labels;
    s.frame_indices = t.frame_indices;
    s.features = Tensor({steps, mc.feature_dim});
    parallel_for(steps, threads, [&](std::size_t i) {
      Tensor img({mc.height, mc.width, mc.channels});
      std::copy_n(t.frames.data() + i * px, px, img.data());
      const Tensor f = extract_features(model, img);
      std::copy_n(f.data(), mc.feature_dim, s.features.data() + i * mc.feature_dim);
    });
    out.push_back(std::move(s));
  }
  return out;
}

BmlIndRnnModel train_sequence_model(const RunConfig& cfg, std::span<const SequenceSample> train_set,
                                    TrainingLog* log) {
  if (train_set.empty()) throw SplitError("no training trials");
  auto rng = stream_rng(cfg, Stream::rnn_init);
  auto model = BmlIndRnnModel::random(cfg.rnn_config(train_set.front().features.cols()), rng);
  auto l = train(model, train_set, with_run(cfg.rnn_train, cfg, 3));
  if (log) *log = std::move(l);
  return model;
}

TrialPrediction predict_trial(const BmlIndRnnModel& model, const SequenceSample& sample) {
  if (sample.features.rank() != 2 || sample.features.cols() != model.input_dim()) {
    throw DimensionError("trial '" + sample.trial_id + "': features " + shape_to_string(sample.features.shape()) +
                         " do not fit a model with input dimension " + std::to_string(model.input_dim()));
  }
  return {sample.trial_id, sample.labels, predict_labels(model, sample.features)};
}

EvaluationReport evaluate_predictions(std::span<const TrialPrediction> predictions, std::size_t num_classes) {
  ConfusionMatrix c(num_classes);
  for (const auto& p : predictions) c.merge(build_confusion(p.truth, p.predicted, num_classes));
  return evaluate(c);
}

std::string LotoResult::folds_csv() const {
  std::ostringstream os;
  os << "fold,test_trial,frames,micro,validation_accuracy,cnn_frame_accuracy\n";
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const auto& f = folds[i];
    os << i << ',' << f.fold.test_trial << ',' << f.report.confusion.total() << ',' << format_double(f.report.micro)
       << ',' << format_double(f.validation_accuracy) << ','
       << (f.cnn_frame_accuracy ? format_double(*f.cnn_frame_accuracy) : std::string()) << '\n';
  }
  return os.str();
}

void write_report(const fs::path& dir, const EvaluationReport& report) {
  fs::create_directories(dir);
  write_text_file(dir / "report.txt", report.summary());
  write_text_file(dir / "confusion.csv", report.confusion_csv(false));
  write_text_file(dir / "confusion_normalized.csv", report.confusion_csv(true));
  write_text_file(dir / "per_class.csv", report.per_class_csv());
}

namespace {

template <typename T>
std::map<std::string, const T*> index_by_id(std::span<const T> items) {
  std::map<std::string, const T*> by_id;
  for (const auto& x : items) {
    if (!by_id.emplace(x.trial_id, &x).second) throw SplitError("duplicate trial id '" + x.trial_id + "'");
  }
  return by_id;
}

template <typename T>
std::vector<T> gather(const std::map<std::string, const T*>& by_id, const std::vector<std::string>& ids) {
  std::vector<T> out;
  for (const auto& id : ids) out.push_back(*by_id.at(id));
  return out;
}

double frame_accuracy(const BmlIndRnnModel& model, std::span<const SequenceSample> samples) {
  std::size_t correct = 0, total = 0;
  for (const auto& s : samples) {
    const auto p = predict_trial(model, s);
    for (std::size_t t = 0; t < p.truth.size(); ++t) correct += p.truth[t] == p.predicted[t];
    total += p.truth.size();
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : std::numeric_limits<double>::quiet_NaN();
}

// Trains, predicts and (optionally) writes one fold given its features.
void finish_fold(const RunConfig& cfg, FoldResult& r, std::span<const SequenceSample> train_set,
                 std::span<const SequenceSample> validation_set, const SequenceSample& test,
                 const std::optional<fs::path>& fold_dir) {
  const auto model = train_sequence_model(cfg, train_set, &r.rnn_log);
  r.test = predict_trial(model, test);
  r.report = evaluate_predictions(std::span(&r.test, 1), cfg.task.num_classes);
  r.validation_accuracy = frame_accuracy(model, validation_set);
  if (!fold_dir) return;
  fs::create_directories(*fold_dir);
  save_checkpoint(*fold_dir / "rnn.ckpt", model.to_checkpoint());
  write_text_file(*fold_dir / "rnn_log.csv", r.rnn_log.to_csv());
  write_report(*fold_dir, r.report);
  write_text_file(*fold_dir / "ribbon.svg", emit_ribbon(r.test.truth, r.test.predicted, default_palette(),
                                                          "trial " + r.test.trial_id));
}

LotoResult aggregate(std::vector<FoldResult> folds, const RunConfig& cfg, const std::optional<fs::path>& out_dir) {
  LotoResult res;
  std::vector<TrialPrediction> preds;
  for (const auto& f : folds) preds.push_back(f.test);
  res.aggregate = evaluate_predictions(preds, cfg.task.num_classes);
  res.folds = std::move(folds);
  if (out_dir) {
    write_report(*out_dir, res.aggregate);
    write_text_file(*out_dir / "folds.csv", res.folds_csv());
  }
  return res;
}

std::optional<fs::path> fold_path(const std::optional<fs::path>& out_dir, const std::string& id) {
  if (!out_dir) return std::nullopt;
  return *out_dir / ("fold_" + id);
}

}  // namespace

LotoResult run_loto(const RunConfig& cfg, std::span<const SequenceSample> trials,
                    const std::optional<fs::path>& out_dir) {
  const auto by_id = index_by_id(trials);
  std::vector<FoldResult> folds;
  for (auto& fold : loto_split(trials, cfg.seed, cfg.train_fraction)) {
    FoldResult r;
    r.fold = fold;
    const auto train_set = gather(by_id, fold.train_trials);
    const auto validation_set = gather(by_id, fold.validation_trials);
    finish_fold(cfg, r, train_set, validation_set, *by_id.at(fold.test_trial), fold_path(out_dir, fold.test_trial));
    folds.push_back(std::move(r));
  }
  return aggregate(std::move(folds), cfg, out_dir);
}

LotoResult run_loto(const RunConfig& cfg, std::span<const FrameTrial> trials, const ConvNetModel& source,
                    const std::optional<fs::path>& out_dir) {
  const auto by_id = index_by_id(trials);
  std::vector<std::string> ids;
  for (const auto& t : trials) ids.push_back(t.trial_id);
  std::vector<FoldResult> folds;
  for (auto& fold : loto_split(ids, cfg.seed, cfg.train_fraction)) {
    FoldResult r;
    r.fold = fold;
    const auto train_frames = gather(by_id, fold.train_trials);
    const auto validation_frames = gather(by_id, fold.validation_trials);
    const FrameTrial& test_frames = *by_id.at(fold.test_trial);

    const auto cnn = finetune_cnn(cfg, source, frames_to_images(train_frames), cfg.task.num_classes, &r.cnn_log);
    r.cnn_frame_accuracy = image_accuracy(cnn, frames_to_images(std::span(&test_frames, 1)));

    const auto train_set = extract_trial_features(cnn, train_frames, cfg.threads);
    const auto validation_set = extract_trial_features(cnn, validation_frames, cfg.threads);
    const auto test_set = extract_trial_features(cnn, std::span(&test_frames, 1), cfg.threads);

    const auto dir = fold_path(out_dir, fold.test_trial);
    if (dir) {
      fs::create_directories(*dir);
      save_checkpoint(*dir / "cnn.ckpt", cnn.to_checkpoint());
      write_text_file(*dir / "cnn_log.csv", r.cnn_log.to_csv());
    }
    finish_fold(cfg, r, train_set, validation_set, test_set.front(), dir);
    folds.push_back(std::move(r));
  }
  return aggregate(std::move(folds), cfg, out_dir);
}

LotoResult run_synthetic_pipeline(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_text_file(out_dir / "config.txt", cfg.to_text());
  const auto source_images = make_source_images(cfg);
  TrainingLog source_log;
  const auto source = pretrain_cnn(cfg, source_images, cfg.source_classes, &source_log);
  save_checkpoint(out_dir / "source_cnn.ckpt", source.to_checkpoint());
  write_text_file(out_dir / "source_cnn_log.csv", source_log.to_csv());
  const auto trials = make_video_trials(cfg);
  return run_loto(cfg, std::span<const FrameTrial>(trials), source, out_dir);
}

}  // namespace bml
