#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bml/config.hpp"
#include "bml/convnet.hpp"
#include "bml/data.hpp"
#include "bml/indrnn.hpp"
#include "bml/metrics.hpp"
#include "bml/sequence.hpp"
#include "bml/training.hpp"

namespace bml {

// Independent random streams derived from the run seed, one per stage.
enum class Stream : std::uint64_t {
  source_images = 1,
  video = 2,
  sequences = 3,
  cnn_init = 4,
  head_init = 5,
  rnn_init = 6,
  blob_images = 7,
};

Rng stream_rng(const RunConfig& cfg, Stream stream);

// Synthetic inputs.
std::vector<ImageSample> make_source_images(const RunConfig& cfg);
std::vector<FrameTrial> make_video_trials(const RunConfig& cfg);
std::vector<SequenceSample> make_feature_trials(const RunConfig& cfg);
// Blob images of the target classes, with boxes, for localization checks.
std::vector<ImageSample> make_blob_images(const RunConfig& cfg, std::size_t count);

// Fresh CNN with `num_classes` outputs trained with the cnn.* settings.
ConvNetModel pretrain_cnn(const RunConfig& cfg, std::span<const ImageSample> images, std::size_t num_classes,
                          TrainingLog* log = nullptr);
// New `num_classes` head, the first finetune.freeze_blocks blocks frozen, finetune.* settings.
ConvNetModel finetune_cnn(const RunConfig& cfg, const ConvNetModel& source, std::span<const ImageSample> images,
                          std::size_t num_classes, TrainingLog* log = nullptr);

// Runs the CNN over every frame; row t of the result is the fc1 feature of frame t.
std::vector<SequenceSample> extract_trial_features(const ConvNetModel& model, std::span<const FrameTrial> trials,
                                                   std::size_t threads = 1);

BmlIndRnnModel train_sequence_model(const RunConfig& cfg, std::span<const SequenceSample> train_set,
                                    TrainingLog* log = nullptr);

struct TrialPrediction {
  std::string trial_id;
  std::vector<int> truth;
  std::vector<int> predicted;
};

TrialPrediction predict_trial(const BmlIndRnnModel& model, const SequenceSample& sample);
// Confusion over every trial; DimensionError if the model does not fit the data.
EvaluationReport evaluate_predictions(std::span<const TrialPrediction> predictions, std::size_t num_classes);

struct FoldResult {
  LotoFold fold;
  TrialPrediction test;
  EvaluationReport report;
  double validation_accuracy = 0.0;  // NaN without validation trials
  // Frame accuracy of the fine-tuned CNN head alone on the test trial (frame input only).
  std::optional<double> cnn_frame_accuracy;
  TrainingLog rnn_log;
  TrainingLog cnn_log;
};

struct LotoResult {
  std::vector<FoldResult> folds;
  EvaluationReport aggregate;

  // "fold,test_trial,frames,micro,validation_accuracy,cnn_frame_accuracy" then one row per fold.
  std::string folds_csv() const;
};

// Leave-one-trial-out over precomputed features. When `out_dir` is given,
// every fold writes its checkpoints, logs, report and ribbon under
// out_dir/fold_<test trial>, and the aggregate report goes to out_dir.
LotoResult run_loto(const RunConfig& cfg, std::span<const SequenceSample> trials,
                    const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Leave-one-trial-out over video frames. Each fold fine-tunes `source` on its
// training trials only, extracts features for its trials, then trains and
// evaluates the sequence model.
LotoResult run_loto(const RunConfig& cfg, std::span<const FrameTrial> trials, const ConvNetModel& source,
                    const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Writes report.txt, confusion.csv, confusion_normalized.csv and per_class.csv.
void write_report(const std::filesystem::path& dir, const EvaluationReport& report);

// Whole synthetic pipeline: generate trials and the source task, pretrain,
// then the frame-level leave-one-trial-out run. Writes config.txt,
// source_cnn.ckpt and source_cnn_log.csv beside the LOTO outputs.
LotoResult run_synthetic_pipeline(const RunConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace bml
