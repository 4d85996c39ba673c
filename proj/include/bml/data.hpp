#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bml/sequence.hpp"
#include "bml/tensor.hpp"

namespace bml {

// Suturing gesture vocabulary. Gesture id k (1-10) maps to class index k-1.
struct GestureLabel {
  int id = 0;
  std::string_view name;

  int index() const noexcept { return id - 1; }
};

std::span<const GestureLabel> gesture_table();
// Throws LabelError for ids outside 1-10.
const GestureLabel& gesture_from_id(int id);
const GestureLabel& gesture_from_index(int index);
// "G7" -> 7; anything else -> nullopt.
std::optional<int> parse_gesture_token(std::string_view token);

struct TranscriptEntry {
  long long start_frame = 0;
  long long end_frame = 0;  // inclusive
  int gesture_id = 1;

  int class_index() const noexcept { return gesture_id - 1; }
  bool operator==(const TranscriptEntry&) const = default;
};

// Lines of "start end G<k>"; blank lines and '#' comments are ignored.
// Entries are returned sorted by start frame. Overlaps, reversed ranges,
// negative frames and unknown gestures raise ParseError naming the line.
std::vector<TranscriptEntry> parse_transcript(std::string_view text);
// Canonical form: sorted, one "start end Gk" line per entry.
std::string serialize_transcript(std::span<const TranscriptEntry> entries);

// Label of the segment containing `frame`, if any (entries must be sorted).
std::optional<int> label_at(std::span<const TranscriptEntry> entries, long long frame);

struct PreprocessConfig {
  std::size_t downsample_r = 5;
  std::size_t phase = 0;  // keep frames with index % r == phase
  std::size_t crop_width = 448;
  std::size_t crop_height = 448;
  std::size_t resize_width = 224;
  std::size_t resize_height = 224;

  void validate() const;
  // Additionally checks crop <= source.
  void validate_for(std::size_t source_width, std::size_t source_height) const;
};

struct DownsampleResult {
  std::vector<long long> kept_frames;  // labelled frames only
  std::vector<int> labels;             // class indices, parallel to kept_frames
  std::vector<long long> dropped_unlabeled;
};

// Frames are numbered 0 .. total_frames-1.
DownsampleResult downsample_and_label(std::span<const TranscriptEntry> transcript, long long total_frames,
                                      const PreprocessConfig& cfg);

// Image tensors are H x W x C.
Tensor center_crop(const Tensor& image, std::size_t width, std::size_t height);
Tensor resize_bilinear(const Tensor& image, std::size_t width, std::size_t height);
Tensor preprocess_frame(const Tensor& image, const PreprocessConfig& cfg);

struct LotoFold {
  std::string test_trial;
  std::vector<std::string> train_trials;
  std::vector<std::string> validation_trials;
};

// One fold per trial, in sorted trial-id order. The remaining trials are
// shuffled with a generator keyed by (seed, test trial) and split
// round(train_fraction * n) / rest, with at least one training trial.
std::vector<LotoFold> loto_split(std::vector<std::string> trial_ids, std::uint64_t seed,
                                 double train_fraction = 0.7);
std::vector<LotoFold> loto_split(std::span<const SequenceSample> samples, std::uint64_t seed,
                                 double train_fraction = 0.7);

// Run-length transcript for per-row labels where row i is frame i * stride.
std::vector<TranscriptEntry> labels_to_transcript(std::span<const int> labels, std::size_t stride);
// Same for rows at explicit, strictly increasing frame numbers: each row covers
// [frame, frame + stride - 1], clipped before the next row's frame. Runs merge
// only across adjacent rows that share a label and leave no gap.
std::vector<TranscriptEntry> labels_to_transcript(std::span<const long long> frames, std::span<const int> labels,
                                                  std::size_t stride);

}  // namespace bml
