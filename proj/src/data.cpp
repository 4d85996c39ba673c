#include "bml/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/gradcam.hpp"
#include "bml/rng.hpp"
#include "bml/text.hpp"

namespace bml {

namespace {

constexpr std::array<GestureLabel, 10> kGestures{{
    {1, "Reaching for needle with right hand"},
    {2, "Positioning needle"},
    {3, "Pushing needle through tissue"},
    {4, "Transferring needle from left to right"},
    {5, "Moving to center with needle in grip"},
    {6, "Pulling suture with left hand"},
    {7, "Orienting needle"},
    {8, "Using right hand to help tighten suture"},
    {9, "Loosening more suture"},
    {10, "Dropping suture at end and moving to end points"},
}};

}  // namespace

std::span<const GestureLabel> gesture_table() { return kGestures; }

const GestureLabel& gesture_from_id(int id) {
  if (id < 1 || id > static_cast<int>(kGestures.size())) {
    throw LabelError("unknown gesture id G" + std::to_string(id));
  }
  return kGestures[static_cast<std::size_t>(id - 1)];
}

const GestureLabel& gesture_from_index(int index) { return gesture_from_id(index + 1); }

std::optional<int> parse_gesture_token(std::string_view token) {
  if (token.size() < 2 || token[0] != 'G') return std::nullopt;
  int id = 0;
  for (char c : token.substr(1)) {
    if (c < '0' || c > '9') return std::nullopt;
    id = id * 10 + (c - '0');
    if (id > 1000) return std::nullopt;
  }
  return id;
}

std::vector<TranscriptEntry> parse_transcript(std::string_view text) {
  struct Located {
    TranscriptEntry entry;
    std::size_t line;
  };
  std::vector<Located> items;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto fields = split_whitespace(line);
    const std::string where = "transcript line " + std::to_string(line_no);
    if (fields.size() != 3) throw ParseError(where + ": expected 'start end G<k>'");
    long long start = 0, end = 0;
    try {
      start = parse_int(fields[0]);
      end = parse_int(fields[1]);
    } catch (const ParseError&) {
      throw ParseError(where + ": frame numbers must be integers");
    }
    if (start < 0 || end < 0) throw ParseError(where + ": negative frame number");
    if (end < start) {
      throw ParseError(where + ": reversed range " + std::to_string(start) + " > " + std::to_string(end));
    }
    const auto id = parse_gesture_token(fields[2]);
    if (!id || *id < 1 || *id > static_cast<int>(kGestures.size())) {
      throw ParseError(where + ": unknown gesture '" + std::string(fields[2]) + "'");
    }
    items.push_back({{start, end, *id}, line_no});
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Located& a, const Located& b) { return a.entry.start_frame < b.entry.start_frame; });
  std::vector<TranscriptEntry> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0 && items[i].entry.start_frame <= items[i - 1].entry.end_frame) {
      const std::size_t bad = std::max(items[i].line, items[i - 1].line);
      throw ParseError("transcript line " + std::to_string(bad) + ": segment overlaps the segment on line " +
                       std::to_string(std::min(items[i].line, items[i - 1].line)));
    }
    out.push_back(items[i].entry);
  }
  return out;
}

std::string serialize_transcript(std::span<const TranscriptEntry> entries) {
  std::vector<TranscriptEntry> sorted(entries.begin(), entries.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.start_frame < b.start_frame; });
  std::ostringstream os;
  for (const auto& e : sorted) os << e.start_frame << ' ' << e.end_frame << " G" << e.gesture_id << '\n';
  return os.str();
}

std::optional<int> label_at(std::span<const TranscriptEntry> entries, long long frame) {
  // First entry whose end is >= frame.
  auto it = std::lower_bound(entries.begin(), entries.end(), frame,
                             [](const TranscriptEntry& e, long long f) { return e.end_frame < f; });
  if (it == entries.end() || it->start_frame > frame) return std::nullopt;
  return it->class_index();
}

void PreprocessConfig::validate() const {
  if (downsample_r == 0) throw ConfigError("downsample_r must be positive");
  if (phase >= downsample_r) throw ConfigError("downsample phase must be smaller than r");
  if (crop_width == 0 || crop_height == 0 || resize_width == 0 || resize_height == 0) {
    throw ConfigError("crop and resize sizes must be positive");
  }
  if (resize_width > crop_width || resize_height > crop_height) throw ConfigError("resize must not exceed crop");
}

void PreprocessConfig::validate_for(std::size_t source_width, std::size_t source_height) const {
  validate();
  if (crop_width > source_width || crop_height > source_height) {
    throw ConfigError("crop " + std::to_string(crop_width) + "x" + std::to_string(crop_height) +
                      " exceeds source " + std::to_string(source_width) + "x" + std::to_string(source_height));
  }
}

DownsampleResult downsample_and_label(std::span<const TranscriptEntry> transcript, long long total_frames,
                                      const PreprocessConfig& cfg) {
  cfg.validate();
  if (!std::is_sorted(transcript.begin(), transcript.end(),
                      [](const auto& a, const auto& b) { return a.start_frame < b.start_frame; })) {
    throw ParseError("transcript entries must be sorted");
  }
  DownsampleResult r;
  const auto step = static_cast<long long>(cfg.downsample_r);
  for (long long f = static_cast<long long>(cfg.phase); f < total_frames; f += step) {
    if (const auto label = label_at(transcript, f)) {
      r.kept_frames.push_back(f);
      r.labels.push_back(*label);
    } else {
      r.dropped_unlabeled.push_back(f);
    }
  }
  return r;
}

Tensor center_crop(const Tensor& image, std::size_t width, std::size_t height) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  if (width > w || height > h) {
    throw ConfigError("crop " + std::to_string(width) + "x" + std::to_string(height) + " exceeds image " +
                      std::to_string(w) + "x" + std::to_string(h));
  }
  const std::size_t y0 = (h - height) / 2, x0 = (w - width) / 2;
  Tensor out({height, width, c});
  for (std::size_t y = 0; y < height; ++y)
    std::copy_n(image.data() + ((y0 + y) * w + x0) * c, width * c, out.data() + y * width * c);
  return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t width, std::size_t height) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out({height, width, c});
  Tensor plane({h, w});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < h * w; ++i) plane[i] = image[i * c + k];
    const Tensor up = upsample_bilinear(plane, height, width);
    for (std::size_t i = 0; i < height * width; ++i) out[i * c + k] = up[i];
  }
  return out;
}

Tensor preprocess_frame(const Tensor& image, const PreprocessConfig& cfg) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C");
  cfg.validate_for(image.dim(1), image.dim(0));
  return resize_bilinear(center_crop(image, cfg.crop_width, cfg.crop_height), cfg.resize_width, cfg.resize_height);
}

std::vector<LotoFold> loto_split(std::vector<std::string> trial_ids, std::uint64_t seed, double train_fraction) {
  if (trial_ids.size() < 2) {
    throw SplitError("leave-one-trial-out needs at least 2 trials, got " + std::to_string(trial_ids.size()));
  }
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must lie in (0, 1]");
  std::sort(trial_ids.begin(), trial_ids.end());
  if (std::adjacent_find(trial_ids.begin(), trial_ids.end()) != trial_ids.end()) {
    throw SplitError("duplicate trial id in split input");
  }
  std::vector<LotoFold> folds;
  for (const auto& test : trial_ids) {
    LotoFold fold;
    fold.test_trial = test;
    std::vector<std::string> rest;
    for (const auto& id : trial_ids)
      if (id != test) rest.push_back(id);
    // FNV-1a over the test id, starting from a seed-dependent basis.
    std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
    for (unsigned char ch : test) h = (h ^ ch) * 0x100000001b3ULL;
    Rng rng(h);
    rng.shuffle(std::span(rest));
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(rest.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, rest.size());
    fold.train_trials.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_train));
    fold.validation_trials.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_train), rest.end());
    std::sort(fold.train_trials.begin(), fold.train_trials.end());
    std::sort(fold.validation_trials.begin(), fold.validation_trials.end());
    folds.push_back(std::move(fold));
  }
  return folds;
}

std::vector<LotoFold> loto_split(std::span<const SequenceSample> samples, std::uint64_t seed, double train_fraction) {
  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.trial_id);
  return loto_split(std::move(ids), seed, train_fraction);
}

std::vector<TranscriptEntry> labels_to_transcript(std::span<const int> labels, std::size_t stride) {
  if (stride == 0) throw ConfigError("frame stride must be positive");
  std::vector<TranscriptEntry> out;
  const auto s = static_cast<long long>(stride);
  for (std::size_t i = 0; i < labels.size();) {
    std::size_t j = i;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    out.push_back({static_cast<long long>(i) * s, static_cast<long long>(j) * s - 1, gesture_from_index(labels[i]).id});
    i = j;
  }
  return out;
}

std::vector<TranscriptEntry> labels_to_transcript(std::span<const long long> frames, std::span<const int> labels,
                                                  std::size_t stride) {
  if (stride == 0) throw ConfigError("frame stride must be positive");
  if (frames.size() != labels.size()) {
    throw DimensionError(std::to_string(frames.size()) + " frame numbers for " + std::to_string(labels.size()) +
                         " labels");
  }
  std::vector<TranscriptEntry> out;
  const auto s = static_cast<long long>(stride);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i] < 0 || (i > 0 && frames[i] <= frames[i - 1])) {
      throw ConfigError("frame numbers must be non-negative and strictly increasing");
    }
    long long end = frames[i] + s - 1;
    if (i + 1 < frames.size()) end = std::min(end, frames[i + 1] - 1);
    const int id = gesture_from_index(labels[i]).id;
    if (!out.empty() && out.back().gesture_id == id && out.back().end_frame + 1 == frames[i]) {
      out.back().end_frame = end;
    } else {
      out.push_back({frames[i], end, id});
    }
  }
  return out;
}

}  // namespace bml
