#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bml/convnet.hpp"
#include "bml/sequence.hpp"

namespace bml {

enum class DatasetKind { features, frames, images };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view name);

// Directory layout:
//   manifest.txt            this manifest
//   <trial>.txt             transcript, frame numbers in original units
//   <trial>.features        T x D tensor      (kind features)
//   <trial>.frames          T x H x W x C     (kind frames)
// Row i of a trial tensor holds original frame i * frame_stride.
//
// Kind images has a single entry "images" and no transcript; labels and
// optional boxes live in images.labels, one "label [x0 y0 x1 y1]" line per row.
struct DatasetManifest {
  struct Trial {
    std::string id;
    std::size_t rows = 0;
  };

  int format = 1;
  DatasetKind kind = DatasetKind::features;
  std::size_t frame_stride = 1;
  std::size_t num_classes = 10;
  std::vector<Trial> trials;

  std::string serialize() const;
  static DatasetManifest parse(std::string_view text);
};

DatasetManifest read_manifest(const std::filesystem::path& dir);

void write_feature_dataset(const std::filesystem::path& dir, std::span<const SequenceSample> samples,
                           std::size_t frame_stride, std::size_t num_classes);
void write_frame_dataset(const std::filesystem::path& dir, std::span<const FrameTrial> trials,
                         std::size_t frame_stride, std::size_t num_classes);

struct LoadStats {
  std::size_t dropped_unlabeled = 0;
};

// Trials come back sorted by id. Rows without a transcript label are dropped.
std::vector<SequenceSample> load_feature_dataset(const std::filesystem::path& dir, LoadStats* stats = nullptr);
std::vector<FrameTrial> load_frame_dataset(const std::filesystem::path& dir, LoadStats* stats = nullptr);

void write_image_dataset(const std::filesystem::path& dir, std::span<const ImageSample> images,
                         std::size_t num_classes);
std::vector<ImageSample> load_image_dataset(const std::filesystem::path& dir, std::size_t* num_classes = nullptr);

// Kind of whatever dataset lives in `dir`.
DatasetKind dataset_kind(const std::filesystem::path& dir);

std::vector<ImageSample> frames_to_images(std::span<const FrameTrial> trials);

// Valid trial ids are non-empty and use only [A-Za-z0-9_.-], not starting with '.'.
bool is_valid_trial_id(std::string_view id);

}  // namespace bml
