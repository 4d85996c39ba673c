#pragma once

#include <string>
#include <vector>

#include "bml/tensor.hpp"

namespace bml {

// One trial: per-frame features (T x D) with per-frame class indices.
struct SequenceSample {
  std::string trial_id;
  Tensor features;
  std::vector<int> labels;
  // Original frame numbers of the kept rows.
  std::vector<long long> frame_indices;

  std::size_t length() const { return labels.size(); }
  void validate() const;
};

// One trial of video frames (T x H x W x C) with per-frame class indices.
struct FrameTrial {
  std::string trial_id;
  Tensor frames;
  std::vector<int> labels;
  std::vector<long long> frame_indices;

  std::size_t length() const { return labels.size(); }
};

}  // namespace bml
