#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace bml {

struct LabelRun {
  std::size_t start = 0;
  std::size_t length = 0;
  int label = 0;

  bool operator==(const LabelRun&) const = default;
};

std::vector<LabelRun> run_length_encode(std::span<const int> labels);

// Ten fixed colours, class k uses entry k % 10:
// #1f77b4 #ff7f0e #2ca02c #d62728 #9467bd #8c564b #e377c2 #7f7f7f #bcbd22 #17becf
std::span<const std::string> default_palette();

// Standalone SVG 1.1 with the ground-truth bar on top and the prediction bar
// below. The viewBox is in frame units, so every run becomes one <rect> whose
// x and width are the run's start and length.
std::string emit_ribbon(std::span<const int> truth, std::span<const int> predicted,
                        std::span<const std::string> palette = default_palette(), const std::string& title = "");

}  // namespace bml
