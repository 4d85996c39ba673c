#pragma once

#include <cstddef>
#include <vector>

#include "bml/convnet.hpp"
#include "bml/rng.hpp"
#include "bml/sequence.hpp"
#include "bml/tensor.hpp"

namespace bml {

// Semi-Markov label process with one-hot-like feature anchors.
struct SyntheticTaskSpec {
  std::size_t num_classes = 10;
  std::size_t feature_dim = 16;
  // Mean segment duration per class; a single value applies to every class.
  std::vector<double> duration_mean = {8.0};
  double noise_sigma = 0.3;
  // Row-stochastic C x C matrix; empty means uniform over the other classes.
  std::vector<std::vector<double>> transition;
  // k > 0: the label at frame t is the class emitted at frame min(t + k, T - 1).
  std::size_t future_offset = 0;
  std::size_t min_length = 60;
  std::size_t max_length = 100;

  void validate() const;
  double duration_for(std::size_t cls) const;
  std::vector<std::vector<double>> resolved_transition() const;
  // C x D matrix whose row k is the unit vector e_k.
  Tensor anchors() const;
};

// Geometric on {1, 2, ...} with the given mean (>= 1).
std::size_t sample_duration(double mean, Rng& rng);

struct SyntheticSequence {
  SequenceSample sample;          // labels are the (possibly shifted) targets
  std::vector<int> emitted;       // class whose anchor produced each frame
};

SyntheticSequence generate_synthetic_sequence(const SyntheticTaskSpec& spec, const std::string& trial_id, Rng& rng);
// Trial ids are "synth_000", "synth_001", ...
std::vector<SequenceSample> generate_synthetic_sequences(const SyntheticTaskSpec& spec, std::size_t count, Rng& rng);
// Class-label sequences only (the emitted process), one per trial.
std::vector<std::vector<int>> generate_label_sequences(const SyntheticTaskSpec& spec, std::size_t count, Rng& rng);

// Grayscale blob images: class k lights a jittered square inside cell k of a
// grid x grid layout over uniform background noise.
struct SyntheticImageSpec {
  std::size_t num_classes = 10;
  std::size_t size = 32;
  std::size_t grid = 4;
  std::size_t blob = 6;
  double background_noise = 0.15;
  double intensity_low = 0.6;
  double intensity_high = 1.0;

  void validate() const;
  std::size_t cell() const { return size / grid; }
};

ImageSample synthetic_image(const SyntheticImageSpec& spec, int label, Rng& rng);
// Labels drawn uniformly.
std::vector<ImageSample> generate_synthetic_images(const SyntheticImageSpec& spec, std::size_t count, Rng& rng);

// Frame sequences: labels follow the semi-Markov process of `task` and every
// frame is a blob image of its label. Row t is original frame t * stride.
std::vector<FrameTrial> generate_synthetic_video(const SyntheticTaskSpec& task, const SyntheticImageSpec& images,
                                                 std::size_t count, std::size_t stride, Rng& rng);

}  // namespace bml
