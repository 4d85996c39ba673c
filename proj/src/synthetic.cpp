#include "bml/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "bml/errors.hpp"

namespace bml {

void SyntheticTaskSpec::validate() const {
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (feature_dim < num_classes) {
    throw ConfigError("feature_dim " + std::to_string(feature_dim) + " must be at least num_classes " +
                      std::to_string(num_classes) + " for orthogonal anchors");
  }
  if (duration_mean.size() != 1 && duration_mean.size() != num_classes) {
    throw ConfigError("duration_mean needs 1 or num_classes entries");
  }
  for (double d : duration_mean)
    if (!(d >= 1.0) || !std::isfinite(d)) throw ConfigError("duration means must be >= 1");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  if (min_length == 0 || max_length < min_length) throw ConfigError("need 1 <= min_length <= max_length");
  if (!transition.empty()) {
    if (transition.size() != num_classes) throw ConfigError("transition matrix must be num_classes x num_classes");
    for (std::size_t i = 0; i < num_classes; ++i) {
      if (transition[i].size() != num_classes) throw ConfigError("transition matrix must be square");
      double s = 0.0;
      for (double p : transition[i]) {
        if (!(p >= 0.0)) throw ConfigError("transition probabilities must be non-negative");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-12) {
        throw ConfigError("transition row " + std::to_string(i) + " sums to " + std::to_string(s));
      }
    }
  } else if (num_classes < 2) {
    throw ConfigError("the default transition matrix needs at least two classes");
  }
}

double SyntheticTaskSpec::duration_for(std::size_t cls) const {
  return duration_mean.size() == 1 ? duration_mean[0] : duration_mean.at(cls);
}

std::vector<std::vector<double>> SyntheticTaskSpec::resolved_transition() const {
  if (!transition.empty()) return transition;
  std::vector<std::vector<double>> m(num_classes, std::vector<double>(num_classes, 0.0));
  const double p = 1.0 / static_cast<double>(num_classes - 1);
  for (std::size_t i = 0; i < num_classes; ++i)
    for (std::size_t j = 0; j < num_classes; ++j)
      if (i != j) m[i][j] = p;
  return m;
}

Tensor SyntheticTaskSpec::anchors() const {
  Tensor a({num_classes, feature_dim});
  for (std::size_t k = 0; k < num_classes; ++k) a(k, k) = 1.0;
  return a;
}

std::size_t sample_duration(double mean, Rng& rng) {
  if (mean <= 1.0) return 1;
  // Inverse CDF of the geometric law with success probability 1/mean.
  const double p = 1.0 / mean;
  const double u = 1.0 - rng.uniform();  // (0, 1]
  return 1 + static_cast<std::size_t>(std::floor(std::log(u) / std::log1p(-p)));
}

namespace {

std::size_t draw_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding slack: fall back to the last class with non-zero mass.
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return i;
  return 0;
}

std::vector<int> sample_labels(const SyntheticTaskSpec& spec, const std::vector<std::vector<double>>& trans,
                               Rng& rng) {
  const std::size_t length = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
  std::vector<int> z;
  z.reserve(length);
  std::size_t cls = rng.below(spec.num_classes);
  while (z.size() < length) {
    const std::size_t d = sample_duration(spec.duration_for(cls), rng);
    for (std::size_t i = 0; i < d && z.size() < length; ++i) z.push_back(static_cast<int>(cls));
    cls = draw_categorical(trans[cls], rng);
  }
  return z;
}

std::string trial_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth_%03zu", i);
  return buf;
}

}  // namespace

SyntheticSequence generate_synthetic_sequence(const SyntheticTaskSpec& spec, const std::string& trial_id, Rng& rng) {
  spec.validate();
  const auto trans = spec.resolved_transition();
  SyntheticSequence out;
  out.emitted = sample_labels(spec, trans, rng);
  const std::size_t steps = out.emitted.size();
  auto& s = out.sample;
  s.trial_id = trial_id;
  s.features = Tensor({steps, spec.feature_dim});
  for (std::size_t t = 0; t < steps; ++t) {
    auto row = s.features.row(t);
    for (std::size_t j = 0; j < spec.feature_dim; ++j) {
      const double anchor = static_cast<std::size_t>(out.emitted[t]) == j ? 1.0 : 0.0;
      row[j] = spec.noise_sigma > 0.0 ? anchor + spec.noise_sigma * rng.normal() : anchor;
    }
    s.labels.push_back(out.emitted[std::min(t + spec.future_offset, steps - 1)]);
    s.frame_indices.push_back(static_cast<long long>(t));
  }
  return out;
}

std::vector<SequenceSample> generate_synthetic_sequences(const SyntheticTaskSpec& spec, std::size_t count, Rng& rng) {
  std::vector<SequenceSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic_sequence(spec, trial_name(i), rng).sample);
  return out;
}

std::vector<std::vector<int>> generate_label_sequences(const SyntheticTaskSpec& spec, std::size_t count, Rng& rng) {
  spec.validate();
  const auto trans = spec.resolved_transition();
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_labels(spec, trans, rng));
  return out;
}

void SyntheticImageSpec::validate() const {
  if (grid == 0 || size == 0 || size % grid != 0) throw ConfigError("image size must be a positive multiple of grid");
  if (num_classes == 0 || num_classes > grid * grid) {
    throw ConfigError("a " + std::to_string(grid) + "x" + std::to_string(grid) + " grid holds at most " +
                      std::to_string(grid * grid) + " classes");
  }
  if (blob == 0 || blob > cell()) throw ConfigError("blob must fit inside one grid cell");
  if (!(background_noise >= 0.0 && background_noise <= 1.0)) throw ConfigError("background_noise must lie in [0, 1]");
  if (!(intensity_low >= 0.0 && intensity_low <= intensity_high && intensity_high <= 1.0)) {
    throw ConfigError("blob intensities must satisfy 0 <= low <= high <= 1");
  }
}

ImageSample synthetic_image(const SyntheticImageSpec& spec, int label, Rng& rng) {
  spec.validate();
  if (label < 0 || static_cast<std::size_t>(label) >= spec.num_classes) {
    throw LabelError("image label " + std::to_string(label) + " outside [0, " + std::to_string(spec.num_classes) +
                     ")");
  }
  ImageSample s;
  s.label = label;
  s.pixels = Tensor({spec.size, spec.size, 1});
  for (auto& v : s.pixels.values()) v = spec.background_noise * rng.uniform();
  const std::size_t cell = spec.cell(), slack = cell - spec.blob;
  const std::size_t cy = static_cast<std::size_t>(label) / spec.grid, cx = static_cast<std::size_t>(label) % spec.grid;
  const std::size_t y0 = cy * cell + rng.below(slack + 1), x0 = cx * cell + rng.below(slack + 1);
  const double intensity = rng.uniform(spec.intensity_low, spec.intensity_high);
  for (std::size_t y = y0; y < y0 + spec.blob; ++y)
    for (std::size_t x = x0; x < x0 + spec.blob; ++x) s.pixels[y * spec.size + x] = intensity;
  s.box = BoundingBox{x0, y0, x0 + spec.blob, y0 + spec.blob};
  return s;
}

std::vector<ImageSample> generate_synthetic_images(const SyntheticImageSpec& spec, std::size_t count, Rng& rng) {
  std::vector<ImageSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(rng.below(spec.num_classes));
    out.push_back(synthetic_image(spec, label, rng));
  }
  return out;
}

std::vector<FrameTrial> generate_synthetic_video(const SyntheticTaskSpec& task, const SyntheticImageSpec& images,
                                                 std::size_t count, std::size_t stride, Rng& rng) {
  if (task.num_classes != images.num_classes) throw ConfigError("task and image specs disagree on num_classes");
  if (stride == 0) throw ConfigError("frame stride must be positive");
  const auto labels = generate_label_sequences(task, count, rng);
  const std::size_t px = images.size * images.size;
  std::vector<FrameTrial> out;
  for (std::size_t i = 0; i < count; ++i) {
    FrameTrial trial;
    trial.trial_id = trial_name(i);
    trial.labels = labels[i];
    trial.frames = Tensor({labels[i].size(), images.size, images.size, 1});
    for (std::size_t t = 0; t < labels[i].size(); ++t) {
      const auto img = synthetic_image(images, labels[i][t], rng);
      std::copy_n(img.pixels.data(), px, trial.frames.data() + t * px);
      trial.frame_indices.push_back(static_cast<long long>(t * stride));
    }
    out.push_back(std::move(trial));
  }
  return out;
}

}  // namespace bml
