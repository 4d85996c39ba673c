#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bml/convnet.hpp"
#include "bml/indrnn.hpp"
#include "bml/synthetic.hpp"
#include "bml/training.hpp"

namespace bml {

// Flat "key = value" text. '#' starts a comment; blank lines are ignored.
// A repeated key keeps its last value.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);

  void set(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const noexcept { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

// Every tunable of the synthetic pipeline and the command-line stages.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // Synthetic trials.
  std::size_t trials = 12;
  std::size_t frame_stride = 5;
  SyntheticTaskSpec task;
  SyntheticImageSpec image;

  // Source task the CNN is pretrained on before fine-tuning.
  std::size_t source_classes = 16;
  std::size_t source_images = 1600;
  ConvNetConfig cnn;
  TrainConfig cnn_train;

  std::size_t freeze_blocks = 1;  // every block but the last
  bool freeze_fc1 = false;
  TrainConfig finetune_train;

  ModelConfig rnn;
  TrainConfig rnn_train;

  double train_fraction = 0.7;
  double gradcam_alpha = 0.5;

  RunConfig();

  // Unknown keys and malformed values raise ConfigError naming the key.
  void apply(const KeyValueConfig& kv);
  void set(const std::string& key, const std::string& value);
  // Every key with its resolved value, one "key = value" line each.
  std::string to_text() const;
  static std::vector<std::string> keys();

  // Cross-field checks; ConfigError on the first problem found.
  void validate() const;

  // Image spec for the source task (same geometry, more classes).
  SyntheticImageSpec source_image_spec() const;
  // CNN shape for a given number of output classes.
  ConvNetConfig cnn_config(std::size_t num_classes) const;
  // RNN shape for a given feature width.
  ModelConfig rnn_config(std::size_t input_dim) const;
};

RunConfig load_run_config(const std::string& path);

}  // namespace bml
