#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "bml/indrnn.hpp"
#include "bml/rng.hpp"
#include "bml/tensor.hpp"
#include "bml/tensor_io.hpp"
#include "bml/training.hpp"

namespace bml {

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct BoundingBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
};

struct ImageSample {
  Tensor pixels;  // H x W x channels, values in [0, 1]
  int label = 0;
  std::optional<BoundingBox> box;
};

struct ConvNetConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::vector<std::size_t> block_channels = {8, 16, 32};
  std::vector<std::size_t> block_convs = {1, 1, 1};  // convolutions per block
  std::size_t feature_dim = 64;
  std::size_t num_classes = 10;

  // Five VGG16-shaped blocks on 224x224x3 input with a 4096-d feature tap.
  static ConvNetConfig vgg16_shape(std::size_t num_classes);
  void validate() const;
  std::size_t flat_dim() const;
  std::size_t final_map_height() const;
  std::size_t final_map_width() const;
};

struct ConvLayer {
  Tensor weight;  // out x in x 3 x 3
  Tensor bias;    // out
};

struct ConvBlock {
  std::vector<ConvLayer> convs;
  bool frozen = false;
};

// Block-structured CNN: [3x3 same conv + ReLU]xK + 2x2 max-pool per block,
// then fc1 + ReLU (the feature vector) and a linear class head.
class ConvNetModel {
 public:
  ConvNetModel() = default;
  explicit ConvNetModel(ConvNetConfig config);  // zero parameters
  static ConvNetModel random(ConvNetConfig config, Rng& rng);

  const ConvNetConfig& config() const noexcept { return config_; }
  std::vector<ConvBlock>& blocks() noexcept { return blocks_; }
  const std::vector<ConvBlock>& blocks() const noexcept { return blocks_; }
  Tensor& fc1_weight() noexcept { return fc1_w_; }
  const Tensor& fc1_weight() const noexcept { return fc1_w_; }
  Tensor& fc1_bias() noexcept { return fc1_b_; }
  const Tensor& fc1_bias() const noexcept { return fc1_b_; }
  Tensor& head_weight() noexcept { return head_w_; }
  const Tensor& head_weight() const noexcept { return head_w_; }
  Tensor& head_bias() noexcept { return head_b_; }
  const Tensor& head_bias() const noexcept { return head_b_; }

  bool fc1_frozen() const noexcept { return fc1_frozen_; }
  void set_fc1_frozen(bool frozen) noexcept { fc1_frozen_ = frozen; }
  // Freezes blocks [0, k) and unfreezes the rest.
  void freeze_prefix(std::size_t k);
  // Fresh class head with Glorot-uniform weights and zero bias.
  void replace_head(std::size_t num_classes, Rng& rng);

  std::vector<NamedTensor> parameters();
  std::vector<ConstNamedTensor> parameters() const;
  // Parallel to parameters(): true where the parameter may be updated.
  std::vector<bool> trainable_mask() const;

  std::uint64_t block_hash(std::size_t block) const;
  // Hash over the bytes of every frozen block, in block order.
  std::uint64_t frozen_hash() const;

  Checkpoint to_checkpoint() const;
  static ConvNetModel from_checkpoint(const Checkpoint& ckpt);

 private:
  ConvNetConfig config_;
  std::vector<ConvBlock> blocks_;
  Tensor fc1_w_, fc1_b_, head_w_, head_b_;
  bool fc1_frozen_ = false;
};

struct ConvLayerCache {
  Tensor input;   // C_in x H x W
  Tensor output;  // C_out x H x W, post-ReLU
};

struct BlockCache {
  std::vector<ConvLayerCache> convs;
  Tensor pooled;
  std::vector<std::uint32_t> argmax;  // flat source index per pooled cell
};

struct ConvCache {
  std::vector<BlockCache> blocks;
  Tensor flat;
  Tensor fc1_pre;
  Tensor features;
  Tensor logits;

  // A^k: post-ReLU output of the last convolution, channels x h x w.
  const Tensor& final_maps() const { return blocks.back().convs.back().output; }
};

// Image (H x W x C) to channel-major layout (C x H x W).
Tensor to_channel_major(const Tensor& image);

ConvCache cnn_forward(const ConvNetModel& model, const Tensor& image);
Tensor extract_features(const ConvNetModel& model, const Tensor& image);
// Pooling, fc1 and head applied to given final maps; fills the tail of `cache` when provided.
Tensor logits_from_final_maps(const ConvNetModel& model, const Tensor& maps, ConvCache* cache = nullptr);

// Gradient of the loss w.r.t. the final conv maps, given dL/dlogits.
Tensor final_map_gradient(const ConvNetModel& model, const ConvCache& cache, std::span<const double> dlogits);

// Parameter gradients (zeros for frozen parameters).
GradientSet cnn_backward(const ConvNetModel& model, const ConvCache& cache, std::span<const double> dlogits);

// Updates trainable parameters only; frozen tensors are never written.
void sgd_step(ConvNetModel& model, const GradientSet& grads, double lr);

TrainingLog train_cnn(ConvNetModel& model, std::span<const ImageSample> images, const TrainConfig& cfg);

struct FineTuneOptions {
  std::size_t freeze_prefix = 0;
  std::size_t num_classes = 10;
  bool freeze_fc1 = false;
  std::uint64_t head_seed = 0;
};

// Replaces the head, freezes blocks [0, freeze_prefix) and trains the rest.
ConvNetModel fine_tune(const ConvNetModel& model, std::span<const ImageSample> images, const FineTuneOptions& opts,
                       const TrainConfig& cfg, TrainingLog* log = nullptr);

double image_accuracy(const ConvNetModel& model, std::span<const ImageSample> images);

}  // namespace bml
