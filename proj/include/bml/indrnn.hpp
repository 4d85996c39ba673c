#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "bml/rng.hpp"
#include "bml/tensor.hpp"
#include "bml/tensor_io.hpp"

namespace bml {

// One IndRNN direction: h_t = σ(W x_t + u ⊙ h_{t-1} + b).
struct IndRnnLayerParams {
  Tensor W;  // N x M
  Tensor u;  // N
  Tensor b;  // N
  Activation activation = Activation::relu;
  double u_max = 1.0;

  std::size_t hidden() const { return u.size(); }
  std::size_t input() const { return W.cols(); }

  void validate(std::string_view name) const;
  void clamp_recurrent();

  static IndRnnLayerParams zeros(std::size_t input, std::size_t hidden, Activation act, double u_max);
  // W ~ U(±sqrt(6/(M+N))), u ~ U(0, u_max), b = 0.
  static IndRnnLayerParams random(std::size_t input, std::size_t hidden, Activation act, double u_max, Rng& rng);
};

struct IndRnnOutput {
  Tensor h;    // T x N
  Tensor pre;  // T x N
};

IndRnnOutput indrnn_forward(const IndRnnLayerParams& params, const Tensor& x, const Tensor& h0,
                            std::string_view name = "indrnn");

// How the two directions of a layer are combined.
//   concat       : [h_fwd | h_bwd], width 2N
//   sum          : h_fwd + h_bwd, width N
//   forward_only : h_fwd, width N (unidirectional ablation)
enum class Fusion { concat, sum, forward_only };

std::string_view to_string(Fusion fusion);
Fusion parse_fusion(std::string_view name);

struct BidirectionalLayer {
  IndRnnLayerParams forward;
  IndRnnLayerParams backward;  // unused (but kept zero-sized) when fusion is forward_only
};

struct DirectionTrace {
  Tensor pre;  // T x N, rows aligned with input frames
  Tensor h;    // T x N
};

struct LayerTrace {
  Tensor input;  // T x M
  DirectionTrace forward;
  DirectionTrace backward;
  Tensor output;  // T x width
};

// Output width of a layer with hidden size n under the given fusion.
std::size_t fused_width(std::size_t hidden, Fusion fusion);

Tensor bidirectional_layer_forward(const BidirectionalLayer& layer, const Tensor& x, Fusion fusion = Fusion::concat,
                                   LayerTrace* trace = nullptr, std::string_view name = "layer");

struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden = {64, 64, 64};
  std::size_t num_classes = 10;
  Activation activation = Activation::relu;
  double u_max = 1.0;
  Fusion fusion = Fusion::concat;
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Tensor logits;  // T x C, raw scores
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct ConstNamedTensor {
  std::string name;
  const Tensor* tensor;
};

// Stacked bidirectional IndRNN layers followed by a per-frame linear head.
class BmlIndRnnModel {
 public:
  BmlIndRnnModel() = default;
  // All-zero parameters.
  explicit BmlIndRnnModel(ModelConfig config);
  static BmlIndRnnModel random(ModelConfig config, Rng& rng);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t num_classes() const noexcept { return config_.num_classes; }
  std::size_t input_dim() const noexcept { return config_.input_dim; }
  Fusion fusion() const noexcept { return config_.fusion; }

  std::vector<BidirectionalLayer>& layers() noexcept { return layers_; }
  const std::vector<BidirectionalLayer>& layers() const noexcept { return layers_; }
  Tensor& head_weight() noexcept { return head_w_; }
  const Tensor& head_weight() const noexcept { return head_w_; }
  Tensor& head_bias() noexcept { return head_b_; }
  const Tensor& head_bias() const noexcept { return head_b_; }

  // Stable parameter enumeration; names look like "layers.1.backward.u".
  std::vector<NamedTensor> parameters();
  std::vector<ConstNamedTensor> parameters() const;

  void clamp_recurrent();
  double max_abs_recurrent() const;
  void validate() const;

  std::string summary() const;

  Checkpoint to_checkpoint() const;
  static BmlIndRnnModel from_checkpoint(const Checkpoint& ckpt);

 private:
  ModelConfig config_;
  std::vector<BidirectionalLayer> layers_;
  Tensor head_w_;  // C x width
  Tensor head_b_;  // C
};

ForwardTrace model_forward(const BmlIndRnnModel& model, const Tensor& x);
// Per-frame argmax of the logits; ties resolve to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);
std::vector<int> predict_labels(const BmlIndRnnModel& model, const Tensor& x);

}  // namespace bml
