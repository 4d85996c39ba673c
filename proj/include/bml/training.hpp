#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bml/indrnn.hpp"
#include "bml/sequence.hpp"

namespace bml {

// One gradient tensor per model parameter, in model.parameters() order.
struct GradientSet {
  std::vector<std::string> names;
  std::vector<Tensor> grads;

  template <typename Params>
  static GradientSet zeros_like(const Params& params) {
    GradientSet g;
    for (const auto& p : params) {
      g.names.push_back(p.name);
      g.grads.emplace_back(p.tensor->shape());
    }
    return g;
  }

  const Tensor& at(const std::string& name) const;
  void accumulate(const GradientSet& other);
  void scale(double factor);
  double global_norm() const;
};

struct IndRnnGradients {
  Tensor dW;
  Tensor du;
  Tensor db;
  Tensor dx;
};

// Backpropagation through one time-forward IndRNN pass with zero initial state.
IndRnnGradients indrnn_backward(const IndRnnLayerParams& params, const Tensor& x, const Tensor& pre, const Tensor& h,
                                const Tensor& dh);

struct BackwardResult {
  double loss = 0.0;
  GradientSet grads;
};

// Exact gradients of the mean frame-wise cross-entropy.
BackwardResult bptt_backward(const BmlIndRnnModel& model, const ForwardTrace& trace, std::span<const int> labels);

// p <- p - lr * g for every parameter, then |u| is clamped to u_max.
void sgd_step(BmlIndRnnModel& model, const GradientSet& grads, double lr);

struct TrainConfig {
  double lr0 = 0.01;
  double decay = 0.95;
  std::size_t batch_size = 10;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  bool shuffle = true;
  // Global-norm clip threshold; 0 disables clipping.
  double clip_norm = 0.0;
  std::size_t threads = 1;

  // lr0 * decay^epoch, evaluated in closed form.
  double lr_at(std::size_t epoch) const;
  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double frame_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainingLog {
  std::vector<EpochLog> epochs;
  // Header "epoch,mean_loss,frame_accuracy,lr" then one row per epoch.
  std::string to_csv() const;
};

using EpochCallback = std::function<void(const EpochLog&, const BmlIndRnnModel&)>;

// Mini-batch SGD over whole sequences. Loss and accuracy in the log are the
// values observed during the epoch's forward passes (before each update).
TrainingLog train(BmlIndRnnModel& model, std::span<const SequenceSample> dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

double sequence_loss(const BmlIndRnnModel& model, const Tensor& x, std::span<const int> labels);

struct ParameterCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  // Elements whose perturbation moved a ReLU pre-activation across zero.
  std::size_t flagged = 0;
};

struct GradientCheckReport {
  std::vector<ParameterCheck> parameters;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t flagged = 0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
  std::string to_string() const;
};

// Relative error used by the gradient checks: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

GradientCheckReport gradient_check(const BmlIndRnnModel& model, const SequenceSample& sample, double tolerance,
                                   double step = 1e-5);

}  // namespace bml
