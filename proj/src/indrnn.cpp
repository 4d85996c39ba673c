#include "bml/indrnn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/text.hpp"

namespace bml {

void IndRnnLayerParams::validate(std::string_view name) const {
  const std::size_t n = u.size();
  if (u.rank() != 1 || b.rank() != 1 || W.rank() != 2 || b.size() != n || W.rows() != n) {
    throw DimensionError(std::string(name) + ": inconsistent parameter shapes W" + shape_to_string(W.shape()) +
                         " u" + shape_to_string(u.shape()) + " b" + shape_to_string(b.shape()));
  }
  if (!(u_max >= 0.0)) throw ConfigError(std::string(name) + ": u_max must be non-negative");
}

void IndRnnLayerParams::clamp_recurrent() {
  for (auto& v : u.values()) v = std::clamp(v, -u_max, u_max);
}

IndRnnLayerParams IndRnnLayerParams::zeros(std::size_t input, std::size_t hidden, Activation act, double u_max) {
  return {Tensor({hidden, input}), Tensor({hidden}), Tensor({hidden}), act, u_max};
}

IndRnnLayerParams IndRnnLayerParams::random(std::size_t input, std::size_t hidden, Activation act, double u_max,
                                            Rng& rng) {
  auto p = zeros(input, hidden, act, u_max);
  const double limit = std::sqrt(6.0 / static_cast<double>(input + hidden));
  for (auto& w : p.W.values()) w = rng.uniform(-limit, limit);
  for (auto& v : p.u.values()) v = rng.uniform(0.0, u_max);
  return p;
}

IndRnnOutput indrnn_forward(const IndRnnLayerParams& params, const Tensor& x, const Tensor& h0,
                            std::string_view name) {
  params.validate(name);
  const std::size_t n = params.hidden();
  if (x.rank() != 2 || x.cols() != params.input()) {
    throw DimensionError(std::string(name) + ": input shape " + shape_to_string(x.shape()) + " but W is " +
                         shape_to_string(params.W.shape()));
  }
  if (x.rows() == 0) throw DimensionError(std::string(name) + ": empty sequence");
  if (h0.size() != n) {
    throw DimensionError(std::string(name) + ": initial state shape " + shape_to_string(h0.shape()) +
                         ", expected [" + std::to_string(n) + "]");
  }
  const std::size_t steps = x.rows();
  IndRnnOutput out{Tensor({steps, n}), matmul_transposed(x, params.W)};
  const double* u = params.u.data();
  const double* b = params.b.data();
  const double* prev = h0.data();
  for (std::size_t t = 0; t < steps; ++t) {
    double* pre = out.pre.data() + t * n;
    double* h = out.h.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) {
      pre[i] = pre[i] + u[i] * prev[i] + b[i];
      h[i] = activate(pre[i], params.activation);
    }
    prev = h;
  }
  return out;
}

std::string_view to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::concat:
      return "concat";
    case Fusion::sum:
      return "sum";
    case Fusion::forward_only:
      return "forward_only";
  }
  return "concat";
}

Fusion parse_fusion(std::string_view name) {
  if (name == "concat") return Fusion::concat;
  if (name == "sum") return Fusion::sum;
  if (name == "forward_only") return Fusion::forward_only;
  throw ConfigError("unknown fusion '" + std::string(name) + "' (expected concat, sum or forward_only)");
}

std::size_t fused_width(std::size_t hidden, Fusion fusion) { return fusion == Fusion::concat ? 2 * hidden : hidden; }

Tensor bidirectional_layer_forward(const BidirectionalLayer& layer, const Tensor& x, Fusion fusion,
                                   LayerTrace* trace, std::string_view name) {
  const std::size_t n = layer.forward.hidden();
  const std::string fname = std::string(name) + ".forward";
  auto fwd = indrnn_forward(layer.forward, x, Tensor({n}), fname);
  const std::size_t steps = x.rows();

  DirectionTrace bwd_trace;
  if (fusion != Fusion::forward_only) {
    if (layer.backward.hidden() != n) {
      throw DimensionError(std::string(name) + ": backward hidden size " + std::to_string(layer.backward.hidden()) +
                           " differs from forward " + std::to_string(n));
    }
    auto bwd = indrnn_forward(layer.backward, reverse_rows(x), Tensor({n}), std::string(name) + ".backward");
    bwd_trace.h = reverse_rows(bwd.h);
    bwd_trace.pre = reverse_rows(bwd.pre);
  }

  Tensor out({steps, fused_width(n, fusion)});
  for (std::size_t t = 0; t < steps; ++t) {
    auto o = out.row(t);
    auto hf = fwd.h.row(t);
    switch (fusion) {
      case Fusion::concat: {
        auto hb = bwd_trace.h.row(t);
        std::copy(hf.begin(), hf.end(), o.begin());
        std::copy(hb.begin(), hb.end(), o.begin() + static_cast<std::ptrdiff_t>(n));
        break;
      }
      case Fusion::sum: {
        auto hb = bwd_trace.h.row(t);
        for (std::size_t i = 0; i < n; ++i) o[i] = hf[i] + hb[i];
        break;
      }
      case Fusion::forward_only:
        std::copy(hf.begin(), hf.end(), o.begin());
        break;
    }
  }
  if (trace) {
    trace->input = x;
    trace->forward = {std::move(fwd.pre), std::move(fwd.h)};
    trace->backward = std::move(bwd_trace);
    trace->output = out;
  }
  return out;
}

BmlIndRnnModel::BmlIndRnnModel(ModelConfig config) : config_(std::move(config)) {
  if (config_.input_dim == 0) throw ConfigError("model input_dim must be positive");
  if (config_.hidden.empty()) throw ConfigError("model needs at least one layer");
  if (config_.num_classes == 0) throw ConfigError("model needs at least one class");
  if (!(config_.u_max >= 0.0)) throw ConfigError("u_max must be non-negative");
  std::size_t in = config_.input_dim;
  for (auto n : config_.hidden) {
    if (n == 0) throw ConfigError("hidden sizes must be positive");
    BidirectionalLayer layer;
    layer.forward = IndRnnLayerParams::zeros(in, n, config_.activation, config_.u_max);
    layer.backward = config_.fusion == Fusion::forward_only
                         ? IndRnnLayerParams::zeros(in, 0, config_.activation, config_.u_max)
                         : IndRnnLayerParams::zeros(in, n, config_.activation, config_.u_max);
    layers_.push_back(std::move(layer));
    in = fused_width(n, config_.fusion);
  }
  head_w_ = Tensor({config_.num_classes, in});
  head_b_ = Tensor({config_.num_classes});
}

BmlIndRnnModel BmlIndRnnModel::random(ModelConfig config, Rng& rng) {
  BmlIndRnnModel model(std::move(config));
  const auto& cfg = model.config_;
  std::size_t in = cfg.input_dim;
  for (std::size_t l = 0; l < model.layers_.size(); ++l) {
    const std::size_t n = cfg.hidden[l];
    auto& layer = model.layers_[l];
    layer.forward = IndRnnLayerParams::random(in, n, cfg.activation, cfg.u_max, rng);
    if (cfg.fusion != Fusion::forward_only) {
      layer.backward = IndRnnLayerParams::random(in, n, cfg.activation, cfg.u_max, rng);
    }
    in = fused_width(n, cfg.fusion);
  }
  const double limit = std::sqrt(6.0 / static_cast<double>(in + cfg.num_classes));
  for (auto& w : model.head_w_.values()) w = rng.uniform(-limit, limit);
  return model;
}

std::vector<NamedTensor> BmlIndRnnModel::parameters() {
  std::vector<NamedTensor> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto add_dir = [&](IndRnnLayerParams& p, const char* dir) {
      out.push_back({prefix + dir + ".W", &p.W});
      out.push_back({prefix + dir + ".u", &p.u});
      out.push_back({prefix + dir + ".b", &p.b});
    };
    add_dir(layers_[l].forward, "forward");
    if (config_.fusion != Fusion::forward_only) add_dir(layers_[l].backward, "backward");
  }
  out.push_back({"head.W", &head_w_});
  out.push_back({"head.b", &head_b_});
  return out;
}

std::vector<ConstNamedTensor> BmlIndRnnModel::parameters() const {
  std::vector<ConstNamedTensor> out;
  for (auto& p : const_cast<BmlIndRnnModel*>(this)->parameters()) out.push_back({std::move(p.name), p.tensor});
  return out;
}

void BmlIndRnnModel::clamp_recurrent() {
  for (auto& layer : layers_) {
    layer.forward.clamp_recurrent();
    layer.backward.clamp_recurrent();
  }
}

double BmlIndRnnModel::max_abs_recurrent() const {
  double m = 0.0;
  for (const auto& layer : layers_) {
    for (double v : layer.forward.u.values()) m = std::max(m, std::abs(v));
    for (double v : layer.backward.u.values()) m = std::max(m, std::abs(v));
  }
  return m;
}

void BmlIndRnnModel::validate() const {
  std::size_t in = config_.input_dim;
  if (layers_.size() != config_.hidden.size()) throw StructureError("layer count disagrees with config");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string name = "layers." + std::to_string(l);
    const auto& layer = layers_[l];
    layer.forward.validate(name + ".forward");
    if (layer.forward.input() != in || layer.forward.hidden() != config_.hidden[l]) {
      throw DimensionError(name + ".forward: expected W [" + std::to_string(config_.hidden[l]) + "x" +
                           std::to_string(in) + "], got " + shape_to_string(layer.forward.W.shape()));
    }
    if (config_.fusion != Fusion::forward_only) {
      layer.backward.validate(name + ".backward");
      if (layer.backward.W.shape() != layer.forward.W.shape()) {
        throw DimensionError(name + ".backward: W shape " + shape_to_string(layer.backward.W.shape()) +
                             " differs from forward " + shape_to_string(layer.forward.W.shape()));
      }
    }
    in = fused_width(config_.hidden[l], config_.fusion);
  }
  if (head_w_.shape() != Shape{config_.num_classes, in} || head_b_.shape() != Shape{config_.num_classes}) {
    throw DimensionError("head: expected [" + std::to_string(config_.num_classes) + "x" + std::to_string(in) +
                         "], got " + shape_to_string(head_w_.shape()));
  }
}

std::string BmlIndRnnModel::summary() const {
  std::ostringstream os;
  os << "BML-IndRNN: input " << config_.input_dim << ", " << layers_.size() << " layer(s), fusion "
     << to_string(config_.fusion) << ", activation " << to_string(config_.activation) << ", u_max "
     << format_double(config_.u_max) << '\n';
  std::size_t in = config_.input_dim;
  std::size_t total = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::size_t n = config_.hidden[l];
    const std::size_t out = fused_width(n, config_.fusion);
    const std::size_t dirs = config_.fusion == Fusion::forward_only ? 1 : 2;
    const std::size_t params = dirs * (n * in + 2 * n);
    total += params;
    os << "  layer " << l << ": " << in << " -> " << n << " per direction x" << dirs << " -> " << out << " ("
       << params << " params)\n";
    in = out;
  }
  const std::size_t head = config_.num_classes * (in + 1);
  total += head;
  os << "  head: " << in << " -> " << config_.num_classes << " (" << head << " params)\n";
  os << "  total parameters: " << total << '\n';
  return os.str();
}

Checkpoint BmlIndRnnModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.set("model", "bml_indrnn");
  ckpt.set("input_dim", std::to_string(config_.input_dim));
  std::string hidden;
  for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
    if (i) hidden += ',';
    hidden += std::to_string(config_.hidden[i]);
  }
  ckpt.set("hidden", hidden);
  ckpt.set("num_classes", std::to_string(config_.num_classes));
  ckpt.set("activation", std::string(to_string(config_.activation)));
  ckpt.set("u_max", format_double(config_.u_max));
  ckpt.set("fusion", std::string(to_string(config_.fusion)));
  for (const auto& p : parameters()) ckpt.tensors.emplace_back(p.name, *p.tensor);
  return ckpt;
}

BmlIndRnnModel BmlIndRnnModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.get("model") != "bml_indrnn") {
    throw StructureError("checkpoint holds a '" + ckpt.get("model") + "' model, expected bml_indrnn");
  }
  ModelConfig cfg;
  cfg.input_dim = static_cast<std::size_t>(parse_int(ckpt.get("input_dim")));
  cfg.hidden.clear();
  for (auto part : split(ckpt.get("hidden"), ',')) cfg.hidden.push_back(static_cast<std::size_t>(parse_int(part)));
  cfg.num_classes = static_cast<std::size_t>(parse_int(ckpt.get("num_classes")));
  cfg.activation = parse_activation(ckpt.get("activation"));
  cfg.u_max = parse_double(ckpt.get("u_max"));
  cfg.fusion = parse_fusion(ckpt.get("fusion"));
  BmlIndRnnModel model(cfg);
  for (auto& p : model.parameters()) {
    const Tensor& t = ckpt.tensor(p.name);
    if (t.shape() != p.tensor->shape()) {
      throw DimensionError("checkpoint tensor " + p.name + " has shape " + shape_to_string(t.shape()) +
                           ", expected " + shape_to_string(p.tensor->shape()));
    }
    *p.tensor = t;
  }
  return model;
}

ForwardTrace model_forward(const BmlIndRnnModel& model, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != model.input_dim()) {
    throw DimensionError("layer 0: input shape " + shape_to_string(x.shape()) + " but model expects " +
                         std::to_string(model.input_dim()) + " features");
  }
  ForwardTrace trace;
  trace.layers.resize(model.layers().size());
  const Tensor* in = &x;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    bidirectional_layer_forward(model.layers()[l], *in, model.fusion(), &trace.layers[l],
                                "layer " + std::to_string(l));
    in = &trace.layers[l].output;
  }
  const Tensor& head_w = model.head_weight();
  if (head_w.cols() != in->cols()) {
    throw DimensionError("head: expects width " + std::to_string(head_w.cols()) + ", got " +
                         std::to_string(in->cols()));
  }
  trace.logits = matmul_transposed(*in, head_w);
  const std::size_t c = model.num_classes();
  for (std::size_t t = 0; t < trace.logits.rows(); ++t)
    for (std::size_t j = 0; j < c; ++j) trace.logits(t, j) += model.head_bias()[j];
  return trace;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    auto r = logits.row(t);
    out[t] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

std::vector<int> predict_labels(const BmlIndRnnModel& model, const Tensor& x) {
  return argmax_rows(model_forward(model, x).logits);
}

}  // namespace bml
