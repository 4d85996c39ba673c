#include "bml/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/parallel.hpp"
#include "bml/text.hpp"

namespace bml {

void SequenceSample::validate() const {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw DimensionError("trial '" + trial_id + "': features " + shape_to_string(features.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  if (!frame_indices.empty() && frame_indices.size() != labels.size()) {
    throw DimensionError("trial '" + trial_id + "': frame index count differs from label count");
  }
}

const Tensor& GradientSet::at(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return grads[i];
  throw StructureError("no gradient named " + name);
}

void GradientSet::accumulate(const GradientSet& other) {
  if (other.names != names) throw StructureError("gradient sets have different structure");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto dst = grads[i].values();
    auto src = other.grads[i].values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

void GradientSet::scale(double factor) {
  for (auto& g : grads)
    for (auto& v : g.values()) v *= factor;
}

double GradientSet::global_norm() const {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

IndRnnGradients indrnn_backward(const IndRnnLayerParams& params, const Tensor& x, const Tensor& pre, const Tensor& h,
                                const Tensor& dh) {
  const std::size_t steps = x.rows(), m = x.cols(), n = params.hidden();
  if (pre.shape() != Shape{steps, n} || h.shape() != pre.shape() || dh.shape() != pre.shape()) {
    throw StructureError("indrnn_backward: trace shapes do not match the layer");
  }
  IndRnnGradients g{Tensor({n, m}), Tensor({n}), Tensor({n}), Tensor({steps, m})};
  Tensor delta({steps, n});
  std::vector<double> carry(n, 0.0);
  const double* u = params.u.data();
  for (std::size_t t = steps; t-- > 0;) {
    const double* dht = dh.data() + t * n;
    const double* pt = pre.data() + t * n;
    const double* hprev = t > 0 ? h.data() + (t - 1) * n : nullptr;
    double* dt = delta.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (dht[i] + carry[i]) * activate_grad(pt[i], params.activation);
      dt[i] = d;
      g.db[i] += d;
      if (hprev) g.du[i] += d * hprev[i];
      carry[i] = d * u[i];
    }
  }
  // dW = deltaᵀ x, dx = delta W
  for (std::size_t t = 0; t < steps; ++t) {
    const double* dt = delta.data() + t * n;
    const double* xt = x.data() + t * m;
    double* dxt = g.dx.data() + t * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = dt[i];
      if (d == 0.0) continue;
      double* dwi = g.dW.data() + i * m;
      const double* wi = params.W.data() + i * m;
      for (std::size_t k = 0; k < m; ++k) {
        dwi[k] += d * xt[k];
        dxt[k] += d * wi[k];
      }
    }
  }
  return g;
}

BackwardResult bptt_backward(const BmlIndRnnModel& model, const ForwardTrace& trace, std::span<const int> labels) {
  const auto& layers = model.layers();
  if (trace.layers.size() != layers.size() || trace.logits.rank() != 2 ||
      trace.logits.cols() != model.num_classes()) {
    throw StructureError("trace was not produced by this model");
  }
  const std::size_t steps = trace.logits.rows();
  if (labels.size() != steps) {
    throw StructureError("bptt_backward: " + std::to_string(labels.size()) + " labels for " + std::to_string(steps) +
                         " frames");
  }
  auto ce = softmax_cross_entropy(trace.logits, labels);
  BackwardResult res{ce.loss, GradientSet::zeros_like(model.parameters())};

  // Parameter order: per layer forward W,u,b [backward W,u,b], then head W,b.
  const bool bidir = model.fusion() != Fusion::forward_only;
  const std::size_t per_layer = bidir ? 6 : 3;
  const std::size_t head_index = per_layer * layers.size();
  Tensor& d_head_w = res.grads.grads[head_index];
  Tensor& d_head_b = res.grads.grads[head_index + 1];

  const Tensor& top = trace.layers.back().output;
  const std::size_t width = top.cols();
  const std::size_t c = model.num_classes();
  Tensor dz({steps, width});
  const Tensor& hw = model.head_weight();
  for (std::size_t t = 0; t < steps; ++t) {
    const double* dl = ce.dlogits.data() + t * c;
    const double* zt = top.data() + t * width;
    double* dzt = dz.data() + t * width;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = dl[j];
      d_head_b[j] += d;
      double* dw = d_head_w.data() + j * width;
      const double* w = hw.data() + j * width;
      for (std::size_t k = 0; k < width; ++k) {
        dw[k] += d * zt[k];
        dzt[k] += d * w[k];
      }
    }
  }

  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    const auto& lt = trace.layers[l];
    const std::size_t n = layer.forward.hidden();
    Tensor dhf({steps, n});
    Tensor dhb;
    if (bidir) dhb = Tensor({steps, n});
    for (std::size_t t = 0; t < steps; ++t) {
      auto src = dz.row(t);
      auto f = dhf.row(t);
      switch (model.fusion()) {
        case Fusion::concat: {
          auto b = dhb.row(t);
          std::copy_n(src.begin(), n, f.begin());
          std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(n), n, b.begin());
          break;
        }
        case Fusion::sum: {
          auto b = dhb.row(t);
          std::copy_n(src.begin(), n, f.begin());
          std::copy_n(src.begin(), n, b.begin());
          break;
        }
        case Fusion::forward_only:
          std::copy_n(src.begin(), n, f.begin());
          break;
      }
    }
    const std::size_t base = per_layer * l;
    auto gf = indrnn_backward(layer.forward, lt.input, lt.forward.pre, lt.forward.h, dhf);
    res.grads.grads[base + 0] = std::move(gf.dW);
    res.grads.grads[base + 1] = std::move(gf.du);
    res.grads.grads[base + 2] = std::move(gf.db);
    Tensor dx = std::move(gf.dx);
    if (bidir) {
      auto gb = indrnn_backward(layer.backward, reverse_rows(lt.input), reverse_rows(lt.backward.pre),
                                reverse_rows(lt.backward.h), reverse_rows(dhb));
      res.grads.grads[base + 3] = std::move(gb.dW);
      res.grads.grads[base + 4] = std::move(gb.du);
      res.grads.grads[base + 5] = std::move(gb.db);
      const Tensor dxb = reverse_rows(gb.dx);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dxb[i];
    }
    dz = std::move(dx);
  }
  return res;
}

void sgd_step(BmlIndRnnModel& model, const GradientSet& grads, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
  auto params = model.parameters();
  if (params.size() != grads.grads.size()) throw StructureError("gradient set does not match model parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads.names[i] != params[i].name || grads.grads[i].shape() != params[i].tensor->shape()) {
      throw StructureError("gradient '" + grads.names[i] + "' does not match parameter '" + params[i].name + "'");
    }
    if (!grads.grads[i].all_finite()) throw DivergenceError("non-finite gradient in " + params[i].name);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].tensor->values();
    auto g = grads.grads[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
  model.clamp_recurrent();
}

double TrainConfig::lr_at(std::size_t epoch) const {
  // Evaluated in extended precision and rounded once, so the result stays
  // within one ulp of lr0 * decay^epoch.
  const long double power = std::pow(static_cast<long double>(decay), static_cast<long double>(epoch));
  return static_cast<double>(static_cast<long double>(lr0) * power);
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must lie in (0, 1]");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
}

std::string TrainingLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,mean_loss,frame_accuracy,lr\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << format_double(e.mean_loss) << ',' << format_double(e.frame_accuracy) << ','
       << format_double(e.lr) << '\n';
  }
  return os.str();
}

namespace {

struct SequenceResult {
  double loss = 0.0;
  std::size_t correct = 0;
  GradientSet grads;
};

SequenceResult run_sequence(const BmlIndRnnModel& model, const SequenceSample& s) {
  auto trace = model_forward(model, s.features);
  auto back = bptt_backward(model, trace, s.labels);
  SequenceResult r{back.loss, 0, std::move(back.grads)};
  const auto pred = argmax_rows(trace.logits);
  for (std::size_t t = 0; t < pred.size(); ++t) r.correct += pred[t] == s.labels[t];
  return r;
}

}  // namespace

TrainingLog train(BmlIndRnnModel& model, std::span<const SequenceSample> dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  TrainingLog log;
  if (cfg.epochs == 0) return log;
  if (dataset.empty()) throw ConfigError("training set is empty");
  for (const auto& s : dataset) {
    s.validate();
    if (s.features.cols() != model.input_dim()) {
      throw DimensionError("trial '" + s.trial_id + "' has " + std::to_string(s.features.cols()) +
                           " features, model expects " + std::to_string(model.input_dim()));
    }
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t total_frames = 0;
  for (const auto& s : dataset) total_frames += s.length();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    if (cfg.shuffle) rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      std::vector<SequenceResult> results(count);
      parallel_for(count, cfg.threads, [&](std::size_t i) { results[i] = run_sequence(model, dataset[order[start + i]]); });
      GradientSet batch = std::move(results[0].grads);
      for (std::size_t i = 0; i < count; ++i) {
        if (!std::isfinite(results[i].loss)) {
          throw DivergenceError("loss diverged at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index));
        }
        loss_sum += results[i].loss;
        correct += results[i].correct;
        if (i > 0) batch.accumulate(results[i].grads);
      }
      batch.scale(1.0 / static_cast<double>(count));
      if (cfg.clip_norm > 0.0) {
        const double norm = batch.global_norm();
        if (norm > cfg.clip_norm) batch.scale(cfg.clip_norm / norm);
      }
      try {
        sgd_step(model, batch, lr);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index));
      }
      if (model.max_abs_recurrent() > model.config().u_max) throw StructureError("recurrent clamp violated");
    }
    EpochLog entry{epoch, loss_sum / static_cast<double>(dataset.size()),
                   total_frames ? static_cast<double>(correct) / static_cast<double>(total_frames) : 0.0, lr};
    log.epochs.push_back(entry);
    if (on_epoch) on_epoch(entry, model);
  }
  return log;
}

double sequence_loss(const BmlIndRnnModel& model, const Tensor& x, std::span<const int> labels) {
  return softmax_cross_entropy(model_forward(model, x).logits, labels).loss;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

// True when some ReLU pre-activation has a different sign in `other`.
bool crosses_kink(const BmlIndRnnModel& model, const ForwardTrace& base, const ForwardTrace& other) {
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    auto check = [](const Tensor& a, const Tensor& b) {
      for (std::size_t i = 0; i < a.size(); ++i)
        if ((a[i] > 0.0) != (b[i] > 0.0)) return true;
      return false;
    };
    const auto& layer = model.layers()[l];
    if (layer.forward.activation == Activation::relu &&
        check(base.layers[l].forward.pre, other.layers[l].forward.pre))
      return true;
    if (model.fusion() != Fusion::forward_only && layer.backward.activation == Activation::relu &&
        check(base.layers[l].backward.pre, other.layers[l].backward.pre))
      return true;
  }
  return false;
}

}  // namespace

GradientCheckReport gradient_check(const BmlIndRnnModel& model, const SequenceSample& sample, double tolerance,
                                   double step) {
  sample.validate();
  const auto base_trace = model_forward(model, sample.features);
  const auto analytic = bptt_backward(model, base_trace, sample.labels);
  GradientCheckReport report;
  report.tolerance = tolerance;
  BmlIndRnnModel probe = model;
  auto params = probe.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParameterCheck pc;
    pc.name = params[p].name;
    auto values = params[p].tensor->values();
    const auto& grad = analytic.grads.grads[p];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double orig = values[k];
      values[k] = orig + step;
      const auto plus = model_forward(probe, sample.features);
      values[k] = orig - step;
      const auto minus = model_forward(probe, sample.features);
      values[k] = orig;
      if (crosses_kink(probe, base_trace, plus) || crosses_kink(probe, base_trace, minus)) {
        ++pc.flagged;
        continue;
      }
      const double lp = softmax_cross_entropy(plus.logits, sample.labels).loss;
      const double lm = softmax_cross_entropy(minus.logits, sample.labels).loss;
      const double numeric = (lp - lm) / (2.0 * step);
      const double err = relative_error(grad[k], numeric);
      ++pc.checked;
      if (err >= pc.max_rel_error) {
        pc.max_rel_error = err;
        pc.worst_index = k;
        pc.analytic = grad[k];
        pc.numeric = numeric;
      }
    }
    report.flagged += pc.flagged;
    if (pc.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = pc.max_rel_error;
      report.worst_parameter = pc.name;
    }
    report.parameters.push_back(std::move(pc));
  }
  return report;
}

std::string GradientCheckReport::to_string() const {
  std::ostringstream os;
  os << "gradient check: max relative error " << max_rel_error << " (" << worst_parameter << "), tolerance "
     << tolerance << ", " << flagged << " kink-flagged element(s) -> " << (passed() ? "PASS" : "FAIL") << '\n';
  for (const auto& p : parameters) {
    os << "  " << p.name << ": max rel err " << p.max_rel_error << " over " << p.checked << " element(s)";
    if (p.flagged) os << ", " << p.flagged << " flagged";
    os << '\n';
  }
  return os.str();
}

}  // namespace bml
