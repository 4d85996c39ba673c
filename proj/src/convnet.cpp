#include "bml/convnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bml/errors.hpp"
#include "bml/parallel.hpp"
#include "bml/text.hpp"

namespace bml {

ConvNetConfig ConvNetConfig::vgg16_shape(std::size_t num_classes) {
  ConvNetConfig c;
  c.height = 224;
  c.width = 224;
  c.channels = 3;
  c.block_channels = {64, 128, 256, 512, 512};
  c.block_convs = {2, 2, 3, 3, 3};
  c.feature_dim = 4096;
  c.num_classes = num_classes;
  return c;
}

void ConvNetConfig::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("convnet input dimensions must be positive");
  if (block_channels.empty()) throw ConfigError("convnet needs at least one block");
  if (block_convs.size() != block_channels.size()) {
    throw ConfigError("convnet: " + std::to_string(block_convs.size()) + " conv counts for " +
                      std::to_string(block_channels.size()) + " blocks");
  }
  for (std::size_t b = 0; b < block_channels.size(); ++b) {
    if (block_channels[b] == 0 || block_convs[b] == 0) {
      throw ConfigError("convnet block " + std::to_string(b) + " must have channels and convolutions");
    }
  }
  if (final_map_height() < 2 || final_map_width() < 2) {
    throw ConfigError("convnet input " + std::to_string(height) + "x" + std::to_string(width) + " is too small for " +
                      std::to_string(block_channels.size()) + " pooling stages");
  }
  if (feature_dim == 0 || num_classes == 0) throw ConfigError("convnet feature_dim and num_classes must be positive");
}

std::size_t ConvNetConfig::final_map_height() const {
  std::size_t h = height;
  for (std::size_t b = 0; b + 1 < block_channels.size(); ++b) h /= 2;
  return h;
}

std::size_t ConvNetConfig::final_map_width() const {
  std::size_t w = width;
  for (std::size_t b = 0; b + 1 < block_channels.size(); ++b) w /= 2;
  return w;
}

std::size_t ConvNetConfig::flat_dim() const {
  return block_channels.back() * (final_map_height() / 2) * (final_map_width() / 2);
}

ConvNetModel::ConvNetModel(ConvNetConfig config) : config_(std::move(config)) {
  config_.validate();
  std::size_t in = config_.channels;
  for (std::size_t b = 0; b < config_.block_channels.size(); ++b) {
    ConvBlock block;
    const std::size_t out = config_.block_channels[b];
    for (std::size_t c = 0; c < config_.block_convs[b]; ++c) {
      block.convs.push_back(ConvLayer{Tensor({out, in, 3, 3}), Tensor({out})});
      in = out;
    }
    blocks_.push_back(std::move(block));
  }
  fc1_w_ = Tensor({config_.feature_dim, config_.flat_dim()});
  fc1_b_ = Tensor({config_.feature_dim});
  head_w_ = Tensor({config_.num_classes, config_.feature_dim});
  head_b_ = Tensor({config_.num_classes});
}

namespace {

void fill_uniform(Tensor& t, double limit, Rng& rng) {
  for (auto& v : t.values()) v = rng.uniform(-limit, limit);
}

}  // namespace

ConvNetModel ConvNetModel::random(ConvNetConfig config, Rng& rng) {
  ConvNetModel m(std::move(config));
  // He-uniform for ReLU layers.
  for (auto& block : m.blocks_) {
    for (auto& conv : block.convs) {
      const double fan_in = static_cast<double>(conv.weight.dim(1) * 9);
      fill_uniform(conv.weight, std::sqrt(6.0 / fan_in), rng);
    }
  }
  fill_uniform(m.fc1_w_, std::sqrt(6.0 / static_cast<double>(m.fc1_w_.cols())), rng);
  m.replace_head(m.config_.num_classes, rng);
  return m;
}

void ConvNetModel::freeze_prefix(std::size_t k) {
  if (k > blocks_.size()) {
    throw ConfigError("cannot freeze " + std::to_string(k) + " blocks of a " + std::to_string(blocks_.size()) +
                      "-block network");
  }
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].frozen = b < k;
}

void ConvNetModel::replace_head(std::size_t num_classes, Rng& rng) {
  if (num_classes == 0) throw ConfigError("head needs at least one class");
  config_.num_classes = num_classes;
  head_w_ = Tensor({num_classes, config_.feature_dim});
  head_b_ = Tensor({num_classes});
  fill_uniform(head_w_, std::sqrt(6.0 / static_cast<double>(num_classes + config_.feature_dim)), rng);
}

std::vector<NamedTensor> ConvNetModel::parameters() {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t c = 0; c < blocks_[b].convs.size(); ++c) {
      const std::string base = "blocks." + std::to_string(b) + ".conv" + std::to_string(c);
      out.push_back({base + ".weight", &blocks_[b].convs[c].weight});
      out.push_back({base + ".bias", &blocks_[b].convs[c].bias});
    }
  }
  out.push_back({"fc1.weight", &fc1_w_});
  out.push_back({"fc1.bias", &fc1_b_});
  out.push_back({"head.weight", &head_w_});
  out.push_back({"head.bias", &head_b_});
  return out;
}

std::vector<ConstNamedTensor> ConvNetModel::parameters() const {
  std::vector<ConstNamedTensor> out;
  for (auto& p : const_cast<ConvNetModel*>(this)->parameters()) out.push_back({p.name, p.tensor});
  return out;
}

std::vector<bool> ConvNetModel::trainable_mask() const {
  std::vector<bool> mask;
  for (const auto& block : blocks_)
    for (std::size_t c = 0; c < block.convs.size(); ++c) mask.insert(mask.end(), 2, !block.frozen);
  mask.insert(mask.end(), 2, !fc1_frozen_);
  mask.insert(mask.end(), 2, true);
  return mask;
}

std::uint64_t ConvNetModel::block_hash(std::size_t block) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& conv : blocks_.at(block).convs) {
    h = hash_bytes(conv.weight.values(), h);
    h = hash_bytes(conv.bias.values(), h);
  }
  return h;
}

std::uint64_t ConvNetModel::frozen_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (!blocks_[b].frozen) continue;
    for (const auto& conv : blocks_[b].convs) {
      h = hash_bytes(conv.weight.values(), h);
      h = hash_bytes(conv.bias.values(), h);
    }
  }
  return h;
}

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  for (auto part : split(text, ',')) {
    const long long v = parse_int(part);
    if (v < 0) throw ParseError("negative size '" + std::string(part) + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace

Checkpoint ConvNetModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.set("model", "convnet");
  ckpt.set("height", std::to_string(config_.height));
  ckpt.set("width", std::to_string(config_.width));
  ckpt.set("channels", std::to_string(config_.channels));
  ckpt.set("block_channels", join_sizes(config_.block_channels));
  ckpt.set("block_convs", join_sizes(config_.block_convs));
  ckpt.set("feature_dim", std::to_string(config_.feature_dim));
  ckpt.set("num_classes", std::to_string(config_.num_classes));
  std::vector<std::size_t> frozen;
  for (const auto& b : blocks_) frozen.push_back(b.frozen ? 1 : 0);
  ckpt.set("frozen_blocks", join_sizes(frozen));
  ckpt.set("fc1_frozen", fc1_frozen_ ? "1" : "0");
  for (const auto& p : parameters()) ckpt.tensors.emplace_back(p.name, *p.tensor);
  return ckpt;
}

ConvNetModel ConvNetModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.get("model") != "convnet") {
    throw StructureError("checkpoint holds a '" + ckpt.get("model") + "' model, expected convnet");
  }
  ConvNetConfig cfg;
  cfg.height = static_cast<std::size_t>(parse_int(ckpt.get("height")));
  cfg.width = static_cast<std::size_t>(parse_int(ckpt.get("width")));
  cfg.channels = static_cast<std::size_t>(parse_int(ckpt.get("channels")));
  cfg.block_channels = parse_sizes(ckpt.get("block_channels"));
  cfg.block_convs = parse_sizes(ckpt.get("block_convs"));
  cfg.feature_dim = static_cast<std::size_t>(parse_int(ckpt.get("feature_dim")));
  cfg.num_classes = static_cast<std::size_t>(parse_int(ckpt.get("num_classes")));
  ConvNetModel model(cfg);
  const auto frozen = parse_sizes(ckpt.get("frozen_blocks"));
  if (frozen.size() != model.blocks_.size()) throw StructureError("frozen_blocks does not match the block count");
  for (std::size_t b = 0; b < frozen.size(); ++b) model.blocks_[b].frozen = frozen[b] != 0;
  model.fc1_frozen_ = ckpt.get("fc1_frozen") == "1";
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

Tensor to_channel_major(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("image must be H x W x C, got " + shape_to_string(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) out[(k * h + y) * w + x] = image[(y * w + x) * c + k];
  return out;
}

namespace {

// 3x3 convolution with one pixel of zero padding, followed by ReLU.
Tensor conv_relu_forward(const Tensor& in, const ConvLayer& layer) {
  const std::size_t ci = in.dim(0), h = in.dim(1), w = in.dim(2), co = layer.weight.dim(0);
  Tensor out({co, h, w});
  for (std::size_t o = 0; o < co; ++o) {
    double* plane = out.data() + o * h * w;
    std::fill_n(plane, h * w, layer.bias[o]);
    for (std::size_t i = 0; i < ci; ++i) {
      const double* src = in.data() + i * h * w;
      const double* k = layer.weight.data() + (o * ci + i) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
          const double kv = k[ky * 3 + kx];
          for (std::size_t y = y0; y < y1; ++y) {
            double* dst = plane + y * w;
            const double* s = src + (y + dy) * w + dx;
            for (std::size_t x = x0; x < x1; ++x) dst[x] += kv * s[x];
          }
        }
      }
    }
    for (std::size_t j = 0; j < h * w; ++j) plane[j] = plane[j] > 0.0 ? plane[j] : 0.0;
  }
  return out;
}

// dpre is the gradient w.r.t. the pre-activation. Any output pointer may be null.
void conv_backward(const Tensor& in, const ConvLayer& layer, const Tensor& dpre, Tensor* dw, Tensor* db, Tensor* din) {
  const std::size_t ci = in.dim(0), h = in.dim(1), w = in.dim(2), co = layer.weight.dim(0);
  if (din) *din = Tensor({ci, h, w});
  for (std::size_t o = 0; o < co; ++o) {
    const double* g = dpre.data() + o * h * w;
    if (db) {
      double s = 0.0;
      for (std::size_t j = 0; j < h * w; ++j) s += g[j];
      (*db)[o] += s;
    }
    for (std::size_t i = 0; i < ci; ++i) {
      const double* src = in.data() + i * h * w;
      const double* k = layer.weight.data() + (o * ci + i) * 9;
      double* dk = dw ? dw->data() + (o * ci + i) * 9 : nullptr;
      double* dsrc = din ? din->data() + i * h * w : nullptr;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
          const double kv = k[ky * 3 + kx];
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            const double* gr = g + y * w;
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>((y + dy) * w) + dx;
            if (dk) {
              const double* s = src + off;
              for (std::size_t x = x0; x < x1; ++x) acc += gr[x] * s[x];
            }
            if (dsrc) {
              double* d = dsrc + off;
              for (std::size_t x = x0; x < x1; ++x) d[x] += kv * gr[x];
            }
          }
          if (dk) dk[ky * 3 + kx] += acc;
        }
      }
    }
  }
}

// 2x2 max-pool, stride 2, odd trailing rows/columns dropped. Ties go to the
// first cell in row-major order.
void max_pool(const Tensor& in, Tensor& out, std::vector<std::uint32_t>& argmax) {
  const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2), ph = h / 2, pw = w / 2;
  out = Tensor({c, ph, pw});
  argmax.assign(c * ph * pw, 0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < ph; ++y) {
      for (std::size_t x = 0; x < pw; ++x) {
        std::size_t best = (k * h + 2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (k * h + 2 * y + dy) * w + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (k * ph + y) * pw + x;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
}

Tensor unpool(const Tensor& dpooled, const std::vector<std::uint32_t>& argmax, const Shape& source_shape) {
  Tensor d(source_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) d[argmax[o]] += dpooled[o];
  return d;
}

void tail_forward(const ConvNetModel& model, const Tensor& maps, BlockCache& last, ConvCache& cache) {
  max_pool(maps, last.pooled, last.argmax);
  cache.flat = last.pooled.reshaped({last.pooled.size()});
  const auto& cfg = model.config();
  if (cache.flat.size() != model.fc1_weight().cols()) {
    throw DimensionError("final maps " + shape_to_string(maps.shape()) + " do not match fc1 input " +
                         std::to_string(model.fc1_weight().cols()));
  }
  const std::size_t n = cache.flat.size();
  cache.fc1_pre = Tensor({cfg.feature_dim});
  cache.features = Tensor({cfg.feature_dim});
  for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
    const double* wr = model.fc1_weight().data() + j * n;
    double s = model.fc1_bias()[j];
    for (std::size_t k = 0; k < n; ++k) s += wr[k] * cache.flat[k];
    cache.fc1_pre[j] = s;
    cache.features[j] = s > 0.0 ? s : 0.0;
  }
  const std::size_t classes = model.head_weight().rows();
  cache.logits = Tensor({classes});
  for (std::size_t c = 0; c < classes; ++c) {
    const double* wr = model.head_weight().data() + c * cfg.feature_dim;
    double s = model.head_bias()[c];
    for (std::size_t k = 0; k < cfg.feature_dim; ++k) s += wr[k] * cache.features[k];
    cache.logits[c] = s;
  }
}

void check_image(const ConvNetModel& model, const Tensor& image) {
  const auto& cfg = model.config();
  if (image.shape() != Shape{cfg.height, cfg.width, cfg.channels}) {
    throw DimensionError("image shape " + shape_to_string(image.shape()) + " but network expects " +
                         shape_to_string({cfg.height, cfg.width, cfg.channels}));
  }
}

// Backward through head, fc1 and the last pool. Writes head/fc1 gradients
// into `grads` when it is non-null.
Tensor tail_backward(const ConvNetModel& model, const ConvCache& cache, std::span<const double> dlogits,
                     GradientSet* grads) {
  const std::size_t classes = model.head_weight().rows(), f = model.config().feature_dim;
  if (dlogits.size() != classes) {
    throw DimensionError("dlogits has " + std::to_string(dlogits.size()) + " entries for " + std::to_string(classes) +
                         " classes");
  }
  const std::size_t np = grads ? grads->grads.size() : 0;
  Tensor dfeat({f});
  for (std::size_t c = 0; c < classes; ++c) {
    const double d = dlogits[c];
    const double* wr = model.head_weight().data() + c * f;
    for (std::size_t k = 0; k < f; ++k) dfeat[k] += d * wr[k];
    if (grads) {
      grads->grads[np - 1][c] += d;
      double* gw = grads->grads[np - 2].data() + c * f;
      for (std::size_t k = 0; k < f; ++k) gw[k] += d * cache.features[k];
    }
  }
  const std::size_t n = cache.flat.size();
  Tensor dflat({n});
  const bool fc1_grads = grads && !model.fc1_frozen();
  for (std::size_t j = 0; j < f; ++j) {
    if (!(cache.fc1_pre[j] > 0.0)) continue;
    const double d = dfeat[j];
    const double* wr = model.fc1_weight().data() + j * n;
    for (std::size_t k = 0; k < n; ++k) dflat[k] += d * wr[k];
    if (fc1_grads) {
      grads->grads[np - 3][j] += d;
      double* gw = grads->grads[np - 4].data() + j * n;
      for (std::size_t k = 0; k < n; ++k) gw[k] += d * cache.flat[k];
    }
  }
  const auto& last = cache.blocks.back();
  return unpool(dflat.reshaped(last.pooled.shape()), last.argmax, cache.final_maps().shape());
}

}  // namespace

ConvCache cnn_forward(const ConvNetModel& model, const Tensor& image) {
  check_image(model, image);
  ConvCache cache;
  cache.blocks.resize(model.blocks().size());
  Tensor x = to_channel_major(image);
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    auto& bc = cache.blocks[b];
    for (const auto& conv : model.blocks()[b].convs) {
      Tensor out = conv_relu_forward(x, conv);
      bc.convs.push_back(ConvLayerCache{std::move(x), out});
      x = std::move(out);
    }
    if (b + 1 < model.blocks().size()) {
      max_pool(bc.convs.back().output, bc.pooled, bc.argmax);
      x = bc.pooled;
    }
  }
  tail_forward(model, cache.blocks.back().convs.back().output, cache.blocks.back(), cache);
  return cache;
}

Tensor extract_features(const ConvNetModel& model, const Tensor& image) { return cnn_forward(model, image).features; }

Tensor logits_from_final_maps(const ConvNetModel& model, const Tensor& maps, ConvCache* cache) {
  ConvCache local;
  ConvCache& c = cache ? *cache : local;
  if (c.blocks.empty()) c.blocks.resize(1);
  tail_forward(model, maps, c.blocks.back(), c);
  return c.logits;
}

Tensor final_map_gradient(const ConvNetModel& model, const ConvCache& cache, std::span<const double> dlogits) {
  return tail_backward(model, cache, dlogits, nullptr);
}

GradientSet cnn_backward(const ConvNetModel& model, const ConvCache& cache, std::span<const double> dlogits) {
  GradientSet grads = GradientSet::zeros_like(model.parameters());
  Tensor dout = tail_backward(model, cache, dlogits, &grads);

  const auto& blocks = model.blocks();
  std::size_t lowest = blocks.size();
  for (std::size_t b = 0; b < blocks.size(); ++b)
    if (!blocks[b].frozen) {
      lowest = b;
      break;
    }
  std::vector<std::size_t> first_param(blocks.size());
  for (std::size_t b = 0, idx = 0; b < blocks.size(); ++b) {
    first_param[b] = idx;
    idx += 2 * blocks[b].convs.size();
  }
  for (std::size_t b = blocks.size(); b-- > lowest;) {
    const auto& bc = cache.blocks[b];
    if (b + 1 < blocks.size()) dout = unpool(dout, bc.argmax, bc.convs.back().output.shape());
    const bool trainable = !blocks[b].frozen;
    for (std::size_t c = bc.convs.size(); c-- > 0;) {
      const auto& lc = bc.convs[c];
      for (std::size_t j = 0; j < dout.size(); ++j)
        if (!(lc.output[j] > 0.0)) dout[j] = 0.0;
      const bool need_din = b > lowest || c > 0;
      Tensor din;
      Tensor* dw = trainable ? &grads.grads[first_param[b] + 2 * c] : nullptr;
      Tensor* db = trainable ? &grads.grads[first_param[b] + 2 * c + 1] : nullptr;
      conv_backward(lc.input, blocks[b].convs[c], dout, dw, db, need_din ? &din : nullptr);
      if (!need_din) break;
      dout = std::move(din);
    }
  }
  return grads;
}

void sgd_step(ConvNetModel& model, const GradientSet& grads, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
  auto params = model.parameters();
  const auto mask = model.trainable_mask();
  if (params.size() != grads.grads.size()) throw StructureError("gradient set does not match model parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads.names[i] != params[i].name || grads.grads[i].shape() != params[i].tensor->shape()) {
      throw StructureError("gradient '" + grads.names[i] + "' does not match parameter '" + params[i].name + "'");
    }
    if (mask[i] && !grads.grads[i].all_finite()) throw DivergenceError("non-finite gradient in " + params[i].name);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    auto p = params[i].tensor->values();
    auto g = grads.grads[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) p[k] -= lr * g[k];
  }
}

namespace {

struct ImageResult {
  double loss = 0.0;
  bool correct = false;
  GradientSet grads;
};

ImageResult run_image(const ConvNetModel& model, const ImageSample& s) {
  const auto cache = cnn_forward(model, s.pixels);
  const int label = s.label;
  auto ce = softmax_cross_entropy(cache.logits.reshaped({1, cache.logits.size()}), std::span<const int>(&label, 1));
  ImageResult r{ce.loss, argmax_rows(cache.logits.reshaped({1, cache.logits.size()}))[0] == label, {}};
  r.grads = cnn_backward(model, cache, ce.dlogits.values());
  return r;
}

}  // namespace

TrainingLog train_cnn(ConvNetModel& model, std::span<const ImageSample> images, const TrainConfig& cfg) {
  cfg.validate();
  TrainingLog log;
  if (cfg.epochs == 0) return log;
  if (images.empty()) throw ConfigError("image training set is empty");
  for (const auto& s : images) {
    check_image(model, s.pixels);
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= model.config().num_classes) {
      throw LabelError("image label " + std::to_string(s.label) + " outside [0, " +
                       std::to_string(model.config().num_classes) + ")");
    }
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    if (cfg.shuffle) rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t correct = 0, batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      std::vector<ImageResult> results(count);
      parallel_for(count, cfg.threads, [&](std::size_t i) { results[i] = run_image(model, images[order[start + i]]); });
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
      sgd_step(model, batch, lr);
    }
    const double n = static_cast<double>(images.size());
    log.epochs.push_back(EpochLog{epoch, loss_sum / n, static_cast<double>(correct) / n, lr});
  }
  return log;
}

ConvNetModel fine_tune(const ConvNetModel& model, std::span<const ImageSample> images, const FineTuneOptions& opts,
                       const TrainConfig& cfg, TrainingLog* log) {
  ConvNetModel tuned = model;
  Rng head_rng(opts.head_seed);
  tuned.replace_head(opts.num_classes, head_rng);
  tuned.freeze_prefix(opts.freeze_prefix);
  tuned.set_fc1_frozen(opts.freeze_fc1);
  const std::uint64_t before = tuned.frozen_hash();
  auto l = train_cnn(tuned, images, cfg);
  if (tuned.frozen_hash() != before) throw StructureError("frozen blocks changed during fine-tuning");
  if (log) *log = std::move(l);
  return tuned;
}

double image_accuracy(const ConvNetModel& model, std::span<const ImageSample> images) {
  if (images.empty()) throw EmptyEvaluationError("no images to evaluate");
  std::size_t correct = 0;
  for (const auto& s : images) {
    const auto logits = cnn_forward(model, s.pixels).logits;
    correct += argmax_rows(logits.reshaped({1, logits.size()}))[0] == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

}  // namespace bml
