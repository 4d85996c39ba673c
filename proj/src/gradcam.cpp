#include "bml/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <vector>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/text.hpp"

namespace bml {

Tensor gradcam_combine(const Tensor& maps, const Tensor& grads, Tensor* channel_weights) {
  if (maps.rank() != 3 || grads.shape() != maps.shape()) {
    throw DimensionError("grad-cam: maps " + shape_to_string(maps.shape()) + " and gradients " +
                         shape_to_string(grads.shape()) + " must both be K x h x w");
  }
  const std::size_t k = maps.dim(0), cells = maps.dim(1) * maps.dim(2);
  Tensor alpha({k});
  Tensor raw({maps.dim(1), maps.dim(2)});
  for (std::size_t c = 0; c < k; ++c) {
    const double* g = grads.data() + c * cells;
    double s = 0.0;
    for (std::size_t i = 0; i < cells; ++i) s += g[i];
    alpha[c] = s / static_cast<double>(cells);
    const double* a = maps.data() + c * cells;
    for (std::size_t i = 0; i < cells; ++i) raw[i] += alpha[c] * a[i];
  }
  for (auto& v : raw.values()) v = v > 0.0 ? v : 0.0;
  if (channel_weights) *channel_weights = std::move(alpha);
  return raw;
}

Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width) {
  if (map.rank() != 2 || map.size() == 0) throw DimensionError("upsample expects a non-empty 2-d map");
  if (height == 0 || width == 0) throw DimensionError("upsample target must be non-empty");
  const std::size_t h = map.rows(), w = map.cols();
  auto source = [](std::size_t dst, std::size_t n_src, std::size_t n_dst, std::size_t& i0, std::size_t& i1,
                   double& frac) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(n_src) / static_cast<double>(n_dst) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n_src - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, n_src - 1);
    frac = s - static_cast<double>(i0);
  };
  Tensor out({height, width});
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, h, height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, w, width, x0, x1, fx);
      const double top = (1.0 - fx) * map(y0, x0) + fx * map(y0, x1);
      const double bottom = (1.0 - fx) * map(y1, x0) + fx * map(y1, x1);
      out(y, x) = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

Tensor normalize_by_max(const Tensor& map) {
  double m = 0.0;
  for (double v : map.values()) m = std::max(m, v);
  Tensor out = map;
  if (m > 0.0) {
    for (auto& v : out.values()) v = std::clamp(v / m, 0.0, 1.0);
  } else {
    out.fill(0.0);
  }
  return out;
}

Heatmap grad_cam(const ConvNetModel& model, const Tensor& image, int target_class) {
  const std::size_t classes = model.head_weight().rows();
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= classes) {
    throw LabelError("grad-cam target class " + std::to_string(target_class) + " outside [0, " +
                     std::to_string(classes) + ")");
  }
  const auto cache = cnn_forward(model, image);
  std::vector<double> dscore(classes, 0.0);
  dscore[static_cast<std::size_t>(target_class)] = 1.0;
  const Tensor grads = final_map_gradient(model, cache, dscore);
  Heatmap hm;
  hm.source_class = target_class;
  hm.raw = gradcam_combine(cache.final_maps(), grads, &hm.channel_weights);
  hm.values = normalize_by_max(upsample_bilinear(hm.raw, image.dim(0), image.dim(1)));
  return hm;
}

int predicted_class(const ConvNetModel& model, const Tensor& image) {
  const auto logits = cnn_forward(model, image).logits;
  return argmax_rows(logits.reshaped({1, logits.size()}))[0];
}

std::array<double, 3> colormap(double v) {
  static constexpr double stops[5][3] = {{0, 0, 1}, {0, 1, 1}, {0, 1, 0}, {1, 1, 0}, {1, 0, 0}};
  const double t = std::clamp(std::isnan(v) ? 0.0 : v, 0.0, 1.0) * 4.0;
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(t), 3);
  const double f = t - static_cast<double>(i);
  std::array<double, 3> rgb{};
  for (std::size_t c = 0; c < 3; ++c) rgb[c] = (1.0 - f) * stops[i][c] + f * stops[i + 1][c];
  return rgb;
}

Tensor colorize(const Tensor& heatmap) {
  if (heatmap.rank() != 2) throw DimensionError("heatmap must be 2-d");
  Tensor out({heatmap.rows(), heatmap.cols(), 3});
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    const auto rgb = colormap(heatmap[i]);
    for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = rgb[c];
  }
  return out;
}

Tensor render_overlay(const Tensor& heatmap, const Tensor& image, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("overlay alpha must lie in [0, 1]");
  if (image.rank() != 3 || (image.dim(2) != 1 && image.dim(2) != 3)) {
    throw DimensionError("overlay image must be H x W x 1 or H x W x 3");
  }
  if (heatmap.shape() != Shape{image.dim(0), image.dim(1)}) {
    throw DimensionError("heatmap " + shape_to_string(heatmap.shape()) + " does not match image " +
                         shape_to_string(image.shape()));
  }
  const std::size_t ch = image.dim(2);
  Tensor out({image.dim(0), image.dim(1), 3});
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    const auto rgb = colormap(heatmap[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double px = image[i * ch + (ch == 3 ? c : 0)];
      out[i * 3 + c] = (1.0 - alpha) * px + alpha * rgb[c];
    }
  }
  return out;
}

std::string heatmap_csv(const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("heatmap must be 2-d");
  std::ostringstream os;
  os << "row,col,value\n";
  for (std::size_t r = 0; r < map.rows(); ++r)
    for (std::size_t c = 0; c < map.cols(); ++c) os << r << ',' << c << ',' << format_double(map(r, c)) << '\n';
  return os.str();
}

double localization_score(const Tensor& heatmap, const BoundingBox& box, double fraction) {
  if (heatmap.rank() != 2) throw DimensionError("heatmap must be H x W, got " + shape_to_string(heatmap.shape()));
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fraction must lie in (0, 1]");
  double peak = 0.0;
  for (double v : heatmap.values()) peak = std::max(peak, v);
  if (!(peak > 0.0)) return 0.0;
  const double cut = (1.0 - fraction) * peak;
  const std::size_t w = heatmap.cols();
  double mass = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < heatmap.size(); ++i) {
    if (heatmap[i] < cut) continue;
    mass += heatmap[i];
    if (box.contains(i % w, i / w)) inside += heatmap[i];
  }
  return inside / mass;
}

}  // namespace bml
