#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>

#include "bml/convnet.hpp"
#include "bml/tensor.hpp"

namespace bml {

struct Heatmap {
  Tensor values;          // H x W, in [0, 1]
  int source_class = 0;
  Tensor raw;             // h x w map before upsampling and normalisation
  Tensor channel_weights; // one alpha per final-conv channel
  std::optional<Tensor> overlay;
};

// alpha_k = mean over cells of grads[k]; result = ReLU(sum_k alpha_k * maps[k]).
// Both inputs are K x h x w.
Tensor gradcam_combine(const Tensor& maps, const Tensor& grads, Tensor* channel_weights = nullptr);

// Bilinear resize of an h x w map with pixel-centre alignment and edge clamping.
Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width);

// Divides by the maximum; an all-zero map stays zero.
Tensor normalize_by_max(const Tensor& map);

// Explains the pre-softmax score of target_class on one image.
Heatmap grad_cam(const ConvNetModel& model, const Tensor& image, int target_class);
int predicted_class(const ConvNetModel& model, const Tensor& image);

// Five-stop table: blue, cyan, green, yellow, red at 0, 0.25, 0.5, 0.75, 1.
std::array<double, 3> colormap(double v);
Tensor colorize(const Tensor& heatmap);

// (1 - alpha) * image + alpha * colormap(heatmap), always 3 channels.
// Grayscale input is replicated across channels.
Tensor render_overlay(const Tensor& heatmap, const Tensor& image, double alpha);

// Share of the heat in the top `fraction` of the value range (pixels at or
// above (1 - fraction) * max) that lies inside `box`. Zero for an all-zero map.
double localization_score(const Tensor& heatmap, const BoundingBox& box, double fraction = 0.1);

// "row,col,value" lines for the raw or normalised map.
std::string heatmap_csv(const Tensor& map);

}  // namespace bml
