#include <cmath>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/gradcam.hpp"
#include "bml/image_io.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bml;
using bml::testing::random_tensor;

namespace {

ConvNetModel small_model(Rng& rng) {
  ConvNetConfig c;
  c.height = 12;
  c.width = 12;
  c.channels = 1;
  c.block_channels = {4, 6};
  c.block_convs = {1, 1};
  c.feature_dim = 8;
  c.num_classes = 3;
  auto m = ConvNetModel::random(c, rng);
  for (auto& p : m.parameters())
    if (p.name.ends_with("bias")) p.tensor->fill(0.05);
  return m;
}

}  // namespace

TEST_CASE("zero head gives an exactly zero map") {
  Rng rng(1);
  auto m = small_model(rng);
  m.head_weight().fill(0.0);
  const auto hm = grad_cam(m, random_tensor({12, 12, 1}, rng, 0.0, 1.0), 1);
  for (double v : hm.values.values()) CHECK(v == 0.0);
  for (double v : hm.raw.values()) CHECK(v == 0.0);
  CHECK(hm.values.shape() == Shape{12, 12});
}

TEST_CASE("hand-built network has a closed-form map") {
  // One block, one channel, identity kernel: A equals the image. fc1 sums the
  // four pooled maxima and the single head unit copies it, so the score
  // gradient is 1 at each pooling winner and alpha = 4 / 16.
  ConvNetConfig c;
  c.height = 4;
  c.width = 4;
  c.channels = 1;
  c.block_channels = {1};
  c.block_convs = {1};
  c.feature_dim = 1;
  c.num_classes = 1;
  ConvNetModel m(c);
  m.blocks()[0].convs[0].weight[4] = 1.0;
  m.fc1_weight().fill(1.0);
  m.head_weight().fill(1.0);
  const Tensor img({4, 4, 1}, {0.1, 0.2, 0.0, 0.4,  //
                               0.3, 0.8, 0.5, 0.1,  //
                               0.0, 0.0, 0.6, 0.2,  //
                               0.9, 0.1, 0.3, 0.4});
  const auto hm = grad_cam(m, img, 0);
  REQUIRE(hm.channel_weights.size() == 1);
  CHECK(hm.channel_weights[0] == 0.25);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(hm.raw[i] == doctest::Approx(0.25 * img[i]));
    CHECK(hm.values[i] == doctest::Approx(img[i] / 0.9));
  }
  CHECK(hm.values[12] == 1.0);
}

TEST_CASE("combine with uniform gradients reproduces ReLU of the maps") {
  Rng rng(2);
  const Tensor maps = random_tensor({1, 3, 5}, rng, -1.0, 1.0);
  const Tensor grads = Tensor::filled({1, 3, 5}, 1.0 / 15.0);
  Tensor alpha;
  const auto raw = gradcam_combine(maps, grads, &alpha);
  CHECK(alpha[0] == doctest::Approx(1.0 / 15.0));
  for (std::size_t i = 0; i < 15; ++i) CHECK(raw[i] == doctest::Approx(std::max(maps[i], 0.0) / 15.0));
  CHECK_THROWS_AS(gradcam_combine(maps, Tensor({1, 5, 3})), DimensionError);
}

TEST_CASE("map is non-negative, bounded and peaks at one") {
  Rng rng(3);
  const auto m = small_model(rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor img = random_tensor({12, 12, 1}, rng, 0.0, 1.0);
    for (int c = 0; c < 3; ++c) {
      const auto hm = grad_cam(m, img, c);
      double mx = 0.0;
      for (double v : hm.values.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
      }
      bool raw_zero = true;
      for (double v : hm.raw.values()) {
        CHECK(v >= 0.0);
        raw_zero = raw_zero && v == 0.0;
      }
      CHECK(mx == (raw_zero ? 0.0 : 1.0));
    }
  }
}

TEST_CASE("positive rescaling of the target head row leaves the map unchanged") {
  Rng rng(4);
  const auto m = small_model(rng);
  const Tensor img = random_tensor({12, 12, 1}, rng, 0.0, 1.0);
  for (double factor : {2.0, 3.7, 0.01}) {
    auto scaled = m;
    for (std::size_t k = 0; k < scaled.head_weight().cols(); ++k) scaled.head_weight()(1, k) *= factor;
    const auto a = grad_cam(m, img, 1);
    const auto b = grad_cam(scaled, img, 1);
    CHECK(bml::testing::max_abs_diff(a.values, b.values) < 1e-12);
    if (factor == 2.0) CHECK(bitwise_equal(a.values, b.values));
  }
}

TEST_CASE("target class out of range") {
  Rng rng(5);
  const auto m = small_model(rng);
  const Tensor img({12, 12, 1});
  CHECK_THROWS_AS(grad_cam(m, img, 3), LabelError);
  CHECK_THROWS_AS(grad_cam(m, img, -1), LabelError);
}

TEST_CASE("bilinear upsampling") {
  SUBCASE("same size is the identity") {
    Rng rng(6);
    const Tensor m = random_tensor({3, 4}, rng);
    CHECK(bitwise_equal(upsample_bilinear(m, 3, 4), m));
  }
  SUBCASE("constant map stays constant") {
    const auto up = upsample_bilinear(Tensor::filled({2, 3}, 0.7), 9, 5);
    for (double v : up.values()) CHECK(v == doctest::Approx(0.7));
  }
  SUBCASE("1x2 to 1x4 by hand") {
    // Source positions -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
    const auto up = upsample_bilinear(Tensor::matrix({{0.0, 1.0}}), 1, 4);
    CHECK(up[0] == 0.0);
    CHECK(up[1] == doctest::Approx(0.25));
    CHECK(up[2] == doctest::Approx(0.75));
    CHECK(up[3] == 1.0);
  }
  SUBCASE("maximum stays inside the footprint of a clearly peaked cell") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t h = 3 + rng.below(4), w = 3 + rng.below(4);
      Tensor m = random_tensor({h, w}, rng, 0.0, 0.5);
      const std::size_t py = rng.below(h), px = rng.below(w);
      m(py, px) = 1.0;
      const std::size_t H = h * 8, W = w * 8;
      const auto up = upsample_bilinear(m, H, W);
      std::size_t best = 0;
      for (std::size_t i = 1; i < up.size(); ++i)
        if (up[i] > up[best]) best = i;
      const double sy = (static_cast<double>(best / W) + 0.5) * static_cast<double>(h) / static_cast<double>(H) - 0.5;
      const double sx = (static_cast<double>(best % W) + 0.5) * static_cast<double>(w) / static_cast<double>(W) - 0.5;
      CHECK(std::abs(sy - static_cast<double>(py)) < 1.0);
      CHECK(std::abs(sx - static_cast<double>(px)) < 1.0);
    }
  }
}

TEST_CASE("normalisation") {
  CHECK(bitwise_equal(normalize_by_max(Tensor({2, 2})), Tensor({2, 2})));
  const auto n = normalize_by_max(Tensor::matrix({{0.0, 2.0}, {1.0, 0.5}}));
  CHECK(n[1] == 1.0);
  CHECK(n[2] == 0.5);
  CHECK(n[3] == 0.25);
}

TEST_CASE("colormap stops") {
  using A = std::array<double, 3>;
  CHECK(colormap(0.0) == A{0, 0, 1});
  CHECK(colormap(0.25) == A{0, 1, 1});
  CHECK(colormap(0.5) == A{0, 1, 0});
  CHECK(colormap(0.75) == A{1, 1, 0});
  CHECK(colormap(1.0) == A{1, 0, 0});
  CHECK(colormap(0.125) == A{0, 0.5, 1});
  CHECK(colormap(-3.0) == A{0, 0, 1});
  CHECK(colormap(7.0) == A{1, 0, 0});
}

TEST_CASE("overlay") {
  Rng rng(8);
  SUBCASE("alpha zero returns the colour image bitwise") {
    const Tensor img = random_tensor({4, 5, 3}, rng, 0.0, 1.0);
    const Tensor hm = random_tensor({4, 5}, rng, 0.0, 1.0);
    CHECK(bitwise_equal(render_overlay(hm, img, 0.0), img));
  }
  SUBCASE("alpha one on a zero map is the constant colormap(0)") {
    const auto out = render_overlay(Tensor({3, 3}), random_tensor({3, 3, 1}, rng, 0.0, 1.0), 1.0);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(out[3 * i] == 0.0);
      CHECK(out[3 * i + 1] == 0.0);
      CHECK(out[3 * i + 2] == 1.0);
    }
  }
  SUBCASE("golden bytes") {
    // Grayscale 0.5 (last pixel 0.0) under alpha 0.5; bytes worked out by hand.
    const Tensor img({1, 6, 1}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.0});
    const Tensor hm({1, 6}, {0.0, 0.25, 0.5, 0.75, 1.0, 0.125});
    const auto bytes = to_bytes(render_overlay(hm, img, 0.5));
    const std::vector<std::uint8_t> golden{64,  64,  191, 64,  191, 191, 64, 191, 64,
                                           191, 191, 64,  191, 64,  64,  0,  64,  128};
    CHECK(bytes == golden);
    std::ostringstream os;
    write_pnm(os, render_overlay(hm, img, 0.5));
    const std::string file = os.str();
    CHECK(file.substr(0, 11) == "P6\n6 1\n255\n");
    CHECK(file.size() == 11 + 18);
  }
  CHECK_THROWS_AS(render_overlay(Tensor({2, 2}), Tensor({2, 2, 1}), 1.5), ConfigError);
  CHECK_THROWS_AS(render_overlay(Tensor({2, 3}), Tensor({2, 2, 1}), 0.5), DimensionError);
}

TEST_CASE("pnm round trip and ascii variants") {
  Rng rng(9);
  Tensor img({3, 4, 3});
  for (auto& v : img.values()) v = static_cast<double>(rng.below(256)) / 255.0;
  std::stringstream ss;
  write_pnm(ss, img);
  const auto back = read_pnm(ss);
  CHECK(back.shape() == img.shape());
  CHECK(bml::testing::max_abs_diff(back, img) < 1e-15);

  std::istringstream p2("P2\n# comment\n2 2\n10\n0 5\n10 2\n");
  const auto g = read_pnm(p2);
  CHECK(g.shape() == Shape{2, 2, 1});
  CHECK(g[1] == 0.5);
  CHECK(g[2] == 1.0);

  std::istringstream p3("P3 1 1 255 255 0 51");
  const auto c = read_pnm(p3);
  CHECK(c[0] == 1.0);
  CHECK(c[2] == doctest::Approx(0.2));

  std::istringstream bad("P4\n1 1\n");
  CHECK_THROWS_AS(read_pnm(bad), ParseError);
  std::istringstream over("P2 1 1 10 11");
  CHECK_THROWS_AS(read_pnm(over), ParseError);
  std::istringstream trunc("P5\n4 4\n255\nab");
  CHECK_THROWS_AS(read_pnm(trunc), ParseError);
}

TEST_CASE("svg and csv outputs") {
  const Tensor img({1, 2, 1}, {0.0, 1.0});
  const auto svg = image_to_svg(img);
  CHECK(svg.find("fill=\"#000000\"") != std::string::npos);
  CHECK(svg.find("<rect x=\"1\" y=\"0\" width=\"1\" height=\"1\" fill=\"#ffffff\"/>") != std::string::npos);
  CHECK(heatmap_csv(Tensor::matrix({{0.5, 1.0}})) == "row,col,value\n0,0,0.5\n0,1,1\n");
}
