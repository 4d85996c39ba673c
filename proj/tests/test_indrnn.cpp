#include <cmath>
#include <sstream>

#include "bml/errors.hpp"
#include "bml/indrnn.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bml;
using bml::testing::random_tensor;

namespace {

// Independent scalar recursion: h[t][i] = σ(Σ_k W[i][k] x[t][k] + u[i] h[t-1][i] + b[i]).
Tensor scalar_loop(const IndRnnLayerParams& p, const Tensor& x) {
  const std::size_t steps = x.rows(), n = p.u.size(), m = x.cols();
  Tensor h({steps, n});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) s += p.W(i, k) * x(t, k);
      const double prev = t ? h(t - 1, i) : 0.0;
      const double pre = s + p.u[i] * prev + p.b[i];
      h(t, i) = p.activation == Activation::relu ? std::max(0.0, pre) : std::tanh(pre);
    }
  return h;
}

IndRnnLayerParams random_params(std::size_t m, std::size_t n, Activation act, Rng& rng) {
  auto p = IndRnnLayerParams::random(m, n, act, 1.0, rng);
  for (auto& v : p.b.values()) v = rng.uniform(-0.5, 0.5);
  for (auto& v : p.u.values()) v = rng.uniform(-1.0, 1.0);
  return p;
}

}  // namespace

TEST_CASE("indrnn_forward with recurrence disabled copies the input") {
  auto p = IndRnnLayerParams::zeros(4, 4, Activation::relu, 1.0);
  p.W = Tensor::identity(4);
  Rng rng(1);
  const auto x = random_tensor({6, 4}, rng, 0.0, 2.0);
  const auto out = indrnn_forward(p, x, Tensor({4}));
  CHECK(bitwise_equal(out.h, x));
}

TEST_CASE("indrnn_forward scalar hand recursion") {
  IndRnnLayerParams p{Tensor::matrix({{1}}), Tensor::vector({0.5}), Tensor::vector({0}), Activation::relu, 1.0};
  const auto out = indrnn_forward(p, Tensor::matrix({{1}, {1}, {1}}), Tensor({1}));
  CHECK(out.h[0] == 1.0);
  CHECK(out.h[1] == 1.5);
  CHECK(out.h[2] == 1.75);
  CHECK(bitwise_equal(out.h, scalar_loop(p, Tensor::matrix({{1}, {1}, {1}}))));
}

TEST_CASE("indrnn_forward matches the element loop") {
  Rng rng(2024);
  for (auto act : {Activation::relu, Activation::tanh}) {
    const auto p = random_params(5, 7, act, rng);
    const auto x = random_tensor({8, 5}, rng);
    const auto out = indrnn_forward(p, x, Tensor({7}));
    CHECK(testing::max_abs_diff(out.h, scalar_loop(p, x)) <= 1e-12);
    CHECK(testing::max_abs_diff(out.h, activation(out.pre, act)) == 0.0);
  }
}

TEST_CASE("indrnn_forward honours a non-zero initial state") {
  IndRnnLayerParams p{Tensor::matrix({{0}}), Tensor::vector({0.5}), Tensor::vector({0}), Activation::relu, 1.0};
  const auto out = indrnn_forward(p, Tensor({2, 1}), Tensor::vector({4}));
  CHECK(out.h[0] == 2.0);
  CHECK(out.h[1] == 1.0);
}

TEST_CASE("indrnn_forward dimension errors") {
  const auto p = IndRnnLayerParams::zeros(3, 2, Activation::relu, 1.0);
  CHECK_THROWS_AS(indrnn_forward(p, Tensor({4, 2}), Tensor({2})), DimensionError);
  CHECK_THROWS_AS(indrnn_forward(p, Tensor({4, 3}), Tensor({3})), DimensionError);
  CHECK_THROWS_AS(indrnn_forward(p, Tensor({0, 3}), Tensor({2})), DimensionError);
  try {
    indrnn_forward(p, Tensor({4, 2}), Tensor({2}), "layers.2.forward");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("layers.2.forward") != std::string::npos);
  }
}

TEST_CASE("bidirectional layer") {
  Rng rng(5);
  const auto p = random_params(3, 4, Activation::relu, rng);
  const BidirectionalLayer shared{p, p};

  SUBCASE("single step has no history") {
    const auto out = bidirectional_layer_forward(shared, random_tensor({1, 3}, rng));
    for (std::size_t i = 0; i < 4; ++i) CHECK(out(0, i) == out(0, 4 + i));
  }
  SUBCASE("palindromic input") {
    Tensor x({7, 3});
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t k = 0; k < 3; ++k) x(t, k) = x(6 - t, k) = rng.uniform(-1, 1);
    const auto out = bidirectional_layer_forward(shared, x);
    for (std::size_t t = 0; t < 7; ++t)
      for (std::size_t i = 0; i < 4; ++i) CHECK(out(t, i) == out(6 - t, 4 + i));
  }
  SUBCASE("backward half is the reversed forward pass") {
    const BidirectionalLayer layer{random_params(3, 4, Activation::relu, rng), random_params(3, 4, Activation::relu, rng)};
    const auto x = random_tensor({9, 3}, rng);
    const auto out = bidirectional_layer_forward(layer, x);
    const auto fwd = indrnn_forward(layer.forward, x, Tensor({4})).h;
    const auto bwd = reverse_rows(indrnn_forward(layer.backward, reverse_rows(x), Tensor({4})).h);
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(out(t, i) == fwd(t, i));
        CHECK(out(t, 4 + i) == bwd(t, i));
      }
    const auto summed = bidirectional_layer_forward(layer, x, Fusion::sum);
    const auto fonly = bidirectional_layer_forward(layer, x, Fusion::forward_only);
    REQUIRE(summed.cols() == 4);
    for (std::size_t t = 0; t < 9; ++t)
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(summed(t, i) == fwd(t, i) + bwd(t, i));
        CHECK(fonly(t, i) == fwd(t, i));
      }
  }
  SUBCASE("reversal duality with swapped parameters") {
    const BidirectionalLayer layer{random_params(3, 4, Activation::tanh, rng), random_params(3, 4, Activation::tanh, rng)};
    const BidirectionalLayer swapped{layer.backward, layer.forward};
    const auto x = random_tensor({6, 3}, rng);
    const auto a = bidirectional_layer_forward(layer, x);
    const auto b = bidirectional_layer_forward(swapped, reverse_rows(x));
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(b(5 - t, i) == a(t, 4 + i));
        CHECK(b(5 - t, 4 + i) == a(t, i));
      }
  }
}

TEST_CASE("model_forward") {
  SUBCASE("zero weights give the bias at every frame") {
    BmlIndRnnModel model({.input_dim = 4, .hidden = {3, 2}, .num_classes = 5});
    model.head_bias() = Tensor::vector({0.1, -0.2, 0.3, 0.0, 2.0});
    Rng rng(3);
    const auto trace = model_forward(model, random_tensor({6, 4}, rng));
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t j = 0; j < 5; ++j) CHECK(trace.logits(t, j) == model.head_bias()[j]);
    CHECK(predict_labels(model, random_tensor({3, 4}, rng)) == std::vector<int>{4, 4, 4});
  }
  SUBCASE("one layer composes the bidirectional layer and the head") {
    Rng rng(4);
    auto model = BmlIndRnnModel::random({.input_dim = 3, .hidden = {5}, .num_classes = 4}, rng);
    const auto x = random_tensor({7, 3}, rng);
    const auto hidden = bidirectional_layer_forward(model.layers()[0], x);
    const auto trace = model_forward(model, x);
    for (std::size_t t = 0; t < 7; ++t)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = model.head_bias()[j];
        for (std::size_t k = 0; k < 10; ++k) s += model.head_weight()(j, k) * hidden(t, k);
        CHECK(std::abs(trace.logits(t, j) - s) <= 1e-12);
      }
  }
  SUBCASE("default configuration") {
    Rng rng(6);
    auto model = BmlIndRnnModel::random({.input_dim = 32}, rng);
    CHECK(model.layers().size() == 3);
    CHECK(model.layers()[1].forward.input() == 128);
    const auto trace = model_forward(model, random_tensor({20, 32}, rng));
    CHECK(trace.logits.shape() == Shape{20, 10});
    CHECK(trace.logits.all_finite());
    CHECK(model.summary().find("128 -> 64 per direction x2 -> 128") != std::string::npos);
  }
  SUBCASE("input width mismatch names the layer") {
    BmlIndRnnModel model({.input_dim = 4, .hidden = {3}, .num_classes = 2});
    try {
      model_forward(model, Tensor({5, 6}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    }
  }
  SUBCASE("forward pass is pure") {
    Rng rng(12);
    auto model = BmlIndRnnModel::random({.input_dim = 3, .hidden = {4, 4}, .num_classes = 3}, rng);
    const auto x = random_tensor({10, 3}, rng);
    const auto a = model_forward(model, x);
    const auto b = model_forward(model, x);
    CHECK(bitwise_equal(a.logits, b.logits));
    for (std::size_t l = 0; l < 2; ++l) CHECK(bitwise_equal(a.layers[l].backward.pre, b.layers[l].backward.pre));
  }
}

TEST_CASE("predict_labels") {
  Tensor logits({2, 4});
  logits(1, 2) = 1.0;
  logits(1, 3) = 1.0;
  CHECK(argmax_rows(logits) == std::vector<int>{0, 2});

  Rng rng(10);
  auto model = BmlIndRnnModel::random({.input_dim = 3, .hidden = {4}, .num_classes = 6}, rng);
  const auto x = random_tensor({15, 3}, rng);
  const auto l = model_forward(model, x).logits;
  const auto pred = predict_labels(model, x);
  for (std::size_t t = 0; t < 15; ++t) {
    int best = 0;
    for (int j = 1; j < 6; ++j)
      if (l(t, static_cast<std::size_t>(j)) > l(t, static_cast<std::size_t>(best))) best = j;
    CHECK(pred[t] == best);
  }
}

TEST_CASE("time-shift fidelity without recurrence") {
  Rng rng(21);
  auto model = BmlIndRnnModel::random({.input_dim = 3, .hidden = {4, 4}, .num_classes = 3}, rng);
  for (auto& layer : model.layers()) {
    layer.forward.u.fill(0.0);
    layer.backward.u.fill(0.0);
  }
  const auto x = random_tensor({8, 3}, rng);
  std::vector<std::size_t> perm{3, 0, 7, 1, 6, 2, 5, 4};
  Tensor xp({8, 3});
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t k = 0; k < 3; ++k) xp(t, k) = x(perm[t], k);
  const auto a = model_forward(model, x).logits;
  const auto b = model_forward(model, xp).logits;
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t j = 0; j < 3; ++j) CHECK(b(t, j) == a(perm[t], j));
}

TEST_CASE("recurrent clamp") {
  Rng rng(30);
  auto model = BmlIndRnnModel::random({.input_dim = 2, .hidden = {5}, .num_classes = 2, .u_max = 0.5}, rng);
  CHECK(model.max_abs_recurrent() <= 0.5);
  model.layers()[0].forward.u[0] = 3.0;
  model.layers()[0].backward.u[1] = -2.0;
  model.clamp_recurrent();
  CHECK(model.layers()[0].forward.u[0] == 0.5);
  CHECK(model.layers()[0].backward.u[1] == -0.5);
}

TEST_CASE("checkpoint round trip is lossless") {
  Rng rng(40);
  for (auto fusion : {Fusion::concat, Fusion::sum, Fusion::forward_only}) {
    auto model = BmlIndRnnModel::random(
        {.input_dim = 3, .hidden = {4, 2}, .num_classes = 5, .activation = Activation::tanh, .u_max = 0.9, .fusion = fusion},
        rng);
    std::stringstream ss;
    write_checkpoint(ss, model.to_checkpoint());
    const auto back = BmlIndRnnModel::from_checkpoint(read_checkpoint(ss));
    CHECK(back.config().fusion == fusion);
    CHECK(back.config().u_max == 0.9);
    CHECK(back.config().hidden == std::vector<std::size_t>{4, 2});
    const auto a = model.parameters();
    const auto b = back.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(*a[i].tensor, *b[i].tensor));
  }
  Checkpoint wrong;
  wrong.set("model", "convnet");
  CHECK_THROWS_AS(BmlIndRnnModel::from_checkpoint(wrong), StructureError);
}
