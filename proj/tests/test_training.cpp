#include <cmath>
#include <limits>

#include "bml/errors.hpp"
#include "bml/training.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bml;
using bml::testing::random_tensor;

namespace {

SequenceSample random_sample(std::size_t steps, std::size_t dim, std::size_t classes, Rng& rng) {
  SequenceSample s;
  s.trial_id = "t";
  s.features = random_tensor({steps, dim}, rng);
  for (std::size_t t = 0; t < steps; ++t) s.labels.push_back(static_cast<int>(rng.below(classes)));
  return s;
}

BmlIndRnnModel tiny_model(Activation act, Fusion fusion, Rng& rng) {
  auto model = BmlIndRnnModel::random(
      {.input_dim = 5, .hidden = {3, 3}, .num_classes = 4, .activation = act, .u_max = 1.0, .fusion = fusion}, rng);
  for (auto& p : model.parameters())
    if (p.name.ends_with(".b")) {
      for (auto& v : p.tensor->values()) v = rng.uniform(-0.3, 0.3);
    }
  return model;
}

}  // namespace

TEST_CASE("zero model gradients") {
  BmlIndRnnModel model({.input_dim = 3, .hidden = {2, 2}, .num_classes = 3});
  model.head_bias() = Tensor::vector({0.5, -1.0, 0.25});
  const Tensor x({4, 3});
  const std::vector<int> labels{0, 2, 2, 1};
  const auto trace = model_forward(model, x);
  const auto back = bptt_backward(model, trace, labels);
  for (std::size_t i = 0; i < back.grads.names.size(); ++i) {
    if (back.grads.names[i].ends_with(".W")) {
      for (double v : back.grads.grads[i].values()) CHECK(v == 0.0);
    }
  }
  const auto p = softmax_rows(Tensor::matrix({{0.5, -1.0, 0.25}}));
  const auto& db = back.grads.at("head.b");
  for (std::size_t j = 0; j < 3; ++j) {
    double expected = 0.0;
    for (int y : labels) expected += p[j] - (static_cast<std::size_t>(y) == j ? 1.0 : 0.0);
    expected /= 4.0;
    CHECK(std::abs(db[j] - expected) <= 1e-15);
  }
}

TEST_CASE("BPTT matches finite differences") {
  Rng rng(17);
  SUBCASE("tanh, concat") {
    const auto model = tiny_model(Activation::tanh, Fusion::concat, rng);
    const auto report = gradient_check(model, random_sample(8, 5, 4, rng), 1e-6);
    INFO(report.to_string());
    CHECK(report.passed());
    CHECK(report.flagged == 0);
  }
  SUBCASE("relu, concat") {
    const auto model = tiny_model(Activation::relu, Fusion::concat, rng);
    const auto report = gradient_check(model, random_sample(8, 5, 4, rng), 1e-4);
    INFO(report.to_string());
    CHECK(report.passed());
  }
  SUBCASE("tanh, sum fusion") {
    const auto model = tiny_model(Activation::tanh, Fusion::sum, rng);
    const auto report = gradient_check(model, random_sample(8, 5, 4, rng), 1e-6);
    INFO(report.to_string());
    CHECK(report.passed());
  }
  SUBCASE("tanh, forward only") {
    const auto model = tiny_model(Activation::tanh, Fusion::forward_only, rng);
    const auto report = gradient_check(model, random_sample(8, 5, 4, rng), 1e-6);
    INFO(report.to_string());
    CHECK(report.passed());
    CHECK(report.parameters.size() == 2 * 3 + 2);
  }
}

TEST_CASE("gradient check flags ReLU kinks instead of failing") {
  BmlIndRnnModel model({.input_dim = 1, .hidden = {1}, .num_classes = 2});
  auto& fwd = model.layers()[0].forward;
  fwd.W = Tensor::matrix({{1.0}});
  // Pre-activation of frame 0 sits exactly on the kink.
  SequenceSample s{"k", Tensor::matrix({{0.0}, {1.0}}), {0, 1}, {}};
  model.head_weight() = Tensor::matrix({{1, 0.5}, {-1, 0.25}});
  const auto report = gradient_check(model, s, 1e-4);
  CHECK(report.flagged > 0);
  CHECK(report.passed());
}

TEST_CASE("duplicating a sequence doubles summed gradients") {
  Rng rng(3);
  const auto model = tiny_model(Activation::relu, Fusion::concat, rng);
  const auto s = random_sample(6, 5, 4, rng);
  const auto g = bptt_backward(model, model_forward(model, s.features), s.labels).grads;
  auto sum = g;
  sum.accumulate(g);
  for (std::size_t i = 0; i < g.grads.size(); ++i)
    for (std::size_t k = 0; k < g.grads[i].size(); ++k) CHECK(sum.grads[i][k] == 2.0 * g.grads[i][k]);
}

TEST_CASE("sgd_step") {
  BmlIndRnnModel model({.input_dim = 1, .hidden = {1}, .num_classes = 2});
  model.layers()[0].forward.W[0] = 1.0;
  model.layers()[0].forward.u[0] = 0.99;
  auto before = model;
  auto grads = GradientSet::zeros_like(model.parameters());
  const auto index = [&](const std::string& n) {
    for (std::size_t i = 0; i < grads.names.size(); ++i)
      if (grads.names[i] == n) return i;
    return grads.names.size();
  };
  grads.grads[index("layers.0.forward.W")][0] = 0.5;
  grads.grads[index("layers.0.forward.u")][0] = -1.0;

  sgd_step(model, grads, 0.0);
  for (std::size_t i = 0; i < grads.names.size(); ++i)
    CHECK(bitwise_equal(*model.parameters()[i].tensor, *before.parameters()[i].tensor));

  sgd_step(model, grads, 0.1);
  CHECK(model.layers()[0].forward.W[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(model.layers()[0].forward.u[0] == 1.0);

  grads.grads[index("layers.0.backward.b")][0] = std::numeric_limits<double>::quiet_NaN();
  try {
    sgd_step(model, grads, 0.1);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("layers.0.backward.b") != std::string::npos);
  }
}

TEST_CASE("learning-rate schedule is closed form") {
  TrainConfig cfg;
  cfg.lr0 = 0.01;
  cfg.decay = 0.95;
  for (std::size_t e = 0; e <= 1000; ++e) {
    const long double exact = static_cast<long double>(cfg.lr0) * std::pow(static_cast<long double>(cfg.decay), static_cast<long double>(e));
    const double lr = cfg.lr_at(e);
    const double ulp = std::nextafter(lr, 1.0) - lr;
    CHECK(std::abs(static_cast<long double>(lr) - exact) <= static_cast<long double>(ulp));
  }
  CHECK(cfg.lr_at(0) == 0.01);
}

namespace {

// Two classes separable by the sign of the first feature.
std::vector<SequenceSample> separable_task(std::size_t count, Rng& rng) {
  std::vector<SequenceSample> out;
  for (std::size_t i = 0; i < count; ++i) {
    SequenceSample s;
    s.trial_id = "s" + std::to_string(i);
    s.features = Tensor({12, 3});
    for (std::size_t t = 0; t < 12; ++t) {
      const int y = static_cast<int>(rng.below(2));
      s.labels.push_back(y);
      s.features(t, 0) = y ? 1.0 : -1.0;
      s.features(t, 1) = rng.uniform(-0.1, 0.1);
      s.features(t, 2) = 1.0;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("train") {
  Rng rng(0);
  const auto data = separable_task(1, rng);
  const ModelConfig mc{.input_dim = 3, .hidden = {8}, .num_classes = 2};

  SUBCASE("zero epochs leaves the model untouched") {
    Rng init(1);
    auto model = BmlIndRnnModel::random(mc, init);
    const auto before = model;
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto log = train(model, data, cfg);
    CHECK(log.epochs.empty());
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      CHECK(bitwise_equal(*model.parameters()[i].tensor, *before.parameters()[i].tensor));
  }
  SUBCASE("loss is non-increasing on a separable task") {
    Rng init(0);
    auto model = BmlIndRnnModel::random(mc, init);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.lr0 = 0.01;
    cfg.seed = 0;
    const auto log = train(model, data, cfg);
    REQUIRE(log.epochs.size() == 5);
    for (std::size_t e = 1; e < 5; ++e) CHECK(log.epochs[e].mean_loss <= log.epochs[e - 1].mean_loss);
    CHECK(log.to_csv().rfind("epoch,mean_loss,frame_accuracy,lr\n0,", 0) == 0);
  }
  SUBCASE("same seed, same result") {
    const auto many = separable_task(7, rng);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 3;
    Rng i1(5), i2(5);
    auto a = BmlIndRnnModel::random(mc, i1);
    auto b = BmlIndRnnModel::random(mc, i2);
    const auto la = train(a, many, cfg);
    cfg.threads = 3;
    const auto lb = train(b, many, cfg);
    CHECK(la.to_csv() == lb.to_csv());
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
      CHECK(bitwise_equal(*a.parameters()[i].tensor, *b.parameters()[i].tensor));
  }
  SUBCASE("dimension mismatch") {
    BmlIndRnnModel model({.input_dim = 4, .hidden = {2}, .num_classes = 2});
    TrainConfig cfg;
    CHECK_THROWS_AS(train(model, data, cfg), DimensionError);
  }
  SUBCASE("divergence aborts with epoch and batch") {
    BmlIndRnnModel model({.input_dim = 3, .hidden = {2}, .num_classes = 2});
    model.head_bias()[0] = std::numeric_limits<double>::infinity();
    TrainConfig cfg;
    try {
      train(model, data, cfg);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("epoch 0, batch 0") != std::string::npos);
    }
  }
}
