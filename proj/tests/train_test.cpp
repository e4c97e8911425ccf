#include <cmath>
#include <limits>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "support/fixtures.hpp"
#include "vitprune/train.hpp"

namespace vitprune {
namespace {

TEST(AdamW, TwoStepsMatchHandComputedReference) {
  std::vector<float> w = {1.0f};
  std::vector<double> g = {0.5};
  AdamWSettings s;
  s.learning_rate = 0.1;
  s.weight_decay = 0.5;
  OptimizerState opt(s);
  const std::vector<ParamSlot> slots = {{w, g}};
  opt.step(slots);
  EXPECT_NEAR(w[0], 0.8500000019999999, 1e-7);
  g[0] = -0.2;
  opt.step(slots);
  EXPECT_NEAR(w[0], 0.7729394180165108, 1e-7);
  EXPECT_EQ(opt.step_count(), 2);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.025, 1e-15);
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  std::vector<float> w = {2.0f, -4.0f};
  const std::vector<double> g = {0.0, 0.0};
  OptimizerState opt;  // lr 1e-4, wd 0.05
  opt.step(std::vector<ParamSlot>{{w, g}});
  EXPECT_FLOAT_EQ(w[0], static_cast<float>(2.0 * (1.0 - 1e-4 * 0.05)));
  EXPECT_FLOAT_EQ(w[1], static_cast<float>(-4.0 * (1.0 - 1e-4 * 0.05)));
}

TEST(AdamW, SlotSizeChangeThrows) {
  std::vector<float> w = {1.0f, 2.0f}, w2 = {1.0f};
  std::vector<double> g = {1.0, 1.0}, g2 = {1.0};
  OptimizerState opt;
  opt.step(std::vector<ParamSlot>{{w, g}});
  EXPECT_THROW(opt.step(std::vector<ParamSlot>{{w2, g2}}), DimensionError);
}

// Zero network whose head bias alone decides the prediction.
VitModel constant_model(const ModelConfig& c, std::vector<float> bias, std::vector<int> ids) {
  VitModel m = init_model(c, 0, std::move(ids));
  for (auto& nt : named_tensors(m.params)) nt.tensor->fill(0.0f);
  const std::size_t n = bias.size();
  m.params.head_b = Tensor({n}, std::move(bias));
  return m;
}

ModelConfig tiny_config(int classes) { return ModelConfig::uniform(16, 4, 8, 1, 2, 8, 8, 8, classes); }

Dataset tiny_data(int classes, int per_class) {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.samples_per_class = per_class;
  spec.image_size = 16;
  return make_synthetic(spec);
}

TEST(Predict, ConstantLogitsEqualBiasAndTiesGoLow) {
  const ModelConfig c = tiny_config(3);
  const VitModel m = constant_model(c, {0.5f, 2.0f, 2.0f}, {0, 1, 2});
  const Tensor images = testing::random_images(4, c, 1);
  const Tensor logits = forward(m, images);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(logits(i, 0), 0.5f);
  EXPECT_EQ(predict(m, images), (std::vector<int>{1, 1, 1, 1}));
}

TEST(Evaluate, CountsAgainstClassIdsThroughTheMapping) {
  const Dataset ds = tiny_data(3, 10);  // 8 train + 2 eval per class
  // The model's class order differs from the dataset's; index 2 holds class 1.
  const VitModel m = constant_model(tiny_config(3), {0.0f, 0.0f, 1.0f}, {2, 0, 1});
  EXPECT_EQ(count_correct(m, ds), 10u);
  EXPECT_DOUBLE_EQ(evaluate(m, ds), 10.0 / 30.0);
  EXPECT_EQ(model_labels(m, ds.subset({0, 10, 20})), (std::vector<int>{1, 2, 0}));
}

TEST(Train, ReducesLossAndIsDeterministic) {
  const Dataset ds = tiny_data(3, 12);
  const Dataset tr = ds.split(Split::kTrain), ev = ds.split(Split::kEval);
  const auto run_once = [&](const char* threads) {
    ::setenv("NUWA_THREADS", threads, 1);
    VitModel m = init_model(tiny_config(3), 4);
    TrainRun run;
    run.epochs = 4;
    run.batch_size = 8;
    run.seed = 9;
    run.optimizer.learning_rate = 3e-3;
    train(m, tr, run, &ev);
    ::unsetenv("NUWA_THREADS");
    return std::make_pair(m, run);
  };
  const auto [a, ra] = run_once("1");
  const auto [b, rb] = run_once("3");
  ASSERT_EQ(ra.loss_curve.size(), 4u);
  EXPECT_LT(ra.loss_curve.back(), ra.loss_curve.front());
  EXPECT_EQ(ra.eval_curve.size(), 4u);
  EXPECT_EQ(ra.loss_curve, rb.loss_curve);
  EXPECT_EQ(a.params.layers[0].w1, b.params.layers[0].w1);
  EXPECT_EQ(a.params.head_w, b.params.head_w);
  const nlohmann::json j = ra;
  EXPECT_EQ(j["epochs"], 4);
  EXPECT_EQ(j["loss_curve"].size(), 4u);
}

TEST(Train, NonFiniteLossRestoresAndThrows) {
  const Dataset ds = tiny_data(2, 6);
  VitModel m = init_model(tiny_config(2), 1);
  m.params.layers[0].w1[0] = std::numeric_limits<float>::infinity();
  const VitModel before = m;
  TrainRun run;
  run.epochs = 2;
  try {
    train(m, ds, run);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 0);
  }
  EXPECT_EQ(m.params.layers[0].w2, before.params.layers[0].w2);
  EXPECT_EQ(m.params.head_w, before.params.head_w);
}

}  // namespace
}  // namespace vitprune
