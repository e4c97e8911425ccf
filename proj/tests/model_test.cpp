#include <cstdlib>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"
#include "support/reference.hpp"
#include "vitprune/model.hpp"

namespace vitprune {
namespace {

using testing::random_images;
using testing::random_model;
using testing::toy_config;

const float* image_ptr(const Tensor& images, const ModelConfig& c, std::size_t i) {
  return images.data() + i * 3 * c.image_size * c.image_size;
}

TEST(Config, UniformBuildsConsistentLayers) {
  const ModelConfig c = toy_config();
  EXPECT_EQ(c.depth(), 2);
  EXPECT_EQ(c.num_patches(), 64);
  EXPECT_EQ(c.tokens(), 65);
  EXPECT_EQ(c.patch_dim(), 48);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RejectsUnevenHeadsAndPatchGrid) {
  ModelConfig c = toy_config();
  c.layers[0].qk_size = 7;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = toy_config();
  c.patch_size = 5;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(Init, DeterministicInSeed) {
  const VitModel a = init_model(toy_config(), 3), b = init_model(toy_config(), 3),
                 c = init_model(toy_config(), 4);
  EXPECT_EQ(a.params.layers[1].wq, b.params.layers[1].wq);
  EXPECT_NE(a.params.layers[1].wq, c.params.layers[1].wq);
  EXPECT_EQ(a.params.layers[0].ln1_gamma, Tensor({8}, 1.0f));
  EXPECT_EQ(a.class_ids, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
  EXPECT_NO_THROW(a.validate());
}

TEST(Init, NamedTensorsFollowContainerOrder) {
  VitModel m = init_model(toy_config(), 0);
  const auto named = named_tensors(m.params);
  ASSERT_FALSE(named.empty());
  EXPECT_EQ(named.front().name, "patch_embed.weight");
  EXPECT_EQ(named.back().name, "head.bias");
  std::size_t total = 0;
  for (const auto& nt : named) total += nt.tensor->numel();
  EXPECT_GT(total, 0u);
}

TEST(Forward, MatchesScalarReference) {
  const ModelConfig c = toy_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const VitModel m = random_model(c, seed);
    const Tensor images = random_images(3, c, seed);
    const Tensor logits = forward(m, images);
    ASSERT_EQ(logits.shape(), (Shape{3, 10}));
    for (std::size_t i = 0; i < 3; ++i) {
      const auto want = testing::reference_logits(m, image_ptr(images, c, i), c.depth());
      for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(logits(i, j), want[j], 1e-4);
    }
  }
}

TEST(Forward, HeterogeneousLayersMatchReference) {
  ModelConfig c = toy_config();
  c.layers[0] = LayerConfig{1, 4, 6, 16};
  c.layers[1] = LayerConfig{2, 6, 4, 3};
  const VitModel m = random_model(c, 5);
  const Tensor images = random_images(2, c, 6);
  const Tensor logits = forward(m, images);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto want = testing::reference_logits(m, image_ptr(images, c, i), c.depth());
    for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(logits(i, j), want[j], 1e-4);
  }
}

TEST(Forward, TruncatedDepthWithProbe) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 8);
  Probe p = head_probe(m);
  p.bias[2] = 1.5f;
  const Tensor images = random_images(2, c, 9);
  const Tensor logits = forward_truncated(m, images, 1, p);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto want = testing::reference_logits(m, image_ptr(images, c, i), 1, &p);
    for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(logits(i, j), want[j], 1e-4);
  }
}

TEST(Forward, SingleImageAndBatchAgree) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 10);
  const Tensor images = random_images(4, c, 11);
  const Tensor batch = forward(m, images);
  Tensor one({3, 32, 32});
  std::copy(image_ptr(images, c, 2), image_ptr(images, c, 3), one.data());
  const Tensor single = forward(m, one);
  for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(single(0, j), batch(2, j));
}

TEST(Forward, IndependentOfThreadCount) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 12);
  const Tensor images = random_images(6, c, 13);
  ::setenv("NUWA_THREADS", "1", 1);
  const Tensor serial = forward(m, images);
  ::setenv("NUWA_THREADS", "4", 1);
  const Tensor threaded = forward(m, images);
  ::unsetenv("NUWA_THREADS");
  EXPECT_EQ(serial, threaded);
}

TEST(Forward, WrongImageShapeThrows) {
  const VitModel m = init_model(toy_config(), 0);
  EXPECT_THROW(forward(m, Tensor({2, 3, 16, 16})), DimensionError);
}

TEST(Trace, NeuronActivationMatchesReference) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 14);
  const Tensor images = random_images(1, c, 15);
  testing::ReferenceTrace trace;
  testing::reference_logits(m, images.data(), c.depth(), nullptr, &trace);
  EXPECT_NEAR(neuron_activation(m, images, 1, 3), trace.mlp_hidden_cls[1][3], 1e-6);
  const ActivationTrace t = forward_with_trace(m, images);
  ASSERT_EQ(t.mlp_hidden.size(), 2u);
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(t.mlp_hidden[0](0, i), trace.mlp_hidden_cls[0][i], 1e-6);
  ASSERT_EQ(t.attention.size(), 2u);
  for (std::size_t row = 0; row < 65; ++row) {
    double sum = 0.0;
    for (std::size_t u = 0; u < 65; ++u) sum += t.attention[1][65 * 65 + row * 65 + u];
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  EXPECT_THROW(neuron_activation(m, images, 2, 0), ArgumentError);
}

TEST(Trace, ClsFeaturesByDepthEndWithFinalFeature) {
  const ModelConfig c = toy_config();
  const VitModel m = random_model(c, 16);
  const Tensor images = random_images(2, c, 17);
  const auto feats = cls_features_by_depth(m, images);
  ASSERT_EQ(feats.size(), 2u);
  Tensor one({3, 32, 32});
  std::copy(image_ptr(images, c, 1), image_ptr(images, c, 2), one.data());
  const ActivationTrace t = forward_with_trace(m, one);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(feats[1](1, i), t.cls_feature[i], 1e-12);
}

TEST(Macs, MatchHandCount) {
  const ModelConfig c = toy_config();
  const std::uint64_t T = 65, N = 64, d = 8, q = 8, v = 8, e = 16, P = 48, C = 10;
  const std::uint64_t per_layer = T * d * (2 * q + v) + T * T * (q + v) + T * v * d + 2 * T * d * e;
  EXPECT_EQ(count_forward_macs(init_model(c, 0)), N * P * d + 2 * per_layer + C * d);
}

}  // namespace
}  // namespace vitprune
