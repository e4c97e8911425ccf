#include <cmath>
#include <mutex>

#include <gtest/gtest.h>

#include "support/fixtures.hpp"
#include "support/reference.hpp"
#include "vitprune/grad.hpp"
#include "vitprune/linalg.hpp"

namespace vitprune {
namespace {

using testing::random_images;
using testing::random_labels;
using testing::random_model;
using testing::toy_config;

constexpr double kStep = 1e-3;
constexpr double kTolerance = 1e-3;
// Gradients smaller than this are compared on an absolute scale.
constexpr double kFloor = 1e-4;

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kFloor});
}

struct Case {
  VitModel model;
  Tensor images;
  std::vector<int> labels;
};

Case make_case(std::uint64_t seed) {
  const ModelConfig c = toy_config();
  return {random_model(c, seed), random_images(3, c, seed + 100), random_labels(3, 10, seed)};
}

void check_all_tensors(const Case& k, const LossOptions& options, std::uint64_t seed) {
  const LossAndGradients lg = backward(k.model, k.images, k.labels, options);
  auto grads = named_tensors(lg.grads);
  testing::TestRng rng(seed);
  for (const auto& g : grads) {
    const std::size_t n = g.tensor->numel();
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t i = rng.below(n);
      const double fd = finite_diff(k.model, k.images, k.labels, g.name, i, kStep, options);
      EXPECT_LT(relative_error((*g.tensor)[i], fd), kTolerance)
          << g.name << "[" << i << "] analytic " << (*g.tensor)[i] << " numeric " << fd;
    }
  }
}

TEST(Backward, LossMatchesReference) {
  const Case k = make_case(1);
  EXPECT_NEAR(mean_loss(k.model, k.images, k.labels),
              testing::reference_loss(k.model, k.images, k.labels), 1e-6);
  EXPECT_NEAR(backward(k.model, k.images, k.labels).loss, mean_loss(k.model, k.images, k.labels),
              1e-12);
}

TEST(Backward, MatchesCentralDifferencesOnEveryTensor) { check_all_tensors(make_case(2), {}, 7); }

TEST(Backward, MatchesCentralDifferencesThroughTruncatedProbe) {
  Case k = make_case(3);
  Probe p = head_probe(k.model);
  for (float& w : p.weight.values()) w *= -1.5f;
  LossOptions options;
  options.depth_limit = 1;
  options.probe = &p;
  const LossAndGradients lg = backward(k.model, k.images, k.labels, options);
  // Layer 1 sits past the exit and receives no gradient.
  for (double g : lg.grads.layers[1].wq.values()) EXPECT_EQ(g, 0.0);
  check_all_tensors(k, options, 8);
}

TEST(Backward, ScaleMultipliesLossAndGradients) {
  const Case k = make_case(4);
  LossOptions scaled;
  scaled.loss_scale = 3.0;
  const LossAndGradients a = backward(k.model, k.images, k.labels);
  const LossAndGradients b = backward(k.model, k.images, k.labels, scaled);
  EXPECT_NEAR(b.loss, 3.0 * a.loss, 1e-12);
  EXPECT_NEAR(b.grads.layers[0].w1[5], 3.0 * a.grads.layers[0].w1[5], 1e-12);
}

TEST(Backward, PerSampleGradientsAverageToBatchGradient) {
  const Case k = make_case(5);
  const LossAndGradients batch = backward(k.model, k.images, k.labels);
  GradientSet sum = zero_gradients(k.model.config);
  std::vector<double> losses(3);
  std::mutex mu;
  for_each_sample_gradient(k.model, k.images, k.labels,
                           [&](std::size_t i, double loss, const GradientSet& g) {
                             std::lock_guard lock(mu);
                             losses[i] = loss;
                             auto dst = named_tensors(sum);
                             auto src = named_tensors(g);
                             for (std::size_t t = 0; t < dst.size(); ++t) {
                               for (std::size_t j = 0; j < dst[t].tensor->numel(); ++j) {
                                 (*dst[t].tensor)[j] += (*src[t].tensor)[j] / 3.0;
                               }
                             }
                           });
  EXPECT_NEAR((losses[0] + losses[1] + losses[2]) / 3.0, batch.loss, 1e-12);
  auto got = named_tensors(sum);
  auto want = named_tensors(batch.grads);
  for (std::size_t t = 0; t < got.size(); ++t) {
    EXPECT_LT(max_abs_diff(*got[t].tensor, *want[t].tensor), 1e-12) << got[t].name;
  }
}

TEST(Backward, LabelOutOfRangeThrows) {
  const Case k = make_case(6);
  const std::vector<int> bad = {0, 10, 1};
  EXPECT_THROW(backward(k.model, k.images, bad), ArgumentError);
}

TEST(FiniteDiff, UnknownTensorThrows) {
  const Case k = make_case(7);
  EXPECT_THROW(finite_diff(k.model, k.images, k.labels, "nope", 0, kStep), ArgumentError);
}

}  // namespace
}  // namespace vitprune
