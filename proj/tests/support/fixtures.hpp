#pragma once

#include <cstdint>
#include <vector>

#include "vitprune/data.hpp"
#include "vitprune/model.hpp"

namespace vitprune::testing {

/// 2 layers, d=8, H=2, q=v=8, e=16, 32px images in 4px patches (N=64), 10 classes.
ModelConfig toy_config();

/// The acceptance-sized model: 2 layers, d=32, H=4, q=v=32, e=64, N=64, 10 classes.
ModelConfig base_config();

/// Every weight drawn from N(0, scale^2); LayerNorm gammas from 1 + N(0, 0.1^2).
VitModel random_model(const ModelConfig& config, std::uint64_t seed, double scale = 0.3);

/// Images [n x 3 x S x S] with N(0, 1) pixels.
Tensor random_images(std::size_t n, const ModelConfig& config, std::uint64_t seed);

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed);

/// Draws uniformly from [0, 1).
class TestRng {
 public:
  explicit TestRng(std::uint64_t seed);
  double uniform();
  double normal();
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_;
};

}  // namespace vitprune::testing
