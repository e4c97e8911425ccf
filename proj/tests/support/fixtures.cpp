#include "support/fixtures.hpp"

#include <cmath>

namespace vitprune::testing {

// splitmix64: a generator independent of the library's own.
TestRng::TestRng(std::uint64_t seed) : state_(seed) {}

double TestRng::uniform() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

double TestRng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * uniform());
}

std::uint64_t TestRng::below(std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

ModelConfig toy_config() { return ModelConfig::uniform(32, 4, 8, 2, 2, 8, 8, 16, 10); }

ModelConfig base_config() { return ModelConfig::uniform(32, 4, 32, 2, 4, 32, 32, 64, 10); }

VitModel random_model(const ModelConfig& config, std::uint64_t seed, double scale) {
  VitModel m = init_model(config, seed);
  TestRng rng(seed * 7919 + 1);
  for (auto& nt : named_tensors(m.params)) {
    const bool gamma = nt.name.find("gamma") != std::string::npos;
    for (float& x : nt.tensor->values()) {
      x = static_cast<float>(gamma ? 1.0 + 0.1 * rng.normal() : scale * rng.normal());
    }
  }
  return m;
}

Tensor random_images(std::size_t n, const ModelConfig& config, std::uint64_t seed) {
  const std::size_t S = config.image_size;
  Tensor t({n, 3, S, S});
  TestRng rng(seed * 104729 + 3);
  for (float& x : t.values()) x = static_cast<float>(rng.normal());
  return t;
}

std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  TestRng rng(seed * 31 + 5);
  std::vector<int> out(n);
  for (int& y : out) y = static_cast<int>(rng.below(classes));
  return out;
}

}  // namespace vitprune::testing
