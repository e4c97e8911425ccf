#include "vitprune/budget.hpp"

namespace vitprune {

BudgetMetric parse_budget_metric(const std::string& name) {
  if (name == "params") return BudgetMetric::kParams;
  if (name == "flops") return BudgetMetric::kFlops;
  throw ArgumentError("unknown budget metric '" + name + "' (expected params|flops)");
}

std::string to_string(BudgetMetric metric) {
  return metric == BudgetMetric::kParams ? "params" : "flops";
}

std::int64_t params_a2(const ModelConfig& config) {
  const std::int64_t p = config.patch_size;
  const std::int64_t N = config.num_patches();
  const std::int64_t d = config.embed_dim;
  const std::int64_t L = config.depth();
  const std::int64_t C = config.num_classes;
  std::int64_t sizes = 0;
  for (const LayerConfig& lc : config.layers) {
    sizes += std::int64_t{lc.qk_size} + lc.value_size + lc.expansion_size;
  }
  return (3 * p * p + N + 2 * sizes + 4 * L + C + 3) * d;
}

std::int64_t flops_a2(const ModelConfig& config) {
  const std::int64_t p = config.patch_size;
  const std::int64_t N = config.num_patches();
  const std::int64_t d = config.embed_dim;
  const std::int64_t L = config.depth();
  const std::int64_t C = config.num_classes;
  std::int64_t attn = 0, expansion = 0;
  for (const LayerConfig& lc : config.layers) {
    attn += std::int64_t{lc.qk_size} + lc.value_size;
    expansion += lc.expansion_size;
  }
  return (3 * (N - 1) * p * p + 2 * L * N + C + 1) * d + (2 * N * d + N * N) * attn +
         2 * N * d * expansion;
}

std::int64_t params_exact(const VitModel& model) {
  std::int64_t total = 0;
  for (const auto& nt : named_tensors(model.params)) {
    total += static_cast<std::int64_t>(nt.tensor->numel());
  }
  return total;
}

std::int64_t bias_delta(const ModelConfig& config) {
  const std::int64_t d = config.embed_dim;
  // Biases, plus the cls token the formula folds into the positional rows.
  std::int64_t delta = 2 * d + config.num_classes;
  for (const LayerConfig& lc : config.layers) {
    delta += 2 * std::int64_t{lc.qk_size} + lc.value_size + lc.expansion_size + 2 * d;
  }
  return delta;
}

Budget measure_budget(const VitModel& model) {
  return {params_a2(model.config), flops_a2(model.config), params_exact(model)};
}

double budget_fraction(const Budget& current, const Budget& base, BudgetMetric metric) {
  const std::int64_t denom = base.get(metric);
  if (denom <= 0) throw ArgumentError("base budget must be positive");
  return static_cast<double>(current.get(metric)) / static_cast<double>(denom);
}

}  // namespace vitprune
