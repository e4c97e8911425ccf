#pragma once

#include <cstdint>
#include <string>

#include "vitprune/model.hpp"

namespace vitprune {

enum class BudgetMetric { kParams, kFlops };

BudgetMetric parse_budget_metric(const std::string& name);
std::string to_string(BudgetMetric metric);

/// [3p^2 + N + 2 sum(q_l + v_l + e_l) + 4L + C + 3] * d. Biases are not counted
/// and the cls token is folded into the (N+1) positional rows.
std::int64_t params_a2(const ModelConfig& config);

/// [3(N-1)p^2 + 2LN + C + 1] d + (2Nd + N^2) sum(q_l + v_l) + 2Nd sum(e_l),
/// evaluated verbatim (including the N-1 patch-embedding term).
std::int64_t flops_a2(const ModelConfig& config);

/// Element count over every stored network tensor (probes excluded).
std::int64_t params_exact(const VitModel& model);

/// params_exact - params_a2 in closed form: the bias vectors the formula omits
/// plus the separately stored cls token, 2d + C + sum_l (2 q_l + v_l + e_l + 2d).
std::int64_t bias_delta(const ModelConfig& config);

struct Budget {
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::int64_t params_exact = 0;

  std::int64_t get(BudgetMetric metric) const {
    return metric == BudgetMetric::kParams ? params : flops;
  }
};

Budget measure_budget(const VitModel& model);

/// budget(model) / budget(base) under the given metric.
double budget_fraction(const Budget& current, const Budget& base, BudgetMetric metric);

}  // namespace vitprune
