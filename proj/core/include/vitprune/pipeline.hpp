#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitprune/adaptive.hpp"
#include "vitprune/budget.hpp"
#include "vitprune/data.hpp"
#include "vitprune/model.hpp"
#include "vitprune/oneshot.hpp"
#include "vitprune/train.hpp"

namespace vitprune {

/// Recovery fine-tuning defaults: 5 epochs, batch 64, AdamW lr 1e-4, wd 0.05.
TrainRun default_recovery(std::uint64_t seed = 0);

struct DeriveOptions {
  PruneConfig prune;
  TrainRun recovery = default_recovery();
  ProbeTraining probe_training;
  bool per_layer_heads = false;
  /// Score embedding dimensions on the sliced model with sub-task data instead
  /// of on the base model with every class.
  bool task_specific_embed = false;
  /// Samples for the embedding and head scoring passes; 0 uses the whole split.
  std::size_t embed_score_samples = 0;
  std::uint64_t seed = 0;
};

/// {params_a2, flops_a2, params_exact, fraction_of_base} where the fraction is
/// taken under `metric`.
nlohmann::json budget_report(const Budget& budget, const Budget& base, BudgetMetric metric);

struct DerivationResult {
  VitModel edge;
  nlohmann::json report;
  bool reached = false;
  double achieved_rate = 0.0;
};

/// One-shot pruning, adaptive pruning and recovery for one sub-task. With
/// alpha = 0 only the classifier is sliced.
DerivationResult derive(const VitModel& base, const Dataset& dataset, const SubTask& task,
                        const DeriveOptions& options);

/// Baseline: slices the classifier, then removes heads, per-head query-key and
/// value rows, MLP neurons and embedding dimensions chosen uniformly at random
/// (one unit at a time, layer picked uniformly) until alpha is reached, then
/// runs the same recovery as derive.
DerivationResult random_prune(const VitModel& base, const Dataset& dataset,
                              const SubTask& task, double alpha, BudgetMetric metric,
                              const TrainRun& recovery, std::uint64_t seed);

struct BenchStats {
  int batch = 0;
  int repeats = 0;
  int warmup = 0;
  int threads = 0;
  double median_ms = 0.0;
  double q1_ms = 0.0;
  double q3_ms = 0.0;
  double iqr_ms = 0.0;
  std::vector<double> samples_ms;
};

void to_json(nlohmann::json& j, const BenchStats& stats);

/// Wall-clock forward latency on a seeded random batch.
BenchStats bench_forward(const VitModel& model, int batch, int repeats, int warmup,
                         std::uint64_t seed = 0);

/// Linear-interpolated quantile of unsorted samples, q in [0, 1].
double quantile(std::vector<double> samples, double q);

}  // namespace vitprune
