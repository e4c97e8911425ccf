#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vitprune/data.hpp"
#include "vitprune/model.hpp"
#include "vitprune/score.hpp"
#include "vitprune/train.hpp"

namespace vitprune {

/// Keep mask of the smallest set of top-scoring entries whose cumulative share
/// of the total reaches rho. Entries are ranked by score descending, ties by
/// position ascending. An all-zero vector keeps everything.
std::vector<bool> minimal_retained_set(std::span<const double> scores, double rho);

/// Restricts the classifier to the sub-task classes in sub-task order.
VitModel slice_classifier(const VitModel& model, const SubTask& task);

struct DepthProbeSet {
  /// probes[l] classifies the cls token after l+1 encoders.
  std::vector<Probe> probes;
  std::vector<double> accuracies;
  std::vector<int> class_ids;
};

void to_json(nlohmann::json& j, const DepthProbeSet& set);

struct ProbeTraining {
  int epochs = 3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  AdamWSettings optimizer;
};

/// Trains one LayerNorm + linear probe per depth on frozen cls features of
/// `train_split`, each initialized from the classifier sliced to `task`, and
/// measures its accuracy on `eval_split`. The backbone is not modified.
DepthProbeSet train_depth_probes(const VitModel& model, const SubTask& task,
                                 const Dataset& train_split, const Dataset& eval_split,
                                 const ProbeTraining& options = {});

/// Smallest depth (1-based count of kept layers) whose accuracy reaches
/// rho * accuracies.back().
int select_depth(std::span<const double> accuracies, double rho);

/// Keeps the first select_depth(...) layers and makes that depth's probe the
/// classification head.
VitModel prune_depth(const VitModel& model, const DepthProbeSet& probes, double rho_depth);

struct HeadPruneResult {
  VitModel model;
  /// (layer, head) of every kept head, in original indexing.
  std::vector<std::pair<int, int>> kept;
  std::vector<std::string> notes;
};

/// Keeps the minimal top-scoring set of heads reaching rho_head of the total
/// score, ranked across all layers (or within each layer when `per_layer`).
/// A layer that would lose every head keeps its best one.
HeadPruneResult prune_heads(const VitModel& model, const ImportanceMap& head_scores,
                            double rho_head, bool per_layer = false);

struct OneshotOptions {
  double rho_depth = 0.95;
  double rho_head = 0.90;
  bool per_layer_heads = false;
  ProbeTraining probe_training;
  ScoreOptions scoring;
};

struct OneshotReport {
  std::vector<double> depth_accuracies;
  int depth_before = 0;
  int depth_after = 0;
  double rho_depth = 0.0;
  ImportanceMap head_scores;
  std::vector<std::pair<int, int>> kept_heads;
  double rho_head = 0.0;
  std::vector<std::string> notes;
};

void to_json(nlohmann::json& j, const OneshotReport& report);

struct OneshotResult {
  VitModel model;
  OneshotReport report;
};

/// Depth, classifier and head pruning in that order. `train_split` and
/// `eval_split` hold only sub-task samples.
OneshotResult run_oneshot(const VitModel& model, const SubTask& task,
                          const Dataset& train_split, const Dataset& eval_split,
                          const OneshotOptions& options = {});

}  // namespace vitprune
