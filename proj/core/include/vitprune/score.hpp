#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vitprune/model.hpp"

namespace vitprune {

/// Prunable weight groups. kQueryKeyRow and kValueRow are the per-row groups
/// used only by the score-based query-key / value baseline.
enum class GroupKind { kHead, kNeuron, kEmbedDim, kQueryKeyRow, kValueRow };

std::string to_string(GroupKind kind);
GroupKind parse_group_kind(const std::string& name);

struct TensorSlice {
  std::string tensor;                 // canonical tensor name
  std::vector<std::size_t> indices;   // flat row-major offsets
};

struct WeightGroup {
  GroupKind kind;
  int layer;   // -1 for embedding dimensions
  int index;
  std::vector<TensorSlice> members;
};

/// Groups of one kind in canonical (layer, index) order. Groups of one kind
/// are pairwise disjoint and cover that kind's weight population.
std::vector<WeightGroup> enumerate_groups(const ModelConfig& config, GroupKind kind);

struct GroupScore {
  int layer;
  int index;
  double score;
};

struct ImportanceMap {
  GroupKind kind = GroupKind::kHead;
  std::vector<GroupScore> scores;  // canonical (layer, index) order
  std::size_t sample_count = 0;
  std::string task_id;

  std::vector<double> values() const;
  /// Score of group (layer, index); throws ArgumentError if absent.
  double at(int layer, int index) const;
};

void to_json(nlohmann::json& j, const ImportanceMap& map);
void from_json(const nlohmann::json& j, ImportanceMap& map);

struct ScoreOptions {
  /// Samples per gradient pass.
  std::size_t batch_size = 32;
  /// Multiplies every per-sample loss term.
  double loss_scale = 1.0;
  std::string task_id;
};

/// Taylor importance of each group: the mean over samples of
/// sum_{w in group} |dL(x)/dw * w|, with the absolute value taken per weight
/// and per sample. Labels index the model's classes, so score task-specific
/// groups after slicing the classifier.
ImportanceMap score_groups(const VitModel& model, const Tensor& images,
                           std::span<const int> labels, GroupKind kind,
                           const ScoreOptions& options = {});

/// Cosine similarity of two score vectors in canonical group order. Returns 0
/// when either vector is all zeros.
double score_similarity(const ImportanceMap& a, const ImportanceMap& b);

/// Ids of the k samples with the largest neuron_activation(layer, neuron),
/// descending; ties go to the lower sample id.
std::vector<std::size_t> top_activating_samples(const VitModel& model, const Tensor& images,
                                                int layer, int neuron, std::size_t k);

}  // namespace vitprune
