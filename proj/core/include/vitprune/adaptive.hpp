#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vitprune/budget.hpp"
#include "vitprune/data.hpp"
#include "vitprune/model.hpp"
#include "vitprune/score.hpp"

namespace vitprune {

/// kProduct factors W_Q^T W_K (resp. W_V^T W_O^T) per head; kJoint factors the
/// stacked [W_Q, W_K] (resp. [W_V, W_O^T]) per head.
enum class SvdMode { kProduct, kJoint };
enum class DecayLaw { kSubtractive, kMultiplicative };

std::string to_string(SvdMode mode);
SvdMode parse_svd_mode(const std::string& name);
std::string to_string(DecayLaw law);
DecayLaw parse_decay_law(const std::string& name);

struct PruneConfig {
  double alpha = 0.5;
  BudgetMetric metric = BudgetMetric::kParams;
  double rho_depth = 0.95;
  double rho_head = 0.90;
  double gamma_qkv = 0.01;
  double gamma_exp = 0.05;
  double gamma_emb = 0.025;
  int max_iterations = 100;
  SvdMode svd_mode = SvdMode::kProduct;
  DecayLaw decay = DecayLaw::kSubtractive;
  /// Samples used per neuron-scoring pass; 0 uses the whole training split.
  std::size_t score_samples = 0;
  ScoreOptions scoring;

  /// Throws ArgumentError for out-of-range settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const PruneConfig& config);

/// Retention thresholds at iteration k: 1 - k*gamma clamped at 0 (subtractive)
/// or (1 - gamma)^k (multiplicative).
struct DecayState {
  int k = 0;
  double rho_qkv = 1.0;
  double rho_exp = 1.0;
  double rho_emb = 1.0;

  static DecayState at(int k, const PruneConfig& config);
  bool exhausted() const { return rho_qkv <= 0.0 && rho_exp <= 0.0 && rho_emb <= 0.0; }
};

/// Singular values of each head's factored matrix, descending, truncated to
/// the head's current width.
std::vector<std::vector<double>> qk_head_spectra(const VitModel& model, int layer,
                                                 SvdMode mode);
std::vector<std::vector<double>> value_head_spectra(const VitModel& model, int layer,
                                                    SvdMode mode);

/// Smallest uniform per-head rank r whose pooled energy
/// sum_h sum_{i<r} sigma_{h,i}^2 reaches rho of the total. Returns 0 when the
/// total energy is zero or rho is 0.
int select_head_rank(const std::vector<std::vector<double>>& spectra, double rho);

struct RankChange {
  int layer = 0;
  int before = 0;  // qk_size or value_size before
  int after = 0;
  bool clamped = false;
};

/// Refactors the query-key path of one layer and truncates it to the rank
/// chosen by `rho`; the query side carries the sqrt(q'/q) factor that keeps the
/// attention logits on their original scale.
RankChange svd_prune_qk(VitModel& model, int layer, double rho, SvdMode mode);
RankChange svd_prune_v(VitModel& model, int layer, double rho, SvdMode mode);

/// Same factorizations at a fixed per-head rank.
void svd_prune_qk_to_rank(VitModel& model, int layer, int per_head_rank, SvdMode mode);
void svd_prune_v_to_rank(VitModel& model, int layer, int per_head_rank, SvdMode mode);

/// Score-based alternatives for comparison: keep each head's top rows by
/// kQueryKeyRow (resp. kValueRow) score. The query rows are rescaled by
/// sqrt(q'/q) like the SVD variant.
void score_prune_qk_to_rank(VitModel& model, const ImportanceMap& row_scores, int layer,
                            int per_head_rank);
void score_prune_v_to_rank(VitModel& model, const ImportanceMap& row_scores, int layer,
                           int per_head_rank);

/// Keeps the minimal top-scoring set of MLP neurons reaching rho_exp, ranked
/// jointly over layers 1..L-1; layer 0 is never pruned. Returns the number of
/// neurons removed.
int prune_expansion(VitModel& model, const ImportanceMap& neuron_scores, double rho_exp);

/// Keeps the minimal top-scoring set of residual-stream dimensions reaching
/// rho_emb. `scores` is indexed by current dimension. Returns the kept
/// dimensions (ascending); if none would survive the best one is kept and a
/// note is appended.
std::vector<std::size_t> prune_embedding(VitModel& model, const ImportanceMap& scores,
                                         double rho_emb, std::vector<std::string>* notes);

struct LayerShape {
  int heads, qk_size, value_size, expansion_size;
};

struct IterationRecord {
  int k = 0;
  double rho_qkv = 0, rho_exp = 0, rho_emb = 0;
  std::vector<LayerShape> layers;
  int embed_dim = 0;
  Budget budget;
  double budget_fraction = 0.0;
  /// Sub-steps run in this iteration, in order ("qk", "v", "expansion", "embedding").
  std::vector<std::string> steps;
};

void to_json(nlohmann::json& j, const IterationRecord& record);

struct AdaptiveResult {
  VitModel model;
  std::vector<IterationRecord> iterations;
  std::vector<std::string> notes;
  bool reached = false;
  double achieved_rate = 0.0;
};

/// Prunes query-key, value, expansion and embedding sizes in that order each
/// iteration under decaying thresholds, stopping as soon as the budget falls to
/// (1 - alpha) of `base_budget`. `embed_scores` are indexed by the model's
/// current dimensions and are carried along as dimensions are removed.
/// Neuron scores are recomputed on `train_split` every iteration.
AdaptiveResult adaptive_search(const VitModel& model, const Dataset& train_split,
                               const ImportanceMap& embed_scores, const PruneConfig& config,
                               const Budget& base_budget);

/// adaptive_search, throwing UnreachableTargetError when alpha is not reached.
AdaptiveResult run_adaptive(const VitModel& model, const Dataset& train_split,
                            const ImportanceMap& embed_scores, const PruneConfig& config,
                            const Budget& base_budget);

/// Evenly strided subset of at most `limit` sample ids (all when limit is 0).
std::vector<std::size_t> strided_sample(std::size_t n, std::size_t limit);

}  // namespace vitprune
