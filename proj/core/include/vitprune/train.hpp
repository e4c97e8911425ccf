#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vitprune/data.hpp"
#include "vitprune/grad.hpp"
#include "vitprune/model.hpp"

namespace vitprune {

struct AdamWSettings {
  double learning_rate = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// A weight buffer paired with its gradient, updated in place by AdamW.
struct ParamSlot {
  std::span<float> weights;
  std::span<const double> grads;
};

/// AdamW with decoupled weight decay: w <- w (1 - lr wd) is applied before the
/// bias-corrected Adam step.
class OptimizerState {
 public:
  OptimizerState() = default;
  explicit OptimizerState(AdamWSettings settings) : settings_(settings) {}

  /// Moments are created on the first step and must keep the same slot sizes.
  void step(std::span<const ParamSlot> slots);

  const AdamWSettings& settings() const { return settings_; }
  std::int64_t step_count() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWSettings settings_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Pairs every model tensor with its gradient in canonical order.
std::vector<ParamSlot> param_slots(ParamSet<float>& params, const GradientSet& grads);

struct TrainRun {
  int epochs = 5;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  AdamWSettings optimizer;
  /// Mean training loss per epoch.
  std::vector<double> loss_curve;
  /// Eval-split accuracy after each epoch; empty when no eval split was given.
  std::vector<double> eval_curve;
  /// Train-split accuracy after the final epoch.
  double final_train_accuracy = 0.0;
};

void to_json(nlohmann::json& j, const TrainRun& run);

/// Maps each sample's label to the index of its class in model.class_ids.
std::vector<int> model_labels(const VitModel& model, const Dataset& data);

/// Minibatch AdamW on the mean cross-entropy. Each epoch visits the samples in
/// a seed-determined shuffled order. On a non-finite loss the model is restored
/// to its state at the start of the failing epoch and DivergenceError is thrown.
void train(VitModel& model, const Dataset& train_split, TrainRun& run,
           const Dataset* eval_split = nullptr);

/// Class index with the largest logit per row; ties go to the lowest index.
std::vector<int> predict(const VitModel& model, const Tensor& images);

/// Top-1 accuracy: predicted class id (through model.class_ids) equals the
/// sample's class id (through data.class_ids).
double evaluate(const VitModel& model, const Dataset& data);

/// Number of correct predictions, used where exact counts are compared.
std::size_t count_correct(const VitModel& model, const Dataset& data);

}  // namespace vitprune
