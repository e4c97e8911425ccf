#pragma once

#include <functional>
#include <span>
#include <string_view>

#include "vitprune/model.hpp"

namespace vitprune {

/// One gradient tensor per weight tensor, shape-matched, held in double.
using GradientSet = ParamSet<double>;

struct LossOptions {
  /// Number of encoders to run; 0 means the full depth.
  int depth_limit = 0;
  /// Classify through this probe instead of the model head. Its gradients
  /// land in the head.* slots of the GradientSet.
  const Probe* probe = nullptr;
  /// Multiplies every per-sample loss term.
  double loss_scale = 1.0;
};

struct LossAndGradients {
  double loss = 0.0;
  GradientSet grads;
};

/// Mean cross-entropy over the batch, evaluated in double precision.
/// Labels index the model's (or probe's) classes.
double mean_loss(const VitModel& model, const Tensor& images, std::span<const int> labels,
                 const LossOptions& options = {});

/// Exact reverse-mode gradients of the mean cross-entropy.
LossAndGradients backward(const VitModel& model, const Tensor& images,
                          std::span<const int> labels, const LossOptions& options = {});

/// Calls fn(i, loss_i, grads_i) with the gradient of sample i's own loss term.
/// Invocations for different samples may run concurrently.
void for_each_sample_gradient(
    const VitModel& model, const Tensor& images, std::span<const int> labels,
    const std::function<void(std::size_t, double, const GradientSet&)>& fn,
    const LossOptions& options = {});

/// Central difference (L(w+h) - L(w-h)) / 2h of the mean loss with respect to
/// one coordinate of the named tensor; the perturbed forwards run in double.
/// With options.probe set, head.* names address the probe.
double finite_diff(const VitModel& model, const Tensor& images, std::span<const int> labels,
                   std::string_view tensor_name, std::size_t coordinate, double h,
                   const LossOptions& options = {});

/// Zero gradients shaped like the model.
GradientSet zero_gradients(const ModelConfig& config);

}  // namespace vitprune
