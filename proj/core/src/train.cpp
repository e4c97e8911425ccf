#include "vitprune/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "random.hpp"
#include "vitprune/errors.hpp"

namespace vitprune {

void OptimizerState::step(std::span<const ParamSlot> slots) {
  if (m_.empty()) {
    for (const ParamSlot& s : slots) {
      m_.emplace_back(s.weights.size(), 0.0);
      v_.emplace_back(s.weights.size(), 0.0);
    }
  }
  if (m_.size() != slots.size()) throw DimensionError("optimizer slot count changed");
  ++step_;
  const AdamWSettings& c = settings_;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step_));
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (std::size_t s = 0; s < slots.size(); ++s) {
    const ParamSlot& slot = slots[s];
    if (slot.weights.size() != m_[s].size() || slot.grads.size() != m_[s].size()) {
      throw DimensionError("optimizer slot " + std::to_string(s) + " changed size");
    }
    double* m = m_[s].data();
    double* v = v_[s].data();
    for (std::size_t i = 0; i < slot.weights.size(); ++i) {
      const double g = slot.grads[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double w = static_cast<double>(slot.weights[i]) * decay;
      w -= c.learning_rate * mhat / (std::sqrt(vhat) + c.eps);
      slot.weights[i] = static_cast<float>(w);
    }
  }
}

std::vector<ParamSlot> param_slots(ParamSet<float>& params, const GradientSet& grads) {
  auto w = named_tensors(params);
  auto g = named_tensors(grads);
  if (w.size() != g.size()) throw DimensionError("gradient set does not match parameters");
  std::vector<ParamSlot> slots;
  slots.reserve(w.size());
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (w[t].tensor->shape() != g[t].tensor->shape()) {
      throw DimensionError("gradient shape mismatch for " + w[t].name);
    }
    slots.push_back({w[t].tensor->values(), g[t].tensor->values()});
  }
  return slots;
}

void to_json(nlohmann::json& j, const TrainRun& run) {
  j = nlohmann::json{{"epochs", run.epochs},
                     {"batch_size", run.batch_size},
                     {"seed", run.seed},
                     {"learning_rate", run.optimizer.learning_rate},
                     {"weight_decay", run.optimizer.weight_decay},
                     {"betas", {run.optimizer.beta1, run.optimizer.beta2}},
                     {"eps", run.optimizer.eps},
                     {"loss_curve", run.loss_curve},
                     {"eval_curve", run.eval_curve},
                     {"final_train_accuracy", run.final_train_accuracy}};
}

std::vector<int> model_labels(const VitModel& model, const Dataset& data) {
  std::vector<int> out(data.size());
  std::vector<int> lookup(data.class_ids.size(), -1);
  for (std::size_t c = 0; c < data.class_ids.size(); ++c) {
    const auto it = std::find(model.class_ids.begin(), model.class_ids.end(), data.class_ids[c]);
    if (it != model.class_ids.end()) lookup[c] = static_cast<int>(it - model.class_ids.begin());
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= lookup.size() || lookup[y] < 0) {
      throw ArgumentError("sample " + std::to_string(i) + " has a class the model does not know");
    }
    out[i] = lookup[y];
  }
  return out;
}

void train(VitModel& model, const Dataset& train_split, TrainRun& run,
           const Dataset* eval_split) {
  if (train_split.size() == 0) throw ArgumentError("train: empty training split");
  if (run.batch_size == 0) throw ArgumentError("train: batch_size must be > 0");
  const std::vector<int> labels = model_labels(model, train_split);
  OptimizerState opt(run.optimizer);
  detail::Rng rng(run.seed);
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  run.loss_curve.clear();
  run.eval_curve.clear();
  for (int epoch = 0; epoch < run.epochs; ++epoch) {
    const ParamSet<float> checkpoint = model.params;
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += run.batch_size) {
      const std::size_t n = std::min(run.batch_size, order.size() - begin);
      const std::vector<std::size_t> ids(order.begin() + begin, order.begin() + begin + n);
      std::vector<int> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = labels[ids[i]];
      LossAndGradients lg = backward(model, train_split.images(ids), y);
      if (!std::isfinite(lg.loss)) {
        model.params = checkpoint;
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch), epoch);
      }
      const auto slots = param_slots(model.params, lg.grads);
      opt.step(slots);
      loss_sum += lg.loss;
      ++batches;
    }
    run.loss_curve.push_back(loss_sum / static_cast<double>(batches));
    if (eval_split) run.eval_curve.push_back(evaluate(model, *eval_split));
  }
  run.final_train_accuracy = evaluate(model, train_split);
}

std::vector<int> predict(const VitModel& model, const Tensor& images) {
  const Tensor logits = forward(model, images);
  const std::size_t n = logits.rows(), c = logits.cols();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (logits(i, k) > logits(i, best)) best = k;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::size_t count_correct(const VitModel& model, const Dataset& data) {
  if (data.size() == 0) throw ArgumentError("evaluate: empty split");
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - begin);
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), begin);
    const std::vector<int> pred = predict(model, data.images(ids));
    for (std::size_t i = 0; i < n; ++i) {
      if (model.class_ids[pred[i]] == data.class_ids[data.labels[begin + i]]) ++correct;
    }
  }
  return correct;
}

double evaluate(const VitModel& model, const Dataset& data) {
  return static_cast<double>(count_correct(model, data)) / static_cast<double>(data.size());
}

}  // namespace vitprune
