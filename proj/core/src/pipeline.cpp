#include "vitprune/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "random.hpp"
#include "surgery.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/parallel.hpp"
#include "vitprune/score.hpp"

namespace vitprune {

TrainRun default_recovery(std::uint64_t seed) {
  TrainRun run;
  run.epochs = 5;
  run.batch_size = 64;
  run.seed = seed;
  run.optimizer.learning_rate = 1e-4;
  run.optimizer.weight_decay = 0.05;
  return run;
}

nlohmann::json budget_report(const Budget& budget, const Budget& base, BudgetMetric metric) {
  return {{"params_a2", budget.params},
          {"flops_a2", budget.flops},
          {"params_exact", budget.params_exact},
          {"fraction_of_base", budget_fraction(budget, base, metric)}};
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

nlohmann::json shape_report(const ModelConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerConfig& l : c.layers) {
    layers.push_back(
        {{"H", l.heads}, {"q", l.qk_size}, {"v", l.value_size}, {"e", l.expansion_size}});
  }
  return {{"L", c.depth()}, {"C", c.num_classes}, {"d", c.embed_dim}, {"layers", layers}};
}

// Reading choices the pipeline makes where the method description admits more
// than one interpretation; echoed in every derivation report.
nlohmann::json interpretation_notes() {
  return nlohmann::json::array({
      "depth: smallest depth whose held-out probe accuracy reaches rho_depth times the "
      "full-depth probe accuracy",
      "thresholds: every rho is a retention floor (minimal top-score set whose share of the "
      "total reaches rho)",
      "query-key/value ranks: factored per head with a uniform per-head rank chosen on the "
      "pooled energy of all heads",
      "decay: rho applied to the current model each iteration",
      "recovery: once, after the adaptive loop",
  });
}

std::vector<int> subset_labels(const std::vector<int>& labels,
                               const std::vector<std::size_t>& ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (std::size_t i : ids) out.push_back(labels[i]);
  return out;
}

// Recovery plus accuracy bookkeeping shared by derive and random_prune.
void recover(VitModel& edge, const SubTaskSplit& split, TrainRun run, nlohmann::json& report) {
  const double before = evaluate(edge, split.eval);
  const auto t0 = Clock::now();
  if (run.epochs > 0) train(edge, split.train, run, &split.eval);
  report["recovery"] = run;
  report["timings"]["recovery_s"] = seconds_since(t0);
  report["accuracy"]["pre_recovery"] = before;
  report["accuracy"]["post_recovery"] = evaluate(edge, split.eval);
}

}  // namespace

DerivationResult derive(const VitModel& base, const Dataset& dataset, const SubTask& task,
                        const DeriveOptions& options) {
  options.prune.validate();
  const auto t_start = Clock::now();
  const BudgetMetric metric = options.prune.metric;
  const Budget base_budget = measure_budget(base);
  const SubTaskSplit split = build_subtask_split(dataset, task);
  if (split.train.size() == 0 || split.eval.size() == 0) {
    throw ArgumentError("sub-task has no training or evaluation samples");
  }

  DerivationResult result;
  nlohmann::json& rep = result.report;
  rep["task"] = task;
  rep["hyperparameters"] = options.prune;
  rep["hyperparameters"]["seed"] = options.seed;
  rep["hyperparameters"]["probe_epochs"] = options.probe_training.epochs;
  rep["hyperparameters"]["per_layer_heads"] = options.per_layer_heads;
  rep["hyperparameters"]["task_specific_embed"] = options.task_specific_embed;
  rep["normalization"] = dataset.normalization;
  rep["interpretation"] = interpretation_notes();
  rep["notes"] = nlohmann::json::array();
  rep["base"] = {{"shape", shape_report(base.config)},
                 {"budget", budget_report(base_budget, base_budget, metric)}};

  const VitModel sliced_base = slice_classifier(base, task);
  rep["accuracy"]["base_subtask"] = evaluate(base, split.eval);
  rep["accuracy"]["sliced_subtask"] = evaluate(sliced_base, split.eval);

  VitModel edge;
  if (options.prune.alpha == 0.0) {
    edge = sliced_base;
    rep["notes"].push_back("alpha = 0: classifier slicing only, no recovery");
    rep["accuracy"]["pre_recovery"] = rep["accuracy"]["sliced_subtask"];
    rep["accuracy"]["post_recovery"] = rep["accuracy"]["sliced_subtask"];
    rep["adaptive"]["iterations"] = nlohmann::json::array();
    result.reached = true;
  } else {
    OneshotOptions oo;
    oo.rho_depth = options.prune.rho_depth;
    oo.rho_head = options.prune.rho_head;
    oo.per_layer_heads = options.per_layer_heads;
    oo.probe_training = options.probe_training;
    oo.probe_training.seed = options.seed;
    oo.scoring = options.prune.scoring;
    auto t0 = Clock::now();
    OneshotResult one = run_oneshot(base, task, split.train, split.eval, oo);
    rep["oneshot"] = one.report;
    rep["oneshot"]["budget"] = budget_report(measure_budget(one.model), base_budget, metric);
    rep["timings"]["oneshot_s"] = seconds_since(t0);
    for (const auto& n : one.report.notes) rep["notes"].push_back(n);

    // Embedding scores are computed once, before the loop, on the base model
    // over every class unless task-specific scoring is requested.
    t0 = Clock::now();
    ImportanceMap embed_scores;
    ScoreOptions so = options.prune.scoring;
    if (options.task_specific_embed) {
      const auto ids = strided_sample(split.train.size(), options.embed_score_samples);
      const auto labels = subset_labels(model_labels(sliced_base, split.train), ids);
      so.task_id = task.id;
      embed_scores = score_groups(sliced_base, split.train.images(ids), labels,
                                  GroupKind::kEmbedDim, so);
    } else {
      const Dataset all_train = dataset.split(Split::kTrain);
      const auto ids = strided_sample(all_train.size(), options.embed_score_samples);
      const auto labels = subset_labels(model_labels(base, all_train), ids);
      so.task_id = "base";
      embed_scores =
          score_groups(base, all_train.images(ids), labels, GroupKind::kEmbedDim, so);
    }
    rep["timings"]["embed_scoring_s"] = seconds_since(t0);

    t0 = Clock::now();
    AdaptiveResult ad =
        adaptive_search(one.model, split.train, embed_scores, options.prune, base_budget);
    rep["timings"]["adaptive_s"] = seconds_since(t0);
    rep["adaptive"]["iterations"] = ad.iterations;
    rep["adaptive"]["reached"] = ad.reached;
    for (const auto& n : ad.notes) rep["notes"].push_back(n);
    result.reached = ad.reached;
    edge = std::move(ad.model);

    TrainRun run = options.recovery;
    run.seed = options.seed;
    recover(edge, split, run, rep);
  }

  const Budget after = measure_budget(edge);
  result.achieved_rate = 1.0 - budget_fraction(after, base_budget, metric);
  rep["edge"] = {{"shape", shape_report(edge.config)},
                 {"budget", budget_report(after, base_budget, metric)}};
  rep["budget_before"] = budget_report(base_budget, base_budget, metric);
  rep["budget_after"] = budget_report(after, base_budget, metric);
  rep["target_rate"] = options.prune.alpha;
  rep["achieved_rate"] = result.achieved_rate;
  rep["reached"] = result.reached && result.achieved_rate >= options.prune.alpha;
  rep["timings"]["total_s"] = seconds_since(t_start);
  rep["threads"] = worker_count();
  result.edge = std::move(edge);
  return result;
}

DerivationResult random_prune(const VitModel& base, const Dataset& dataset,
                              const SubTask& task, double alpha, BudgetMetric metric,
                              const TrainRun& recovery, std::uint64_t seed) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ArgumentError("alpha must be in [0, 1)");
  const auto t_start = Clock::now();
  const Budget base_budget = measure_budget(base);
  const SubTaskSplit split = build_subtask_split(dataset, task);

  DerivationResult result;
  nlohmann::json& rep = result.report;
  rep["task"] = task;
  rep["method"] = "random";
  rep["seed"] = seed;
  rep["metric"] = to_string(metric);
  rep["accuracy"]["sliced_subtask"] = evaluate(slice_classifier(base, task), split.eval);

  VitModel m = slice_classifier(base, task);
  detail::Rng rng(seed);
  const double target = 1.0 - alpha;
  double frac = budget_fraction(measure_budget(m), base_budget, metric);
  enum Kind { kHead, kQk, kV, kNeuron, kEmbed };
  nlohmann::json removals = {{"head", 0}, {"qk_row", 0}, {"value_row", 0}, {"neuron", 0},
                             {"embed_dim", 0}};
  while (frac > target) {
    std::vector<std::pair<Kind, int>> actions;
    for (int l = 0; l < m.config.depth(); ++l) {
      const LayerConfig& lc = m.config.layers[l];
      if (lc.heads > 1) actions.push_back({kHead, l});
      if (lc.qk_head_width() > 1) actions.push_back({kQk, l});
      if (lc.value_head_width() > 1) actions.push_back({kV, l});
      if (lc.expansion_size > 0) actions.push_back({kNeuron, l});
    }
    if (m.config.embed_dim > 1) actions.push_back({kEmbed, -1});
    if (actions.empty()) break;
    const auto [kind, l] = actions[rng.below(actions.size())];
    auto drop_one = [&](std::size_t n) {
      std::vector<bool> keep(n, true);
      keep[rng.below(n)] = false;
      return detail::kept_positions(keep);
    };
    switch (kind) {
      case kHead:
        detail::keep_heads(m, l, drop_one(m.config.layers[l].heads));
        removals["head"] = removals["head"].get<int>() + 1;
        break;
      case kQk:
      case kV: {
        const LayerConfig& lc = m.config.layers[l];
        const int width = kind == kQk ? lc.qk_head_width() : lc.value_head_width();
        std::vector<std::vector<std::size_t>> rows(lc.heads);
        for (auto& r : rows) r = drop_one(width);
        if (kind == kQk) {
          detail::keep_qk_rows(m, l, rows);
          removals["qk_row"] = removals["qk_row"].get<int>() + 1;
        } else {
          detail::keep_value_rows(m, l, rows);
          removals["value_row"] = removals["value_row"].get<int>() + 1;
        }
        break;
      }
      case kNeuron:
        detail::keep_neurons(m, l, drop_one(m.config.layers[l].expansion_size));
        removals["neuron"] = removals["neuron"].get<int>() + 1;
        break;
      case kEmbed:
        detail::keep_embed_dims(m, drop_one(m.config.embed_dim));
        removals["embed_dim"] = removals["embed_dim"].get<int>() + 1;
        break;
    }
    frac = budget_fraction(measure_budget(m), base_budget, metric);
  }
  result.reached = frac <= target;
  rep["removals"] = removals;

  TrainRun run = recovery;
  run.seed = seed;
  if (alpha > 0.0) {
    recover(m, split, run, rep);
  } else {
    rep["accuracy"]["pre_recovery"] = rep["accuracy"]["sliced_subtask"];
    rep["accuracy"]["post_recovery"] = rep["accuracy"]["sliced_subtask"];
  }

  const Budget after = measure_budget(m);
  result.achieved_rate = 1.0 - budget_fraction(after, base_budget, metric);
  rep["edge"] = {{"shape", shape_report(m.config)},
                 {"budget", budget_report(after, base_budget, metric)}};
  rep["budget_before"] = budget_report(base_budget, base_budget, metric);
  rep["budget_after"] = budget_report(after, base_budget, metric);
  rep["target_rate"] = alpha;
  rep["achieved_rate"] = result.achieved_rate;
  rep["reached"] = result.reached;
  rep["timings"]["total_s"] = seconds_since(t_start);
  result.edge = std::move(m);
  return result;
}

void to_json(nlohmann::json& j, const BenchStats& s) {
  j = nlohmann::json{{"batch", s.batch},         {"repeats", s.repeats},
                     {"warmup", s.warmup},       {"threads", s.threads},
                     {"median_ms", s.median_ms}, {"q1_ms", s.q1_ms},
                     {"q3_ms", s.q3_ms},         {"iqr_ms", s.iqr_ms},
                     {"samples_ms", s.samples_ms}};
}

double quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw ArgumentError("quantile of an empty sample");
  std::sort(samples.begin(), samples.end());
  const double pos = q * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (pos - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

BenchStats bench_forward(const VitModel& model, int batch, int repeats, int warmup,
                         std::uint64_t seed) {
  if (batch < 1 || repeats < 1 || warmup < 0) {
    throw ArgumentError("bench: batch and repeats must be >= 1, warmup >= 0");
  }
  const std::size_t S = model.config.image_size;
  Tensor images({static_cast<std::size_t>(batch), 3, S, S});
  detail::Rng rng(seed);
  for (float& x : images.values()) x = static_cast<float>(rng.normal());

  BenchStats st;
  st.batch = batch;
  st.repeats = repeats;
  st.warmup = warmup;
  st.threads = worker_count();
  for (int i = 0; i < warmup; ++i) (void)forward(model, images);
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    const Tensor out = forward(model, images);
    st.samples_ms.push_back(seconds_since(t0) * 1e3);
    if (out.numel() == 0) throw NumericError("empty forward output", 0.0);
  }
  st.median_ms = quantile(st.samples_ms, 0.5);
  st.q1_ms = quantile(st.samples_ms, 0.25);
  st.q3_ms = quantile(st.samples_ms, 0.75);
  st.iqr_ms = st.q3_ms - st.q1_ms;
  return st;
}

}  // namespace vitprune
