#include "vitprune/oneshot.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "random.hpp"
#include "surgery.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/parallel.hpp"

namespace vitprune {

std::vector<bool> minimal_retained_set(std::span<const double> scores, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ArgumentError("retention threshold must be in [0, 1]");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  for (std::size_t i : order) {
    if (!(scores[i] >= 0.0) || !std::isfinite(scores[i])) {
      throw ArgumentError("scores must be finite and non-negative");
    }
    total += scores[i];
  }
  std::vector<bool> keep(scores.size(), false);
  if (total == 0.0) {
    keep.assign(scores.size(), true);
    return keep;
  }
  double cum = 0.0;
  for (std::size_t i : order) {
    if (cum / total >= rho) break;
    keep[i] = true;
    cum += scores[i];
  }
  return keep;
}

VitModel slice_classifier(const VitModel& model, const SubTask& task) {
  if (task.classes.empty()) throw ArgumentError("sub-task has no classes");
  std::vector<std::size_t> rows;
  for (int c : task.classes) {
    const auto it = std::find(model.class_ids.begin(), model.class_ids.end(), c);
    if (it == model.class_ids.end()) {
      throw ArgumentError("class " + std::to_string(c) + " is not known to the model");
    }
    const std::size_t r = static_cast<std::size_t>(it - model.class_ids.begin());
    if (std::find(rows.begin(), rows.end(), r) != rows.end()) {
      throw ArgumentError("sub-task lists class " + std::to_string(c) + " twice");
    }
    rows.push_back(r);
  }
  VitModel out = model;
  out.params.head_w = detail::select_rows(model.params.head_w, rows);
  out.params.head_b = detail::select_entries(model.params.head_b, rows);
  out.config.num_classes = static_cast<int>(rows.size());
  out.class_ids = task.classes;
  for (Probe& p : out.probes) {
    if (p.weight.rows() == model.class_ids.size()) {
      p.weight = detail::select_rows(p.weight, rows);
      p.bias = detail::select_entries(p.bias, rows);
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const DepthProbeSet& set) {
  j = nlohmann::json{{"accuracies", set.accuracies}, {"class_ids", set.class_ids}};
}

namespace {

struct ProbeWork {
  std::vector<double> gamma, beta, weight, bias;
};

// Logits of a LayerNorm + linear probe on one raw cls feature. Fills the
// normalized input when xhat is non-null.
void probe_logits(const ProbeWork& p, const double* f, std::size_t d, double eps,
                  double* xhat, double* y, double* z, std::size_t classes) {
  double mean = 0.0;
  for (std::size_t j = 0; j < d; ++j) mean += f[j];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t j = 0; j < d; ++j) var += (f[j] - mean) * (f[j] - mean);
  var /= static_cast<double>(d);
  const double rstd = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < d; ++j) {
    xhat[j] = (f[j] - mean) * rstd;
    y[j] = p.gamma[j] * xhat[j] + p.beta[j];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    double s = p.bias[c];
    for (std::size_t j = 0; j < d; ++j) s += p.weight[c * d + j] * y[j];
    z[c] = s;
  }
}

int argmax(const std::vector<double>& z) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < z.size(); ++c) {
    if (z[c] > z[best]) best = c;
  }
  return static_cast<int>(best);
}

double probe_accuracy(const ProbeWork& p, const TensorD& feats, std::span<const int> labels,
                      double eps, std::size_t classes) {
  const std::size_t n = feats.rows(), d = feats.cols();
  std::vector<double> xhat(d), y(d), z(classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    probe_logits(p, feats.data() + i * d, d, eps, xhat.data(), y.data(), z.data(), classes);
    if (argmax(z) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

void train_probe(ProbeWork& p, const TensorD& feats, std::span<const int> labels, double eps,
                 std::size_t classes, const ProbeTraining& opts) {
  const std::size_t n = feats.rows(), d = feats.cols();
  // AdamW operates on float weights, so the probe lives in float between steps.
  std::vector<float> gamma(p.gamma.begin(), p.gamma.end()), beta(p.beta.begin(), p.beta.end()),
      weight(p.weight.begin(), p.weight.end()), bias(p.bias.begin(), p.bias.end());
  std::vector<double> g_gamma(d), g_beta(d), g_weight(classes * d), g_bias(classes);
  OptimizerState opt(opts.optimizer);
  detail::Rng rng(opts.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> xhat(d), y(d), z(classes), dy(d);
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t begin = 0; begin < n; begin += opts.batch_size) {
      const std::size_t count = std::min(opts.batch_size, n - begin);
      std::fill(g_gamma.begin(), g_gamma.end(), 0.0);
      std::fill(g_beta.begin(), g_beta.end(), 0.0);
      std::fill(g_weight.begin(), g_weight.end(), 0.0);
      std::fill(g_bias.begin(), g_bias.end(), 0.0);
      const double inv = 1.0 / static_cast<double>(count);
      for (std::size_t k = 0; k < count; ++k) {
        const std::size_t i = order[begin + k];
        probe_logits(p, feats.data() + i * d, d, eps, xhat.data(), y.data(), z.data(),
                     classes);
        const double mx = *std::max_element(z.begin(), z.end());
        double se = 0.0;
        for (double& v : z) se += (v = std::exp(v - mx));
        for (std::size_t c = 0; c < classes; ++c) {
          const double dz = (z[c] / se - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0)) * inv;
          g_bias[c] += dz;
          for (std::size_t j = 0; j < d; ++j) g_weight[c * d + j] += dz * y[j];
        }
        std::fill(dy.begin(), dy.end(), 0.0);
        for (std::size_t c = 0; c < classes; ++c) {
          const double dz = (z[c] / se - (static_cast<int>(c) == labels[i] ? 1.0 : 0.0)) * inv;
          for (std::size_t j = 0; j < d; ++j) dy[j] += dz * p.weight[c * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) {
          g_gamma[j] += dy[j] * xhat[j];
          g_beta[j] += dy[j];
        }
      }
      const std::vector<ParamSlot> slots = {
          {gamma, g_gamma}, {beta, g_beta}, {weight, g_weight}, {bias, g_bias}};
      opt.step(slots);
      p.gamma.assign(gamma.begin(), gamma.end());
      p.beta.assign(beta.begin(), beta.end());
      p.weight.assign(weight.begin(), weight.end());
      p.bias.assign(bias.begin(), bias.end());
    }
  }
}

std::vector<int> task_labels(const Dataset& data, const SubTask& task) {
  std::vector<int> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out[i] = task.label_of(data.class_ids.at(data.labels[i]));
  }
  return out;
}

// Raw cls features per depth over the whole split, computed in chunks.
std::vector<TensorD> features_by_depth(const VitModel& model, const Dataset& data) {
  const std::size_t L = model.config.depth(), d = model.config.embed_dim;
  std::vector<TensorD> out(L, TensorD({data.size(), d}));
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - begin);
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), begin);
    const auto feats = cls_features_by_depth(model, data.images(ids));
    for (std::size_t l = 0; l < L; ++l) {
      std::copy(feats[l].data(), feats[l].data() + n * d, out[l].data() + begin * d);
    }
  }
  return out;
}

}  // namespace

DepthProbeSet train_depth_probes(const VitModel& model, const SubTask& task,
                                 const Dataset& train_split, const Dataset& eval_split,
                                 const ProbeTraining& options) {
  if (train_split.size() == 0 || eval_split.size() == 0) {
    throw ArgumentError("depth probes need non-empty train and eval splits");
  }
  const VitModel sliced = slice_classifier(model, task);
  const std::vector<int> ytrain = task_labels(train_split, task);
  const std::vector<int> yeval = task_labels(eval_split, task);
  const std::vector<TensorD> ftrain = features_by_depth(model, train_split);
  const std::vector<TensorD> feval = features_by_depth(model, eval_split);
  const std::size_t L = model.config.depth(), classes = task.classes.size();
  const double eps = model.config.layernorm_eps;

  DepthProbeSet set;
  set.class_ids = task.classes;
  set.probes.resize(L);
  set.accuracies.resize(L);
  parallel_for(L, [&](std::size_t l) {
    ProbeWork p;
    const ParamSet<float>& w = sliced.params;
    p.gamma.assign(w.head_ln_gamma.data(), w.head_ln_gamma.data() + w.head_ln_gamma.numel());
    p.beta.assign(w.head_ln_beta.data(), w.head_ln_beta.data() + w.head_ln_beta.numel());
    p.weight.assign(w.head_w.data(), w.head_w.data() + w.head_w.numel());
    p.bias.assign(w.head_b.data(), w.head_b.data() + w.head_b.numel());
    train_probe(p, ftrain[l], ytrain, eps, classes, options);
    set.accuracies[l] = probe_accuracy(p, feval[l], yeval, eps, classes);
    auto to_float = [](const std::vector<double>& v, Shape shape) {
      return Tensor(std::move(shape), std::vector<float>(v.begin(), v.end()));
    };
    const std::size_t d = model.config.embed_dim;
    set.probes[l] = {to_float(p.gamma, {d}), to_float(p.beta, {d}),
                     to_float(p.weight, {classes, d}), to_float(p.bias, {classes})};
  });
  return set;
}

int select_depth(std::span<const double> accuracies, double rho) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ArgumentError("rho_depth must be in (0, 1]");
  if (accuracies.empty()) throw ArgumentError("no probe accuracies");
  const double threshold = rho * accuracies.back();
  for (std::size_t l = 0; l < accuracies.size(); ++l) {
    if (accuracies[l] >= threshold) return static_cast<int>(l + 1);
  }
  return static_cast<int>(accuracies.size());
}

VitModel prune_depth(const VitModel& model, const DepthProbeSet& probes, double rho_depth) {
  if (probes.probes.size() != static_cast<std::size_t>(model.config.depth()) ||
      probes.accuracies.size() != probes.probes.size()) {
    throw ArgumentError("depth probes must cover every layer");
  }
  const int depth = select_depth(probes.accuracies, rho_depth);
  const Probe& head = probes.probes[depth - 1];
  VitModel out = model;
  out.config.layers.resize(depth);
  out.params.layers.resize(depth);
  out.params.head_ln_gamma = head.ln_gamma;
  out.params.head_ln_beta = head.ln_beta;
  out.params.head_w = head.weight;
  out.params.head_b = head.bias;
  out.config.num_classes = static_cast<int>(head.bias.numel());
  out.class_ids = probes.class_ids;
  out.probes.clear();
  out.validate();
  return out;
}

HeadPruneResult prune_heads(const VitModel& model, const ImportanceMap& head_scores,
                            double rho_head, bool per_layer) {
  if (!(rho_head > 0.0 && rho_head <= 1.0)) throw ArgumentError("rho_head must be in (0, 1]");
  if (head_scores.kind != GroupKind::kHead) throw ArgumentError("expected head scores");
  const ModelConfig& cfg = model.config;
  std::vector<std::vector<double>> by_layer(cfg.depth());
  for (int l = 0; l < cfg.depth(); ++l) {
    for (int h = 0; h < cfg.layers[l].heads; ++h) by_layer[l].push_back(head_scores.at(l, h));
  }
  std::vector<std::vector<bool>> keep(cfg.depth());
  if (per_layer) {
    for (int l = 0; l < cfg.depth(); ++l) keep[l] = minimal_retained_set(by_layer[l], rho_head);
  } else {
    std::vector<double> flat;
    for (const auto& s : by_layer) flat.insert(flat.end(), s.begin(), s.end());
    const std::vector<bool> mask = minimal_retained_set(flat, rho_head);
    std::size_t pos = 0;
    for (int l = 0; l < cfg.depth(); ++l) {
      keep[l].assign(mask.begin() + pos, mask.begin() + pos + by_layer[l].size());
      pos += by_layer[l].size();
    }
  }

  HeadPruneResult out{model, {}, {}};
  for (int l = 0; l < cfg.depth(); ++l) {
    std::vector<std::size_t> kept = detail::kept_positions(keep[l]);
    if (kept.empty()) {
      const auto best = std::max_element(by_layer[l].begin(), by_layer[l].end());
      kept.push_back(static_cast<std::size_t>(best - by_layer[l].begin()));
      out.notes.push_back("layer " + std::to_string(l) +
                          " would lose every head; kept its best head " +
                          std::to_string(kept.front()));
    }
    for (std::size_t h : kept) out.kept.emplace_back(l, static_cast<int>(h));
    detail::keep_heads(out.model, l, kept);
  }
  return out;
}

void to_json(nlohmann::json& j, const OneshotReport& r) {
  nlohmann::json kept = nlohmann::json::array();
  for (const auto& [l, h] : r.kept_heads) kept.push_back({{"layer", l}, {"head", h}});
  j = nlohmann::json{
      {"depth",
       {{"accuracies", r.depth_accuracies},
        {"L_base", r.depth_before},
        {"L_pruned", r.depth_after},
        {"rho", r.rho_depth},
        {"rule", "smallest depth whose held-out probe accuracy reaches rho times the "
                 "full-depth probe accuracy"}}},
      {"heads", {{"scores", r.head_scores}, {"kept", kept}, {"rho", r.rho_head}}},
      {"notes", r.notes}};
}

OneshotResult run_oneshot(const VitModel& model, const SubTask& task,
                          const Dataset& train_split, const Dataset& eval_split,
                          const OneshotOptions& options) {
  OneshotResult result;
  OneshotReport& rep = result.report;
  const DepthProbeSet probes =
      train_depth_probes(model, task, train_split, eval_split, options.probe_training);
  rep.depth_accuracies = probes.accuracies;
  rep.depth_before = model.config.depth();
  rep.rho_depth = options.rho_depth;
  VitModel shallow = prune_depth(model, probes, options.rho_depth);
  rep.depth_after = shallow.config.depth();

  // The depth probe already speaks the sub-task's classes; slicing is then the identity.
  VitModel sliced = slice_classifier(shallow, task);

  const std::vector<int> labels = model_labels(sliced, train_split);
  ScoreOptions so = options.scoring;
  so.task_id = task.id;
  rep.head_scores = score_groups(sliced, train_split.all_images(), labels, GroupKind::kHead, so);
  rep.rho_head = options.rho_head;
  HeadPruneResult heads =
      prune_heads(sliced, rep.head_scores, options.rho_head, options.per_layer_heads);
  rep.kept_heads = heads.kept;
  rep.notes = heads.notes;
  result.model = std::move(heads.model);
  return result;
}

}  // namespace vitprune
