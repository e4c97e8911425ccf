#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vitprune/budget.hpp"
#include "vitprune/container.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/oneshot.hpp"
#include "vitprune/parallel.hpp"
#include "vitprune/pipeline.hpp"
#include "vitprune/score.hpp"
#include "vitprune/train.hpp"

namespace vp = vitprune;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitUnreachable = 2;
constexpr int kExitFormat = 3;

vp::Dataset load_data(const std::string& source) {
  if (source.empty()) return vp::make_synthetic(vp::SyntheticSpec{});
  return vp::load_dataset(source);
}

vp::SubTask load_task(const std::string& path, const std::vector<int>& classes) {
  if (!path.empty()) return vp::load_subtask(path);
  if (classes.empty()) throw vp::ArgumentError("give --task or --classes");
  vp::SubTask t{classes, ""};
  for (int c : classes) t.id += (t.id.empty() ? "" : "-") + std::to_string(c);
  return t;
}

void emit(const json& j, const std::string& path) {
  if (path.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw vp::ArgumentError("cannot write " + path);
  out << j.dump(2) << "\n";
}

// "1:5:2.5" -> multipliers for the qkv, expansion and embedding decay steps.
std::vector<double> parse_ratio(const std::string& text) {
  std::vector<double> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ':');) parts.push_back(std::stod(item));
  if (parts.size() != 3 || parts[0] <= 0.0) throw vp::ArgumentError("bad --gamma-ratio " + text);
  return parts;
}

struct TrainArgs {
  std::string data, out, report;
  int image = 32, patch = 4, dim = 32, depth = 2, heads = 4, qk = 32, value = 32, expansion = 64;
  int epochs = 20;
  std::size_t batch = 64;
  double lr = 1e-3, weight_decay = 0.05;
  std::uint64_t seed = 0;
};

int run_train(const TrainArgs& a) {
  const vp::Dataset data = load_data(a.data);
  const vp::ModelConfig config = vp::ModelConfig::uniform(
      a.image, a.patch, a.dim, a.depth, a.heads, a.qk, a.value, a.expansion,
      static_cast<int>(data.class_ids.size()));
  vp::VitModel model = vp::init_model(config, a.seed, data.class_ids);
  vp::TrainRun run;
  run.epochs = a.epochs;
  run.batch_size = a.batch;
  run.seed = a.seed;
  run.optimizer.learning_rate = a.lr;
  run.optimizer.weight_decay = a.weight_decay;
  const vp::Dataset train = data.split(vp::Split::kTrain), eval = data.split(vp::Split::kEval);
  vp::train(model, train, run, &eval);
  vp::save_model(model, a.out);
  json rep = {{"run", run},
              {"train_accuracy", vp::evaluate(model, train)},
              {"eval_accuracy", vp::evaluate(model, eval)},
              {"budget", vp::budget_report(vp::measure_budget(model), vp::measure_budget(model),
                                           vp::BudgetMetric::kParams)},
              {"threads", vp::worker_count()}};
  emit(rep, a.report);
  return kExitOk;
}

struct DeriveArgs {
  std::string model, data, task, out, report, metric = "params", gamma_ratio = "1:5:2.5",
                                              svd_mode = "product", decay = "subtractive";
  std::vector<int> classes;
  double alpha = 0.5, rho_depth = 0.95, rho_head = 0.90, gamma_qkv = 0.01;
  int recovery_epochs = -1;
  bool per_layer_heads = false, task_embed = false;
  std::uint64_t seed = 0;
};

int finish_derivation(const vp::DerivationResult& r, const std::string& out,
                      const std::string& report) {
  vp::save_model(r.edge, out);
  emit(r.report, report);
  std::fprintf(stderr, "achieved rate %.4f%s\n", r.achieved_rate,
               r.reached ? "" : " (target not reached)");
  return r.reached ? kExitOk : kExitUnreachable;
}

int run_derive(const DeriveArgs& a) {
  const vp::VitModel base = vp::load_model(a.model);
  const vp::Dataset data = load_data(a.data);
  const vp::SubTask task = load_task(a.task, a.classes);
  vp::DeriveOptions o;
  o.prune.alpha = a.alpha;
  o.prune.metric = vp::parse_budget_metric(a.metric);
  o.prune.rho_depth = a.rho_depth;
  o.prune.rho_head = a.rho_head;
  const auto ratio = parse_ratio(a.gamma_ratio);
  o.prune.gamma_qkv = a.gamma_qkv;
  o.prune.gamma_exp = a.gamma_qkv * ratio[1] / ratio[0];
  o.prune.gamma_emb = a.gamma_qkv * ratio[2] / ratio[0];
  o.prune.svd_mode = vp::parse_svd_mode(a.svd_mode);
  o.prune.decay = vp::parse_decay_law(a.decay);
  o.per_layer_heads = a.per_layer_heads;
  o.task_specific_embed = a.task_embed;
  o.seed = a.seed;
  o.recovery = vp::default_recovery(a.seed);
  if (a.recovery_epochs >= 0) o.recovery.epochs = a.recovery_epochs;
  o.probe_training.seed = a.seed;
  return finish_derivation(vp::derive(base, data, task, o), a.out, a.report);
}

int run_random_prune(const DeriveArgs& a) {
  const vp::VitModel base = vp::load_model(a.model);
  const vp::Dataset data = load_data(a.data);
  const vp::SubTask task = load_task(a.task, a.classes);
  vp::TrainRun recovery = vp::default_recovery(a.seed);
  if (a.recovery_epochs >= 0) recovery.epochs = a.recovery_epochs;
  return finish_derivation(vp::random_prune(base, data, task, a.alpha,
                                            vp::parse_budget_metric(a.metric), recovery, a.seed),
                           a.out, a.report);
}

struct BenchArgs {
  std::string model, out;
  int batch = 32, repeats = 20, warmup = 3;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
  const vp::VitModel m = vp::load_model(a.model);
  json rep = vp::bench_forward(m, a.batch, a.repeats, a.warmup, a.seed);
  rep["model"] = a.model;
  emit(rep, a.out);
  return kExitOk;
}

struct AnalyzeArgs {
  std::string model, data, mode, kind = "head", out;
  std::vector<std::string> tasks;
  std::vector<int> classes;
  std::vector<int> neurons;
  int layer = 0;
  std::size_t k = 5, samples = 0;
  int probe_epochs = 3;
  bool csv = false;
};

vp::ImportanceMap task_scores(const vp::VitModel& base, const vp::Dataset& data,
                              const vp::SubTask& task, vp::GroupKind kind, std::size_t limit) {
  const vp::VitModel sliced = vp::slice_classifier(base, task);
  vp::Dataset train = vp::build_subtask_split(data, task).train;
  if (limit > 0) train = train.subset(vp::strided_sample(train.size(), limit));
  vp::ScoreOptions so;
  so.task_id = task.id;
  return vp::score_groups(sliced, train.all_images(), vp::model_labels(sliced, train), kind, so);
}

std::string scores_csv(const vp::ImportanceMap& m) {
  std::string s = "layer,index,score\n";
  for (const auto& g : m.scores) {
    s += std::to_string(g.layer) + "," + std::to_string(g.index) + "," + json(g.score).dump() + "\n";
  }
  return s;
}

int run_analyze(const AnalyzeArgs& a) {
  const vp::VitModel base = vp::load_model(a.model);
  const vp::Dataset data = load_data(a.data);
  std::vector<vp::SubTask> tasks;
  for (const auto& t : a.tasks) tasks.push_back(vp::load_subtask(t));
  if (tasks.empty()) tasks.push_back(load_task("", a.classes));
  json rep = {{"mode", a.mode}};

  if (a.mode == "scores") {
    const vp::ImportanceMap m =
        task_scores(base, data, tasks[0], vp::parse_group_kind(a.kind), a.samples);
    if (a.csv) {
      std::cout << scores_csv(m);
      return kExitOk;
    }
    rep["scores"] = m;
  } else if (a.mode == "similarity") {
    std::vector<vp::ImportanceMap> maps;
    for (const auto& t : tasks) {
      maps.push_back(task_scores(base, data, t, vp::parse_group_kind(a.kind), a.samples));
    }
    json matrix = json::array();
    for (const auto& x : maps) {
      json row = json::array();
      for (const auto& y : maps) row.push_back(vp::score_similarity(x, y));
      matrix.push_back(row);
    }
    json ids = json::array();
    for (const auto& t : tasks) ids.push_back(t.id);
    rep["tasks"] = ids;
    rep["kind"] = a.kind;
    rep["similarity"] = matrix;
  } else if (a.mode == "neurons") {
    const vp::Dataset train = vp::build_subtask_split(data, tasks[0]).train;
    const vp::Tensor images = train.all_images();
    std::vector<int> neurons = a.neurons;
    if (neurons.empty()) {
      for (int n = 0; n < base.config.layers.at(a.layer).expansion_size; ++n) neurons.push_back(n);
    }
    json list = json::array();
    for (int n : neurons) {
      const auto top = vp::top_activating_samples(base, images, a.layer, n, a.k);
      json labels = json::array();
      for (std::size_t i : top) labels.push_back(train.class_ids.at(train.labels.at(i)));
      list.push_back({{"layer", a.layer}, {"neuron", n}, {"samples", top}, {"classes", labels}});
    }
    rep["neurons"] = list;
  } else if (a.mode == "depth-probes") {
    const vp::VitModel sliced = vp::slice_classifier(base, tasks[0]);
    const vp::SubTaskSplit s = vp::build_subtask_split(data, tasks[0]);
    vp::ProbeTraining pt;
    pt.epochs = a.probe_epochs;
    rep["probes"] = vp::train_depth_probes(sliced, tasks[0], s.train, s.eval, pt);
  } else {
    throw CLI::ValidationError("--mode", "unknown mode " + a.mode);
  }
  emit(rep, a.out);
  return kExitOk;
}

int run_budget(const std::string& path, const std::string& base_path, const std::string& metric) {
  const vp::VitModel m = vp::load_model(path);
  const vp::Budget b = vp::measure_budget(m);
  const vp::Budget base = base_path.empty() ? b : vp::measure_budget(vp::load_model(base_path));
  json rep = vp::budget_report(b, base, vp::parse_budget_metric(metric));
  rep["config"] = m.config;
  emit(rep, "");
  return kExitOk;
}

int run_eval(const std::string& path, const std::string& data_src, const std::string& task_path) {
  const vp::VitModel m = vp::load_model(path);
  const vp::Dataset data = load_data(data_src);
  vp::Dataset eval = data.split(vp::Split::kEval);
  if (!task_path.empty()) eval = vp::build_subtask_split(data, vp::load_subtask(task_path)).eval;
  emit({{"samples", eval.size()}, {"correct", vp::count_correct(m, eval)},
        {"accuracy", vp::evaluate(m, eval)}},
       "");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Derive pruned edge models from a vision transformer"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a base model");
  train->add_option("--data", ta.data, "CIFAR-10 directory or synthetic spec .json");
  train->add_option("--out", ta.out, "Output container")->required();
  train->add_option("--report", ta.report, "Report JSON path");
  train->add_option("--image-size", ta.image);
  train->add_option("--patch-size", ta.patch);
  train->add_option("--embed-dim", ta.dim);
  train->add_option("--depth", ta.depth);
  train->add_option("--heads", ta.heads);
  train->add_option("--qk-size", ta.qk);
  train->add_option("--value-size", ta.value);
  train->add_option("--expansion", ta.expansion);
  train->add_option("--epochs", ta.epochs);
  train->add_option("--batch", ta.batch);
  train->add_option("--lr", ta.lr);
  train->add_option("--weight-decay", ta.weight_decay);
  train->add_option("--seed", ta.seed);

  DeriveArgs da;
  auto add_common = [&](CLI::App* c) {
    c->add_option("--model", da.model, "Base model container")->required();
    c->add_option("--data", da.data, "CIFAR-10 directory or synthetic spec .json");
    c->add_option("--task", da.task, "Sub-task JSON");
    c->add_option("--classes", da.classes, "Sub-task classes, instead of --task");
    c->add_option("--alpha", da.alpha, "Target pruning rate")->required();
    c->add_option("--metric", da.metric)->check(CLI::IsMember({"params", "flops"}));
    c->add_option("--out", da.out, "Edge model container")->required();
    c->add_option("--report", da.report, "Report JSON path");
    c->add_option("--seed", da.seed);
    c->add_option("--recovery-epochs", da.recovery_epochs);
  };
  auto* derive = app.add_subcommand("derive", "Derive an edge model for a sub-task");
  add_common(derive);
  derive->add_option("--rho-depth", da.rho_depth);
  derive->add_option("--rho-head", da.rho_head);
  derive->add_option("--gamma-qkv", da.gamma_qkv);
  derive->add_option("--gamma-ratio", da.gamma_ratio, "qkv:expansion:embedding step ratio");
  derive->add_option("--svd-mode", da.svd_mode)->check(CLI::IsMember({"product", "joint"}));
  derive->add_option("--decay", da.decay)
      ->check(CLI::IsMember({"subtractive", "multiplicative"}));
  derive->add_flag("--per-layer-heads", da.per_layer_heads);
  derive->add_flag("--task-embed", da.task_embed, "Score embedding dims on the sub-task");
  auto* random = app.add_subcommand("random-prune", "Random structured pruning baseline");
  add_common(random);

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Forward latency");
  bench->add_option("--model", ba.model)->required();
  bench->add_option("--batch", ba.batch);
  bench->add_option("--repeats", ba.repeats);
  bench->add_option("--warmup", ba.warmup);
  bench->add_option("--seed", ba.seed);
  bench->add_option("--out", ba.out);

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "Scores, similarities, neurons, depth probes");
  analyze->add_option("--model", aa.model)->required();
  analyze->add_option("--data", aa.data);
  analyze->add_option("--mode", aa.mode)
      ->required()
      ->check(CLI::IsMember({"scores", "similarity", "neurons", "depth-probes"}));
  analyze->add_option("--task", aa.tasks, "Sub-task JSON; repeat for similarity");
  analyze->add_option("--classes", aa.classes);
  analyze->add_option("--kind", aa.kind)->check(CLI::IsMember({"head", "neuron", "embed_dim"}));
  analyze->add_option("--layer", aa.layer);
  analyze->add_option("--neuron", aa.neurons);
  analyze->add_option("--k", aa.k);
  analyze->add_option("--samples", aa.samples, "Score on at most this many samples");
  analyze->add_option("--probe-epochs", aa.probe_epochs);
  analyze->add_flag("--csv", aa.csv);
  analyze->add_option("--out", aa.out);

  std::string model, base, data, task, metric = "params";
  auto* budget = app.add_subcommand("budget", "Parameter and FLOP counts");
  budget->add_option("--model", model)->required();
  budget->add_option("--base", base, "Reference model for fraction_of_base");
  budget->add_option("--metric", metric)->check(CLI::IsMember({"params", "flops"}));
  auto* eval = app.add_subcommand("eval", "Accuracy on the eval split");
  eval->add_option("--model", model)->required();
  eval->add_option("--data", data);
  eval->add_option("--task", task);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitOther;
  }

  try {
    if (*train) return run_train(ta);
    if (*derive) return run_derive(da);
    if (*random) return run_random_prune(da);
    if (*bench) return run_bench(ba);
    if (*analyze) return run_analyze(aa);
    if (*budget) return run_budget(model, base, metric);
    if (*eval) return run_eval(model, data, task);
  } catch (const vp::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitFormat;
  } catch (const vp::UnreachableTargetError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitUnreachable;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return kExitOther;
}
