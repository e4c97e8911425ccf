#include "vitprune/score.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "engine.hpp"
#include "vitprune/grad.hpp"
#include "vitprune/linalg.hpp"
#include "vitprune/parallel.hpp"

namespace vitprune {

std::string to_string(GroupKind kind) {
  switch (kind) {
    case GroupKind::kHead: return "head";
    case GroupKind::kNeuron: return "neuron";
    case GroupKind::kEmbedDim: return "embed_dim";
    case GroupKind::kQueryKeyRow: return "qk_row";
    case GroupKind::kValueRow: return "value_row";
  }
  return "unknown";
}

GroupKind parse_group_kind(const std::string& name) {
  for (GroupKind k : {GroupKind::kHead, GroupKind::kNeuron, GroupKind::kEmbedDim,
                      GroupKind::kQueryKeyRow, GroupKind::kValueRow}) {
    if (to_string(k) == name) return k;
  }
  throw ArgumentError("unknown group kind '" + name + "'");
}

namespace {

// Flat offsets of rows [r0, r1) of a rows x cols matrix.
std::vector<std::size_t> row_block(std::size_t r0, std::size_t r1, std::size_t cols) {
  std::vector<std::size_t> out;
  out.reserve((r1 - r0) * cols);
  for (std::size_t r = r0; r < r1; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.push_back(r * cols + c);
  }
  return out;
}

// Flat offsets of columns [c0, c1) of a rows x cols matrix.
std::vector<std::size_t> col_block(std::size_t c0, std::size_t c1, std::size_t rows,
                                   std::size_t cols) {
  std::vector<std::size_t> out;
  out.reserve((c1 - c0) * rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = c0; c < c1; ++c) out.push_back(r * cols + c);
  }
  return out;
}

std::vector<std::size_t> range(std::size_t b, std::size_t e) {
  std::vector<std::size_t> out(e - b);
  std::iota(out.begin(), out.end(), b);
  return out;
}

std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }

}  // namespace

std::vector<WeightGroup> enumerate_groups(const ModelConfig& config, GroupKind kind) {
  const std::size_t d = config.embed_dim;
  std::vector<WeightGroup> groups;
  if (kind == GroupKind::kEmbedDim) {
    const std::size_t P = config.patch_dim(), T = config.tokens();
    for (std::size_t j = 0; j < d; ++j) {
      WeightGroup g{kind, -1, static_cast<int>(j), {}};
      g.members.push_back({"patch_embed.weight", row_block(j, j + 1, P)});
      g.members.push_back({"patch_embed.bias", {j}});
      g.members.push_back({"cls_token", {j}});
      g.members.push_back({"pos_embed", col_block(j, j + 1, T, d)});
      for (int l = 0; l < config.depth(); ++l) {
        const LayerConfig& lc = config.layers[l];
        const std::string pre = layer_prefix(l);
        const std::size_t q = lc.qk_size, v = lc.value_size, e = lc.expansion_size;
        g.members.push_back({pre + "ln1.gamma", {j}});
        g.members.push_back({pre + "ln1.beta", {j}});
        g.members.push_back({pre + "attn.wq", col_block(j, j + 1, q, d)});
        g.members.push_back({pre + "attn.wk", col_block(j, j + 1, q, d)});
        g.members.push_back({pre + "attn.wv", col_block(j, j + 1, v, d)});
        g.members.push_back({pre + "attn.wo", row_block(j, j + 1, v)});
        g.members.push_back({pre + "attn.bo", {j}});
        g.members.push_back({pre + "ln2.gamma", {j}});
        g.members.push_back({pre + "ln2.beta", {j}});
        g.members.push_back({pre + "mlp.w1", col_block(j, j + 1, e, d)});
        g.members.push_back({pre + "mlp.w2", row_block(j, j + 1, e)});
        g.members.push_back({pre + "mlp.b2", {j}});
      }
      g.members.push_back({"head.ln.gamma", {j}});
      g.members.push_back({"head.ln.beta", {j}});
      g.members.push_back({"head.weight", col_block(j, j + 1, config.num_classes, d)});
      groups.push_back(std::move(g));
    }
    return groups;
  }
  for (int l = 0; l < config.depth(); ++l) {
    const LayerConfig& lc = config.layers[l];
    const std::string pre = layer_prefix(l);
    const std::size_t q = lc.qk_size, v = lc.value_size, e = lc.expansion_size;
    switch (kind) {
      case GroupKind::kHead: {
        const std::size_t qw = lc.qk_head_width(), vw = lc.value_head_width();
        for (int h = 0; h < lc.heads; ++h) {
          WeightGroup g{kind, l, h, {}};
          const std::size_t q0 = h * qw, q1 = q0 + qw, v0 = h * vw, v1 = v0 + vw;
          g.members.push_back({pre + "attn.wq", row_block(q0, q1, d)});
          g.members.push_back({pre + "attn.bq", range(q0, q1)});
          g.members.push_back({pre + "attn.wk", row_block(q0, q1, d)});
          g.members.push_back({pre + "attn.bk", range(q0, q1)});
          g.members.push_back({pre + "attn.wv", row_block(v0, v1, d)});
          g.members.push_back({pre + "attn.bv", range(v0, v1)});
          g.members.push_back({pre + "attn.wo", col_block(v0, v1, d, v)});
          groups.push_back(std::move(g));
        }
        break;
      }
      case GroupKind::kNeuron:
        for (std::size_t i = 0; i < e; ++i) {
          WeightGroup g{kind, l, static_cast<int>(i), {}};
          g.members.push_back({pre + "mlp.w1", row_block(i, i + 1, d)});
          g.members.push_back({pre + "mlp.b1", {i}});
          g.members.push_back({pre + "mlp.w2", col_block(i, i + 1, d, e)});
          groups.push_back(std::move(g));
        }
        break;
      case GroupKind::kQueryKeyRow:
        for (std::size_t i = 0; i < q; ++i) {
          WeightGroup g{kind, l, static_cast<int>(i), {}};
          g.members.push_back({pre + "attn.wq", row_block(i, i + 1, d)});
          g.members.push_back({pre + "attn.bq", {i}});
          g.members.push_back({pre + "attn.wk", row_block(i, i + 1, d)});
          g.members.push_back({pre + "attn.bk", {i}});
          groups.push_back(std::move(g));
        }
        break;
      case GroupKind::kValueRow:
        for (std::size_t i = 0; i < v; ++i) {
          WeightGroup g{kind, l, static_cast<int>(i), {}};
          g.members.push_back({pre + "attn.wv", row_block(i, i + 1, d)});
          g.members.push_back({pre + "attn.bv", {i}});
          g.members.push_back({pre + "attn.wo", col_block(i, i + 1, d, v)});
          groups.push_back(std::move(g));
        }
        break;
      case GroupKind::kEmbedDim:
        break;
    }
  }
  return groups;
}

std::vector<double> ImportanceMap::values() const {
  std::vector<double> out;
  out.reserve(scores.size());
  for (const auto& s : scores) out.push_back(s.score);
  return out;
}

double ImportanceMap::at(int layer, int index) const {
  for (const auto& s : scores) {
    if (s.layer == layer && s.index == index) return s.score;
  }
  throw ArgumentError("no " + to_string(kind) + " score for (" + std::to_string(layer) +
                      ", " + std::to_string(index) + ")");
}

void to_json(nlohmann::json& j, const ImportanceMap& map) {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& s : map.scores) {
    nlohmann::json entry;
    entry["layer"] = s.layer < 0 ? nlohmann::json(nullptr) : nlohmann::json(s.layer);
    entry["index"] = s.index;
    entry["score"] = s.score;
    scores.push_back(std::move(entry));
  }
  j = nlohmann::json{{"kind", to_string(map.kind)},
                     {"task_id", map.task_id},
                     {"sample_count", map.sample_count},
                     {"scores", std::move(scores)}};
}

void from_json(const nlohmann::json& j, ImportanceMap& map) {
  map.kind = parse_group_kind(j.at("kind").get<std::string>());
  map.task_id = j.value("task_id", "");
  map.sample_count = j.at("sample_count").get<std::size_t>();
  map.scores.clear();
  for (const auto& e : j.at("scores")) {
    const int layer = e.at("layer").is_null() ? -1 : e.at("layer").get<int>();
    map.scores.push_back({layer, e.at("index").get<int>(), e.at("score").get<double>()});
  }
}

namespace {

struct ResolvedSlice {
  std::size_t tensor;
  const std::vector<std::size_t>* indices;
};

}  // namespace

ImportanceMap score_groups(const VitModel& model, const Tensor& images,
                           std::span<const int> labels, GroupKind kind,
                           const ScoreOptions& options) {
  const std::size_t n = batch_size_of(model.config, images);
  if (n == 0) throw ArgumentError("score_groups: no samples");
  if (options.batch_size == 0) throw ArgumentError("score_groups: batch_size must be > 0");
  const std::vector<WeightGroup> groups = enumerate_groups(model.config, kind);

  const auto weights = named_tensors(model.params);
  std::map<std::string, std::size_t> index_of;
  for (std::size_t t = 0; t < weights.size(); ++t) index_of[weights[t].name] = t;
  std::vector<std::vector<ResolvedSlice>> resolved(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& m : groups[g].members) {
      resolved[g].push_back({index_of.at(m.tensor), &m.indices});
    }
  }

  LossOptions loss_opts;
  loss_opts.loss_scale = options.loss_scale;
  const std::size_t stride = 3 * static_cast<std::size_t>(model.config.image_size) *
                             model.config.image_size;
  std::vector<double> totals(groups.size(), 0.0);
  std::vector<std::vector<double>> per_sample;
  for (std::size_t begin = 0; begin < n; begin += options.batch_size) {
    const std::size_t count = std::min(options.batch_size, n - begin);
    const std::size_t S = model.config.image_size;
    Tensor batch({count, 3, S, S},
                 std::vector<float>(images.data() + begin * stride,
                                    images.data() + (begin + count) * stride));
    per_sample.assign(count, std::vector<double>(groups.size(), 0.0));
    for_each_sample_gradient(
        model, batch, labels.subspan(begin, count),
        [&](std::size_t i, double, const GradientSet& grads) {
          const auto gs = named_tensors(grads);
          auto& out = per_sample[i];
          for (std::size_t g = 0; g < groups.size(); ++g) {
            double s = 0.0;
            for (const ResolvedSlice& rs : resolved[g]) {
              const float* w = weights[rs.tensor].tensor->data();
              const double* gr = gs[rs.tensor].tensor->data();
              for (std::size_t idx : *rs.indices) s += std::abs(gr[idx] * w[idx]);
            }
            out[g] = s;
          }
        },
        loss_opts);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t g = 0; g < groups.size(); ++g) totals[g] += per_sample[i][g];
    }
  }

  ImportanceMap map;
  map.kind = kind;
  map.sample_count = n;
  map.task_id = options.task_id;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    map.scores.push_back({groups[g].layer, groups[g].index,
                          totals[g] / static_cast<double>(n)});
  }
  return map;
}

double score_similarity(const ImportanceMap& a, const ImportanceMap& b) {
  if (a.kind != b.kind || a.scores.size() != b.scores.size()) {
    throw ArgumentError("score_similarity: group populations differ");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.scores.size(); ++i) {
    if (a.scores[i].layer != b.scores[i].layer || a.scores[i].index != b.scores[i].index) {
      throw ArgumentError("score_similarity: group populations differ at position " +
                          std::to_string(i));
    }
    dot += a.scores[i].score * b.scores[i].score;
    na += a.scores[i].score * a.scores[i].score;
    nb += b.scores[i].score * b.scores[i].score;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<std::size_t> top_activating_samples(const VitModel& model, const Tensor& images,
                                                int layer, int neuron, std::size_t k) {
  const ModelConfig& cfg = model.config;
  if (layer < 0 || layer >= cfg.depth()) {
    throw ArgumentError("layer " + std::to_string(layer) + " out of range");
  }
  if (neuron < 0 || neuron >= cfg.layers[layer].expansion_size) {
    throw ArgumentError("neuron " + std::to_string(neuron) + " out of range");
  }
  const std::size_t n = batch_size_of(cfg, images);
  if (k > n) {
    throw ArgumentError("k = " + std::to_string(k) + " exceeds dataset size " +
                        std::to_string(n));
  }
  const std::size_t stride = 3 * static_cast<std::size_t>(cfg.image_size) * cfg.image_size;
  const std::size_t d = cfg.embed_dim;
  const ParamSet<double> w = detail::to_double(model.params);
  std::vector<double> act(n);
  parallel_for(n, [&](std::size_t s) {
    detail::SampleCache cache;
    detail::forward_sample(cfg, w, images.data() + s * stride, layer + 1,
                           detail::model_head(w, cfg), &cache);
    const auto& lc = cache.layers[layer];
    double pre = w.layers[layer].b1[neuron];
    for (std::size_t j = 0; j < d; ++j) pre += lc.b[j] * w.layers[layer].w1(neuron, j);
    act[s] = gelu(pre);
  });
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::stable_sort(ids.begin(), ids.end(),
                   [&](std::size_t a, std::size_t b) { return act[a] > act[b]; });
  ids.resize(k);
  return ids;
}

}  // namespace vitprune
