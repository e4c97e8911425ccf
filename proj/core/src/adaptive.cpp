#include "vitprune/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "surgery.hpp"
#include "vitprune/errors.hpp"
#include "vitprune/linalg.hpp"
#include "vitprune/oneshot.hpp"
#include "vitprune/train.hpp"

namespace vitprune {

std::string to_string(SvdMode mode) { return mode == SvdMode::kProduct ? "product" : "joint"; }

SvdMode parse_svd_mode(const std::string& name) {
  if (name == "product") return SvdMode::kProduct;
  if (name == "joint") return SvdMode::kJoint;
  throw ArgumentError("unknown svd mode '" + name + "' (expected product or joint)");
}

std::string to_string(DecayLaw law) {
  return law == DecayLaw::kSubtractive ? "subtractive" : "multiplicative";
}

DecayLaw parse_decay_law(const std::string& name) {
  if (name == "subtractive") return DecayLaw::kSubtractive;
  if (name == "multiplicative") return DecayLaw::kMultiplicative;
  throw ArgumentError("unknown decay law '" + name + "'");
}

void PruneConfig::validate() const {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ArgumentError("alpha must be in [0, 1)");
  for (double rho : {rho_depth, rho_head}) {
    if (!(rho > 0.0 && rho <= 1.0)) throw ArgumentError("rho thresholds must be in (0, 1]");
  }
  for (double g : {gamma_qkv, gamma_exp, gamma_emb}) {
    if (!(g > 0.0 && g < 1.0)) throw ArgumentError("decay rates must be in (0, 1)");
  }
  if (max_iterations < 0) throw ArgumentError("max_iterations must be >= 0");
}

void to_json(nlohmann::json& j, const PruneConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"metric", to_string(c.metric)},
                     {"rho_depth", c.rho_depth},
                     {"rho_head", c.rho_head},
                     {"gamma_qkv", c.gamma_qkv},
                     {"gamma_exp", c.gamma_exp},
                     {"gamma_emb", c.gamma_emb},
                     {"max_iterations", c.max_iterations},
                     {"svd_mode", to_string(c.svd_mode)},
                     {"decay", to_string(c.decay)},
                     {"score_samples", c.score_samples},
                     {"score_batch_size", c.scoring.batch_size}};
}

DecayState DecayState::at(int k, const PruneConfig& config) {
  DecayState s;
  s.k = k;
  auto rho = [&](double gamma) {
    if (config.decay == DecayLaw::kSubtractive) return std::max(0.0, 1.0 - k * gamma);
    return std::pow(1.0 - gamma, k);
  };
  s.rho_qkv = rho(config.gamma_qkv);
  s.rho_exp = rho(config.gamma_exp);
  s.rho_emb = rho(config.gamma_emb);
  return s;
}

namespace {

// [W | b] block of `width` rows starting at row0, as [width x (d+1)].
TensorD augmented_rows(const Tensor& w, const Tensor& b, std::size_t row0, std::size_t width) {
  const std::size_t d = w.cols();
  TensorD out({width, d + 1});
  for (std::size_t i = 0; i < width; ++i) {
    for (std::size_t j = 0; j < d; ++j) out(i, j) = w(row0 + i, j);
    out(i, d) = b[row0 + i];
  }
  return out;
}

// Columns [col0, col0+width) of W_O, transposed: [width x d].
TensorD wo_block_t(const Tensor& wo, std::size_t col0, std::size_t width) {
  const std::size_t d = wo.rows();
  TensorD out({width, d});
  for (std::size_t i = 0; i < width; ++i) {
    for (std::size_t j = 0; j < d; ++j) out(i, j) = wo(j, col0 + i);
  }
  return out;
}

TensorD hconcat(const TensorD& a, const TensorD& b) {
  TensorD out({a.rows(), a.cols() + b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
  }
  return out;
}

// Left and right factors of one head: rows of `left` are the new query
// (value) rows, rows of `right` the new key rows (W_O columns), both [r x .].
struct HeadFactors {
  BasicSvd<double> svd;
  TensorD first;   // Q~ or V~
  TensorD second;  // K~ or W_O^T block
};

HeadFactors factor_head(const TensorD& first, const TensorD& second, SvdMode mode) {
  HeadFactors f{{}, first, second};
  f.svd = mode == SvdMode::kProduct ? svd(matmul_tn(first, second))
                                    : svd(hconcat(first, second));
  return f;
}

// Truncated factors [r x cols(first)], [r x cols(second)].
std::pair<TensorD, TensorD> rebuild(const HeadFactors& f, std::size_t r, SvdMode mode) {
  const std::size_t c1 = f.first.cols(), c2 = f.second.cols();
  TensorD a({r, c1}), b({r, c2});
  if (mode == SvdMode::kProduct) {
    for (std::size_t i = 0; i < r; ++i) {
      const double s = std::sqrt(f.svd.sigma[i]);
      for (std::size_t j = 0; j < c1; ++j) a(i, j) = f.svd.u(j, i) * s;
      for (std::size_t j = 0; j < c2; ++j) b(i, j) = f.svd.vt(i, j) * s;
    }
  } else {
    const std::size_t w = f.first.rows();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c1; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < w; ++t) s += f.svd.u(t, i) * f.first(t, j);
        a(i, j) = s;
      }
      for (std::size_t j = 0; j < c2; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < w; ++t) s += f.svd.u(t, i) * f.second(t, j);
        b(i, j) = s;
      }
    }
  }
  return {std::move(a), std::move(b)};
}

std::vector<HeadFactors> qk_factors(const VitModel& model, int layer, SvdMode mode) {
  const LayerConfig& lc = model.config.layers.at(layer);
  const LayerParams<float>& p = model.params.layers[layer];
  const std::size_t w = lc.qk_head_width();
  std::vector<HeadFactors> out;
  for (int h = 0; h < lc.heads; ++h) {
    out.push_back(factor_head(augmented_rows(p.wq, p.bq, h * w, w),
                              augmented_rows(p.wk, p.bk, h * w, w), mode));
  }
  return out;
}

std::vector<HeadFactors> v_factors(const VitModel& model, int layer, SvdMode mode) {
  const LayerConfig& lc = model.config.layers.at(layer);
  const LayerParams<float>& p = model.params.layers[layer];
  const std::size_t w = lc.value_head_width();
  std::vector<HeadFactors> out;
  for (int h = 0; h < lc.heads; ++h) {
    out.push_back(factor_head(augmented_rows(p.wv, p.bv, h * w, w),
                              wo_block_t(p.wo, h * w, w), mode));
  }
  return out;
}

std::vector<std::vector<double>> spectra_of(const std::vector<HeadFactors>& factors,
                                            std::size_t width) {
  std::vector<std::vector<double>> out;
  for (const HeadFactors& f : factors) {
    const std::size_t n = std::min(width, f.svd.sigma.size());
    out.emplace_back(f.svd.sigma.begin(), f.svd.sigma.begin() + n);
  }
  return out;
}

std::size_t max_rank(const std::vector<HeadFactors>& factors, std::size_t width) {
  std::size_t r = width;
  for (const HeadFactors& f : factors) r = std::min(r, f.svd.sigma.size());
  return r;
}

void apply_qk(VitModel& model, int layer, const std::vector<HeadFactors>& factors,
              std::size_t r, SvdMode mode) {
  LayerConfig& lc = model.config.layers[layer];
  LayerParams<float>& p = model.params.layers[layer];
  const std::size_t d = model.config.embed_dim, H = lc.heads;
  const double scale = std::sqrt(static_cast<double>(r) / lc.qk_head_width());
  Tensor wq({H * r, d}), bq({H * r}), wk({H * r, d}), bk({H * r});
  for (std::size_t h = 0; h < H; ++h) {
    const auto [qa, kb] = rebuild(factors[h], r, mode);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t row = h * r + i;
      for (std::size_t j = 0; j < d; ++j) {
        wq(row, j) = static_cast<float>(qa(i, j) * scale);
        wk(row, j) = static_cast<float>(kb(i, j));
      }
      bq[row] = static_cast<float>(qa(i, d) * scale);
      bk[row] = static_cast<float>(kb(i, d));
    }
  }
  p.wq = std::move(wq);
  p.bq = std::move(bq);
  p.wk = std::move(wk);
  p.bk = std::move(bk);
  lc.qk_size = static_cast<int>(H * r);
}

void apply_v(VitModel& model, int layer, const std::vector<HeadFactors>& factors,
             std::size_t r, SvdMode mode) {
  LayerConfig& lc = model.config.layers[layer];
  LayerParams<float>& p = model.params.layers[layer];
  const std::size_t d = model.config.embed_dim, H = lc.heads;
  Tensor wv({H * r, d}), bv({H * r}), wo({d, H * r});
  for (std::size_t h = 0; h < H; ++h) {
    const auto [va, ob] = rebuild(factors[h], r, mode);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t row = h * r + i;
      for (std::size_t j = 0; j < d; ++j) {
        wv(row, j) = static_cast<float>(va(i, j));
        wo(j, row) = static_cast<float>(ob(i, j));
      }
      bv[row] = static_cast<float>(va(i, d));
    }
  }
  p.wv = std::move(wv);
  p.bv = std::move(bv);
  p.wo = std::move(wo);
  lc.value_size = static_cast<int>(H * r);
}

void check_layer(const VitModel& model, int layer) {
  if (layer < 0 || layer >= model.config.depth()) {
    throw ArgumentError("layer " + std::to_string(layer) + " out of range");
  }
}

void check_rank(int r, int width) {
  if (r < 1 || r > width) {
    throw ArgumentError("per-head rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(width) + "]");
  }
}

}  // namespace

std::vector<std::vector<double>> qk_head_spectra(const VitModel& model, int layer,
                                                 SvdMode mode) {
  check_layer(model, layer);
  return spectra_of(qk_factors(model, layer, mode), model.config.layers[layer].qk_head_width());
}

std::vector<std::vector<double>> value_head_spectra(const VitModel& model, int layer,
                                                    SvdMode mode) {
  check_layer(model, layer);
  return spectra_of(v_factors(model, layer, mode),
                    model.config.layers[layer].value_head_width());
}

int select_head_rank(const std::vector<std::vector<double>>& spectra, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ArgumentError("rho must be in [0, 1]");
  std::size_t width = 0;
  for (const auto& s : spectra) width = std::max(width, s.size());
  double total = 0.0;
  for (std::size_t i = 0; i < width; ++i) {
    for (const auto& s : spectra) {
      if (i < s.size()) total += s[i] * s[i];
    }
  }
  if (total == 0.0) return 0;
  double cum = 0.0;
  for (std::size_t r = 0; r < width; ++r) {
    if (cum / total >= rho) return static_cast<int>(r);
    for (const auto& s : spectra) {
      if (r < s.size()) cum += s[r] * s[r];
    }
  }
  return static_cast<int>(width);
}

RankChange svd_prune_qk(VitModel& model, int layer, double rho, SvdMode mode) {
  check_layer(model, layer);
  if (!(rho > 0.0 && rho <= 1.0)) throw ArgumentError("rho_qkv must be in (0, 1]");
  const LayerConfig& lc = model.config.layers[layer];
  const auto factors = qk_factors(model, layer, mode);
  const std::size_t width = max_rank(factors, lc.qk_head_width());
  RankChange change{layer, lc.qk_size, 0, false};
  int r = select_head_rank(spectra_of(factors, width), rho);
  if (r < 1) {
    r = 1;
    change.clamped = true;
  }
  apply_qk(model, layer, factors, std::min<std::size_t>(r, width), mode);
  change.after = model.config.layers[layer].qk_size;
  return change;
}

RankChange svd_prune_v(VitModel& model, int layer, double rho, SvdMode mode) {
  check_layer(model, layer);
  if (!(rho > 0.0 && rho <= 1.0)) throw ArgumentError("rho_qkv must be in (0, 1]");
  const LayerConfig& lc = model.config.layers[layer];
  const auto factors = v_factors(model, layer, mode);
  const std::size_t width = max_rank(factors, lc.value_head_width());
  RankChange change{layer, lc.value_size, 0, false};
  int r = select_head_rank(spectra_of(factors, width), rho);
  if (r < 1) {
    r = 1;
    change.clamped = true;
  }
  apply_v(model, layer, factors, std::min<std::size_t>(r, width), mode);
  change.after = model.config.layers[layer].value_size;
  return change;
}

void svd_prune_qk_to_rank(VitModel& model, int layer, int per_head_rank, SvdMode mode) {
  check_layer(model, layer);
  const auto factors = qk_factors(model, layer, mode);
  check_rank(per_head_rank,
             static_cast<int>(max_rank(factors, model.config.layers[layer].qk_head_width())));
  apply_qk(model, layer, factors, per_head_rank, mode);
}

void svd_prune_v_to_rank(VitModel& model, int layer, int per_head_rank, SvdMode mode) {
  check_layer(model, layer);
  const auto factors = v_factors(model, layer, mode);
  check_rank(per_head_rank,
             static_cast<int>(max_rank(factors, model.config.layers[layer].value_head_width())));
  apply_v(model, layer, factors, per_head_rank, mode);
}

namespace {

// Top `r` rows of each head by score (ties to the lower row), ascending.
std::vector<std::vector<std::size_t>> top_rows_per_head(const ImportanceMap& scores, int layer,
                                                        int heads, int width, int r) {
  std::vector<std::vector<std::size_t>> out(heads);
  for (int h = 0; h < heads; ++h) {
    std::vector<std::size_t> rows(width);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    std::vector<double> s(width);
    for (int i = 0; i < width; ++i) s[i] = scores.at(layer, h * width + i);
    std::stable_sort(rows.begin(), rows.end(),
                     [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    rows.resize(r);
    std::sort(rows.begin(), rows.end());
    out[h] = std::move(rows);
  }
  return out;
}

}  // namespace

void score_prune_qk_to_rank(VitModel& model, const ImportanceMap& row_scores, int layer,
                            int per_head_rank) {
  check_layer(model, layer);
  if (row_scores.kind != GroupKind::kQueryKeyRow) throw ArgumentError("expected qk_row scores");
  const LayerConfig& lc = model.config.layers[layer];
  const int width = lc.qk_head_width();
  check_rank(per_head_rank, width);
  const auto rows = top_rows_per_head(row_scores, layer, lc.heads, width, per_head_rank);
  detail::keep_qk_rows(model, layer, rows);
  const float scale = static_cast<float>(std::sqrt(static_cast<double>(per_head_rank) / width));
  LayerParams<float>& p = model.params.layers[layer];
  for (float& x : p.wq.values()) x *= scale;
  for (float& x : p.bq.values()) x *= scale;
}

void score_prune_v_to_rank(VitModel& model, const ImportanceMap& row_scores, int layer,
                           int per_head_rank) {
  check_layer(model, layer);
  if (row_scores.kind != GroupKind::kValueRow) throw ArgumentError("expected value_row scores");
  const LayerConfig& lc = model.config.layers[layer];
  const int width = lc.value_head_width();
  check_rank(per_head_rank, width);
  detail::keep_value_rows(model, layer,
                          top_rows_per_head(row_scores, layer, lc.heads, width, per_head_rank));
}

int prune_expansion(VitModel& model, const ImportanceMap& neuron_scores, double rho_exp) {
  if (neuron_scores.kind != GroupKind::kNeuron) throw ArgumentError("expected neuron scores");
  const ModelConfig& cfg = model.config;
  std::map<std::pair<int, int>, double> lookup;
  for (const GroupScore& s : neuron_scores.scores) lookup[{s.layer, s.index}] = s.score;
  std::vector<double> flat;
  for (int l = 1; l < cfg.depth(); ++l) {
    for (int i = 0; i < cfg.layers[l].expansion_size; ++i) {
      const auto it = lookup.find({l, i});
      if (it == lookup.end()) {
        throw ArgumentError("missing neuron score for (" + std::to_string(l) + ", " +
                            std::to_string(i) + ")");
      }
      flat.push_back(it->second);
    }
  }
  if (flat.empty()) return 0;
  const std::vector<bool> keep = minimal_retained_set(flat, rho_exp);
  int removed = 0;
  std::size_t pos = 0;
  for (int l = 1; l < model.config.depth(); ++l) {
    const std::size_t e = model.config.layers[l].expansion_size;
    const std::vector<bool> mask(keep.begin() + pos, keep.begin() + pos + e);
    pos += e;
    const auto kept = detail::kept_positions(mask);
    removed += static_cast<int>(e - kept.size());
    if (kept.size() != e) detail::keep_neurons(model, l, kept);
  }
  return removed;
}

std::vector<std::size_t> prune_embedding(VitModel& model, const ImportanceMap& scores,
                                         double rho_emb, std::vector<std::string>* notes) {
  if (scores.kind != GroupKind::kEmbedDim) throw ArgumentError("expected embed_dim scores");
  const int d = model.config.embed_dim;
  std::vector<double> flat(d);
  for (int j = 0; j < d; ++j) flat[j] = scores.at(-1, j);
  std::vector<std::size_t> kept = detail::kept_positions(minimal_retained_set(flat, rho_emb));
  if (kept.empty()) {
    kept.push_back(static_cast<std::size_t>(std::max_element(flat.begin(), flat.end()) -
                                            flat.begin()));
    if (notes) notes->push_back("embedding threshold would remove every dimension; kept the best one");
  }
  if (kept.size() != static_cast<std::size_t>(d)) detail::keep_embed_dims(model, kept);
  return kept;
}

void to_json(nlohmann::json& j, const IterationRecord& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerShape& s : r.layers) {
    layers.push_back({{"H", s.heads}, {"q", s.qk_size}, {"v", s.value_size}, {"e", s.expansion_size}});
  }
  j = nlohmann::json{{"k", r.k},
                     {"rho_qkv", r.rho_qkv},
                     {"rho_exp", r.rho_exp},
                     {"rho_emb", r.rho_emb},
                     {"layers", layers},
                     {"d", r.embed_dim},
                     {"budget",
                      {{"params_a2", r.budget.params},
                       {"flops_a2", r.budget.flops},
                       {"params_exact", r.budget.params_exact}}},
                     {"budget_fraction", r.budget_fraction},
                     {"steps", r.steps}};
}

std::vector<std::size_t> strided_sample(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> ids;
  if (limit == 0 || limit >= n) {
    ids.resize(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    return ids;
  }
  for (std::size_t i = 0; i < limit; ++i) ids.push_back(i * n / limit);
  return ids;
}

AdaptiveResult adaptive_search(const VitModel& model, const Dataset& train_split,
                               const ImportanceMap& embed_scores, const PruneConfig& config,
                               const Budget& base_budget) {
  config.validate();
  AdaptiveResult res{model, {}, {}, false, 0.0};
  const double target = 1.0 - config.alpha;
  auto fraction = [&] {
    return budget_fraction(measure_budget(res.model), base_budget, config.metric);
  };
  double frac = fraction();
  if (frac <= target) {
    res.reached = true;
    res.achieved_rate = 1.0 - frac;
    return res;
  }
  if (train_split.size() == 0) throw ArgumentError("adaptive pruning needs training samples");

  std::vector<double> emb(model.config.embed_dim);
  for (int j = 0; j < model.config.embed_dim; ++j) emb[j] = embed_scores.at(-1, j);

  const std::vector<std::size_t> ids = strided_sample(train_split.size(), config.score_samples);
  const Tensor images = train_split.images(ids);
  const std::vector<int> all_labels = model_labels(model, train_split);
  std::vector<int> labels;
  for (std::size_t i : ids) labels.push_back(all_labels[i]);

  for (int k = 1; k <= config.max_iterations; ++k) {
    const DecayState st = DecayState::at(k, config);
    if (st.exhausted()) {
      res.notes.push_back("all thresholds decayed to zero at iteration " + std::to_string(k));
      break;
    }
    IterationRecord rec;
    rec.k = k;
    rec.rho_qkv = st.rho_qkv;
    rec.rho_exp = st.rho_exp;
    rec.rho_emb = st.rho_emb;
    auto reached_after = [&](const char* step) {
      rec.steps.push_back(step);
      frac = fraction();
      return frac <= target;
    };

    bool done = false;
    if (st.rho_qkv > 0.0) {
      for (int l = 0; l < res.model.config.depth(); ++l) {
        if (svd_prune_qk(res.model, l, st.rho_qkv, config.svd_mode).clamped) {
          res.notes.push_back("iteration " + std::to_string(k) + ": layer " +
                              std::to_string(l) + " query-key rank clamped to one per head");
        }
      }
      done = reached_after("qk");
      if (!done) {
        for (int l = 0; l < res.model.config.depth(); ++l) {
          if (svd_prune_v(res.model, l, st.rho_qkv, config.svd_mode).clamped) {
            res.notes.push_back("iteration " + std::to_string(k) + ": layer " +
                                std::to_string(l) + " value rank clamped to one per head");
          }
        }
        done = reached_after("v");
      }
    }
    if (!done && st.rho_exp > 0.0 && res.model.config.depth() > 1) {
      const ImportanceMap neurons =
          score_groups(res.model, images, labels, GroupKind::kNeuron, config.scoring);
      prune_expansion(res.model, neurons, st.rho_exp);
      done = reached_after("expansion");
    }
    if (!done && st.rho_emb > 0.0) {
      ImportanceMap current;
      current.kind = GroupKind::kEmbedDim;
      current.sample_count = embed_scores.sample_count;
      for (std::size_t j = 0; j < emb.size(); ++j) {
        current.scores.push_back({-1, static_cast<int>(j), emb[j]});
      }
      const auto kept = prune_embedding(res.model, current, st.rho_emb, &res.notes);
      std::vector<double> next;
      for (std::size_t j : kept) next.push_back(emb[j]);
      emb = std::move(next);
      done = reached_after("embedding");
    }

    for (const LayerConfig& lc : res.model.config.layers) {
      rec.layers.push_back({lc.heads, lc.qk_size, lc.value_size, lc.expansion_size});
    }
    rec.embed_dim = res.model.config.embed_dim;
    rec.budget = measure_budget(res.model);
    rec.budget_fraction = frac;
    res.iterations.push_back(std::move(rec));
    if (done) {
      res.reached = true;
      break;
    }
  }
  res.achieved_rate = 1.0 - frac;
  if (!res.reached && static_cast<int>(res.iterations.size()) >= config.max_iterations) {
    res.notes.push_back("iteration cap reached before the target rate");
  }
  return res;
}

AdaptiveResult run_adaptive(const VitModel& model, const Dataset& train_split,
                            const ImportanceMap& embed_scores, const PruneConfig& config,
                            const Budget& base_budget) {
  AdaptiveResult res = adaptive_search(model, train_split, embed_scores, config, base_budget);
  if (!res.reached) {
    throw UnreachableTargetError("target pruning rate " + std::to_string(config.alpha) +
                                     " not reached; best achieved " +
                                     std::to_string(res.achieved_rate),
                                 res.achieved_rate);
  }
  return res;
}

}  // namespace vitprune
