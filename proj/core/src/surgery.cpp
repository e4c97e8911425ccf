#include "surgery.hpp"

namespace vitprune::detail {

Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t cols = t.cols();
  std::vector<float> data;
  data.reserve(rows.size() * cols);
  for (std::size_t r : rows) {
    const float* src = t.data() + r * cols;
    data.insert(data.end(), src, src + cols);
  }
  return Tensor({rows.size(), cols}, std::move(data));
}

Tensor select_cols(const Tensor& t, std::span<const std::size_t> cols) {
  const std::size_t rows = t.rows();
  std::vector<float> data;
  data.reserve(rows * cols.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c : cols) data.push_back(t(r, c));
  }
  return Tensor({rows, cols.size()}, std::move(data));
}

Tensor select_entries(const Tensor& t, std::span<const std::size_t> idx) {
  std::vector<float> data;
  data.reserve(idx.size());
  for (std::size_t i : idx) data.push_back(t[i]);
  return Tensor({idx.size()}, std::move(data));
}

std::vector<std::size_t> kept_positions(const std::vector<bool>& keep) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.push_back(i);
  }
  return out;
}

namespace {

// Expands per-head kept offsets into absolute row indices.
std::vector<std::size_t> absolute_rows(const std::vector<std::vector<std::size_t>>& per_head,
                                       std::size_t width) {
  std::vector<std::size_t> rows;
  for (std::size_t h = 0; h < per_head.size(); ++h) {
    for (std::size_t r : per_head[h]) rows.push_back(h * width + r);
  }
  return rows;
}

std::size_t uniform_width(const std::vector<std::vector<std::size_t>>& per_head) {
  const std::size_t w = per_head.empty() ? 0 : per_head.front().size();
  for (const auto& rows : per_head) {
    if (rows.size() != w) throw ArgumentError("heads must keep the same number of rows");
  }
  if (w == 0) throw ArgumentError("every head must keep at least one row");
  return w;
}

}  // namespace

void keep_heads(VitModel& model, int layer, std::span<const std::size_t> heads) {
  LayerConfig& lc = model.config.layers.at(layer);
  if (heads.empty()) throw ArgumentError("a layer must keep at least one head");
  const std::size_t qw = lc.qk_head_width(), vw = lc.value_head_width();
  std::vector<std::size_t> qrows, vrows;
  for (std::size_t h : heads) {
    for (std::size_t r = 0; r < qw; ++r) qrows.push_back(h * qw + r);
    for (std::size_t r = 0; r < vw; ++r) vrows.push_back(h * vw + r);
  }
  LayerParams<float>& p = model.params.layers[layer];
  p.wq = select_rows(p.wq, qrows);
  p.bq = select_entries(p.bq, qrows);
  p.wk = select_rows(p.wk, qrows);
  p.bk = select_entries(p.bk, qrows);
  p.wv = select_rows(p.wv, vrows);
  p.bv = select_entries(p.bv, vrows);
  p.wo = select_cols(p.wo, vrows);
  lc.heads = static_cast<int>(heads.size());
  lc.qk_size = static_cast<int>(qrows.size());
  lc.value_size = static_cast<int>(vrows.size());
}

void keep_qk_rows(VitModel& model, int layer,
                  const std::vector<std::vector<std::size_t>>& per_head_rows) {
  LayerConfig& lc = model.config.layers.at(layer);
  if (per_head_rows.size() != static_cast<std::size_t>(lc.heads)) {
    throw ArgumentError("row selection must cover every head");
  }
  const std::size_t w = uniform_width(per_head_rows);
  const auto rows = absolute_rows(per_head_rows, lc.qk_head_width());
  LayerParams<float>& p = model.params.layers[layer];
  p.wq = select_rows(p.wq, rows);
  p.bq = select_entries(p.bq, rows);
  p.wk = select_rows(p.wk, rows);
  p.bk = select_entries(p.bk, rows);
  lc.qk_size = static_cast<int>(w) * lc.heads;
}

void keep_value_rows(VitModel& model, int layer,
                     const std::vector<std::vector<std::size_t>>& per_head_rows) {
  LayerConfig& lc = model.config.layers.at(layer);
  if (per_head_rows.size() != static_cast<std::size_t>(lc.heads)) {
    throw ArgumentError("row selection must cover every head");
  }
  const std::size_t w = uniform_width(per_head_rows);
  const auto rows = absolute_rows(per_head_rows, lc.value_head_width());
  LayerParams<float>& p = model.params.layers[layer];
  p.wv = select_rows(p.wv, rows);
  p.bv = select_entries(p.bv, rows);
  p.wo = select_cols(p.wo, rows);
  lc.value_size = static_cast<int>(w) * lc.heads;
}

void keep_neurons(VitModel& model, int layer, std::span<const std::size_t> neurons) {
  LayerConfig& lc = model.config.layers.at(layer);
  LayerParams<float>& p = model.params.layers[layer];
  p.w1 = select_rows(p.w1, neurons);
  p.b1 = select_entries(p.b1, neurons);
  p.w2 = select_cols(p.w2, neurons);
  lc.expansion_size = static_cast<int>(neurons.size());
}

void keep_embed_dims(VitModel& model, std::span<const std::size_t> dims) {
  if (dims.empty()) throw ArgumentError("at least one embedding dimension must remain");
  ParamSet<float>& p = model.params;
  p.patch_w = select_rows(p.patch_w, dims);
  p.patch_b = select_entries(p.patch_b, dims);
  p.cls_token = select_entries(p.cls_token, dims);
  p.pos_embed = select_cols(p.pos_embed, dims);
  for (LayerParams<float>& L : p.layers) {
    L.ln1_gamma = select_entries(L.ln1_gamma, dims);
    L.ln1_beta = select_entries(L.ln1_beta, dims);
    L.wq = select_cols(L.wq, dims);
    L.wk = select_cols(L.wk, dims);
    L.wv = select_cols(L.wv, dims);
    L.wo = select_rows(L.wo, dims);
    L.bo = select_entries(L.bo, dims);
    L.ln2_gamma = select_entries(L.ln2_gamma, dims);
    L.ln2_beta = select_entries(L.ln2_beta, dims);
    L.w1 = select_cols(L.w1, dims);
    L.w2 = select_rows(L.w2, dims);
    L.b2 = select_entries(L.b2, dims);
  }
  p.head_ln_gamma = select_entries(p.head_ln_gamma, dims);
  p.head_ln_beta = select_entries(p.head_ln_beta, dims);
  p.head_w = select_cols(p.head_w, dims);
  for (Probe& probe : model.probes) {
    probe.ln_gamma = select_entries(probe.ln_gamma, dims);
    probe.ln_beta = select_entries(probe.ln_beta, dims);
    probe.weight = select_cols(probe.weight, dims);
  }
  model.config.embed_dim = static_cast<int>(dims.size());
}

}  // namespace vitprune::detail
