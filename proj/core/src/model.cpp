#include "vitprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "engine.hpp"
#include "random.hpp"
#include "vitprune/linalg.hpp"
#include "vitprune/parallel.hpp"

namespace vitprune {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ArgumentError("model config: " + msg); };
  if (patch_size <= 0) fail("patch_size must be positive");
  if (image_size <= 0 || image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (layers.empty()) fail("depth must be >= 1");
  if (embed_dim < 1) fail("embed_dim must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (!(layernorm_eps > 0.0)) fail("layernorm_eps must be positive");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerConfig& lc = layers[l];
    const std::string at = "layer " + std::to_string(l) + ": ";
    if (lc.heads < 1) fail(at + "heads must be >= 1");
    if (lc.qk_size < lc.heads || lc.qk_size % lc.heads != 0) {
      fail(at + "qk_size " + std::to_string(lc.qk_size) + " not a positive multiple of heads " +
           std::to_string(lc.heads));
    }
    if (lc.value_size < lc.heads || lc.value_size % lc.heads != 0) {
      fail(at + "value_size " + std::to_string(lc.value_size) +
           " not a positive multiple of heads " + std::to_string(lc.heads));
    }
    if (lc.expansion_size < 0) fail(at + "expansion_size must be >= 0");
  }
}

ModelConfig ModelConfig::uniform(int image_size, int patch_size, int embed_dim, int depth,
                                 int heads, int qk_size, int value_size,
                                 int expansion_size, int num_classes) {
  ModelConfig c;
  c.image_size = image_size;
  c.patch_size = patch_size;
  c.embed_dim = embed_dim;
  c.num_classes = num_classes;
  c.layers.assign(depth, LayerConfig{heads, qk_size, value_size, expansion_size});
  return c;
}

namespace {

template <typename Set, typename Out>
void collect(Set& p, Out& out) {
  out.push_back({"patch_embed.weight", &p.patch_w});
  out.push_back({"patch_embed.bias", &p.patch_b});
  out.push_back({"cls_token", &p.cls_token});
  out.push_back({"pos_embed", &p.pos_embed});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "ln1.gamma", &L.ln1_gamma});
    out.push_back({pre + "ln1.beta", &L.ln1_beta});
    out.push_back({pre + "attn.wq", &L.wq});
    out.push_back({pre + "attn.bq", &L.bq});
    out.push_back({pre + "attn.wk", &L.wk});
    out.push_back({pre + "attn.bk", &L.bk});
    out.push_back({pre + "attn.wv", &L.wv});
    out.push_back({pre + "attn.bv", &L.bv});
    out.push_back({pre + "attn.wo", &L.wo});
    out.push_back({pre + "attn.bo", &L.bo});
    out.push_back({pre + "ln2.gamma", &L.ln2_gamma});
    out.push_back({pre + "ln2.beta", &L.ln2_beta});
    out.push_back({pre + "mlp.w1", &L.w1});
    out.push_back({pre + "mlp.b1", &L.b1});
    out.push_back({pre + "mlp.w2", &L.w2});
    out.push_back({pre + "mlp.b2", &L.b2});
  }
  out.push_back({"head.ln.gamma", &p.head_ln_gamma});
  out.push_back({"head.ln.beta", &p.head_ln_beta});
  out.push_back({"head.weight", &p.head_w});
  out.push_back({"head.bias", &p.head_b});
}

}  // namespace

template <typename T>
std::vector<NamedTensor<T>> named_tensors(ParamSet<T>& params) {
  std::vector<NamedTensor<T>> out;
  collect(params, out);
  return out;
}

template <typename T>
std::vector<NamedConstTensor<T>> named_tensors(const ParamSet<T>& params) {
  std::vector<NamedConstTensor<T>> out;
  collect(params, out);
  return out;
}

template <typename T>
ParamSet<T> make_params(const ModelConfig& config) {
  using Ten = BasicTensor<T>;
  const std::size_t d = config.embed_dim;
  const std::size_t C = config.num_classes;
  ParamSet<T> p;
  p.patch_w = Ten({d, static_cast<std::size_t>(config.patch_dim())});
  p.patch_b = Ten({d});
  p.cls_token = Ten({d});
  p.pos_embed = Ten({static_cast<std::size_t>(config.tokens()), d});
  for (const LayerConfig& lc : config.layers) {
    const std::size_t q = lc.qk_size, v = lc.value_size, e = lc.expansion_size;
    LayerParams<T> L;
    L.ln1_gamma = Ten({d});
    L.ln1_beta = Ten({d});
    L.wq = Ten({q, d});
    L.bq = Ten({q});
    L.wk = Ten({q, d});
    L.bk = Ten({q});
    L.wv = Ten({v, d});
    L.bv = Ten({v});
    L.wo = Ten({d, v});
    L.bo = Ten({d});
    L.ln2_gamma = Ten({d});
    L.ln2_beta = Ten({d});
    L.w1 = Ten({e, d});
    L.b1 = Ten({e});
    L.w2 = Ten({d, e});
    L.b2 = Ten({d});
    p.layers.push_back(std::move(L));
  }
  p.head_ln_gamma = Ten({d});
  p.head_ln_beta = Ten({d});
  p.head_w = Ten({C, d});
  p.head_b = Ten({C});
  return p;
}

template std::vector<NamedTensor<float>> named_tensors(ParamSet<float>&);
template std::vector<NamedTensor<double>> named_tensors(ParamSet<double>&);
template std::vector<NamedConstTensor<float>> named_tensors(const ParamSet<float>&);
template std::vector<NamedConstTensor<double>> named_tensors(const ParamSet<double>&);
template ParamSet<float> make_params(const ModelConfig&);
template ParamSet<double> make_params(const ModelConfig&);

void VitModel::validate() const {
  config.validate();
  const ParamSet<float> expected = make_params<float>(config);
  const auto want = named_tensors(expected);
  const auto have = named_tensors(params);
  if (want.size() != have.size()) {
    throw DimensionError("model: expected " + std::to_string(want.size()) +
                         " tensors, found " + std::to_string(have.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].tensor->shape() != have[i].tensor->shape()) {
      throw DimensionError("model: tensor " + have[i].name + " has shape " +
                           shape_to_string(have[i].tensor->shape()) + ", config implies " +
                           shape_to_string(want[i].tensor->shape()));
    }
  }
  if (class_ids.size() != static_cast<std::size_t>(config.num_classes)) {
    throw ArgumentError("model: class_ids has " + std::to_string(class_ids.size()) +
                        " entries, num_classes is " + std::to_string(config.num_classes));
  }
  if (std::set<int>(class_ids.begin(), class_ids.end()).size() != class_ids.size()) {
    throw ArgumentError("model: duplicate class ids");
  }
  const std::size_t d = config.embed_dim;
  for (std::size_t l = 0; l < probes.size(); ++l) {
    const Probe& pr = probes[l];
    const std::size_t C = pr.bias.numel();
    if (pr.ln_gamma.shape() != Shape{d} || pr.ln_beta.shape() != Shape{d} ||
        pr.weight.shape() != Shape{C, d}) {
      throw DimensionError("model: probe " + std::to_string(l) +
                           " does not match embed_dim " + std::to_string(d));
    }
  }
}

Probe head_probe(const VitModel& model) {
  return {model.params.head_ln_gamma, model.params.head_ln_beta, model.params.head_w,
          model.params.head_b};
}

VitModel init_model(const ModelConfig& config, std::uint64_t seed,
                    std::vector<int> class_ids) {
  config.validate();
  VitModel m;
  m.config = config;
  m.params = make_params<float>(config);
  if (class_ids.empty()) {
    for (int c = 0; c < config.num_classes; ++c) class_ids.push_back(c);
  }
  m.class_ids = std::move(class_ids);
  detail::Rng rng(seed);
  auto normal_fill = [&](Tensor& t, double stddev) {
    for (float& x : t.values()) x = static_cast<float>(rng.truncated_normal(stddev));
  };
  auto ones = [](Tensor& t) { t.fill(1.0f); };
  // Patch projection: fan-in scaled so the embedded tokens start at unit scale.
  normal_fill(m.params.patch_w, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())));
  normal_fill(m.params.cls_token, 0.02);
  normal_fill(m.params.pos_embed, 0.02);
  for (auto& L : m.params.layers) {
    ones(L.ln1_gamma);
    ones(L.ln2_gamma);
    normal_fill(L.wq, 0.02);
    normal_fill(L.wk, 0.02);
    normal_fill(L.wv, 0.02);
    normal_fill(L.wo, 0.02);
    normal_fill(L.w1, 0.02);
    normal_fill(L.w2, 0.02);
  }
  ones(m.params.head_ln_gamma);
  normal_fill(m.params.head_w, 0.02);
  m.validate();
  return m;
}

std::size_t batch_size_of(const ModelConfig& config, const Tensor& images) {
  const std::size_t S = config.image_size;
  const Shape one{3, S, S};
  if (images.shape() == one) return 1;
  if (images.rank() == 4 && images.extent(1) == 3 && images.extent(2) == S &&
      images.extent(3) == S) {
    return images.extent(0);
  }
  throw DimensionError("images have shape " + shape_to_string(images.shape()) +
                       ", model expects [B x 3 x " + std::to_string(S) + " x " +
                       std::to_string(S) + "]");
}

namespace {

Tensor run_batch(const VitModel& model, const Tensor& images, int depth,
                 const detail::HeadRef& head) {
  const std::size_t B = batch_size_of(model.config, images);
  const std::size_t stride = 3 * static_cast<std::size_t>(model.config.image_size) *
                             model.config.image_size;
  const ParamSet<double> w = detail::to_double(model.params);
  Tensor logits({B, static_cast<std::size_t>(head.classes)});
  parallel_for(B, [&](std::size_t b) {
    const auto z = detail::forward_sample(model.config, w, images.data() + b * stride, depth,
                                          head, nullptr);
    for (std::size_t c = 0; c < z.size(); ++c) logits(b, c) = static_cast<float>(z[c]);
  });
  return logits;
}

void check_probe(const VitModel& model, const Probe& probe) {
  const std::size_t d = model.config.embed_dim;
  if (probe.ln_gamma.numel() != d || probe.ln_beta.numel() != d || probe.weight.rank() != 2 ||
      probe.weight.cols() != d || probe.weight.rows() != probe.bias.numel()) {
    throw DimensionError("probe shape does not match embed_dim " + std::to_string(d));
  }
}

}  // namespace

Tensor forward(const VitModel& model, const Tensor& images) {
  const detail::ProbeD head = detail::to_double(head_probe(model));
  return run_batch(model, images, model.config.depth(), head.ref());
}

Tensor forward_truncated(const VitModel& model, const Tensor& images, int depth_limit,
                         const Probe& probe) {
  if (depth_limit < 1 || depth_limit > model.config.depth()) {
    throw ArgumentError("depth_limit " + std::to_string(depth_limit) + " outside [1, " +
                        std::to_string(model.config.depth()) + "]");
  }
  check_probe(model, probe);
  const detail::ProbeD head = detail::to_double(probe);
  return run_batch(model, images, depth_limit, head.ref());
}

ActivationTrace forward_with_trace(const VitModel& model, const Tensor& image) {
  if (batch_size_of(model.config, image) != 1) {
    throw DimensionError("forward_with_trace expects a single image");
  }
  const ModelConfig& cfg = model.config;
  const ParamSet<double> w = detail::to_double(model.params);
  detail::SampleCache cache;
  const auto logits = detail::forward_sample(cfg, w, image.data(), cfg.depth(),
                                             detail::model_head(w, cfg), &cache);
  const std::size_t T = cfg.tokens(), d = cfg.embed_dim;
  ActivationTrace trace;
  for (int l = 0; l < cfg.depth(); ++l) {
    const auto& lc = cache.layers[l];
    const std::size_t H = cfg.layers[l].heads, e = cfg.layers[l].expansion_size;
    const auto& next = (l + 1 < cfg.depth()) ? cache.layers[l + 1].x_in : cache.x_out;
    trace.tokens.emplace_back(Shape{T, d}, next);
    trace.attention.emplace_back(Shape{H, T, T}, lc.p);
    trace.mlp_hidden.emplace_back(Shape{T, e}, lc.h);
  }
  trace.cls_feature = TensorD({d}, std::vector<double>(cache.x_out.begin(),
                                                       cache.x_out.begin() + d));
  trace.logits = TensorD({logits.size()}, logits);
  return trace;
}

double neuron_activation(const VitModel& model, const Tensor& image, int layer,
                         int neuron) {
  const ModelConfig& cfg = model.config;
  if (layer < 0 || layer >= cfg.depth()) {
    throw ArgumentError("layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(cfg.depth()) + ")");
  }
  if (neuron < 0 || neuron >= cfg.layers[layer].expansion_size) {
    throw ArgumentError("neuron " + std::to_string(neuron) + " outside [0, " +
                        std::to_string(cfg.layers[layer].expansion_size) + ")");
  }
  if (batch_size_of(cfg, image) != 1) {
    throw DimensionError("neuron_activation expects a single image");
  }
  const ParamSet<double> w = detail::to_double(model.params);
  detail::SampleCache cache;
  detail::forward_sample(cfg, w, image.data(), layer + 1, detail::model_head(w, cfg),
                         &cache);
  // LN2-normalized cls row dotted with W1[neuron], plus bias, through GELU.
  const auto& lc = cache.layers[layer];
  const std::size_t d = cfg.embed_dim;
  double pre = w.layers[layer].b1[neuron];
  for (std::size_t j = 0; j < d; ++j) pre += lc.b[j] * w.layers[layer].w1(neuron, j);
  return gelu(pre);
}

std::vector<TensorD> cls_features_by_depth(const VitModel& model, const Tensor& images) {
  const ModelConfig& cfg = model.config;
  const std::size_t B = batch_size_of(cfg, images);
  const std::size_t L = cfg.depth(), d = cfg.embed_dim;
  const std::size_t stride = 3 * static_cast<std::size_t>(cfg.image_size) * cfg.image_size;
  const ParamSet<double> w = detail::to_double(model.params);
  std::vector<TensorD> out(L, TensorD({B, d}));
  parallel_for(B, [&](std::size_t b) {
    detail::SampleCache cache;
    detail::forward_sample(cfg, w, images.data() + b * stride, static_cast<int>(L),
                           detail::model_head(w, cfg), &cache);
    for (std::size_t l = 0; l < L; ++l) {
      const auto& src = (l + 1 < L) ? cache.layers[l + 1].x_in : cache.x_out;
      std::copy_n(src.begin(), d, out[l].data() + b * d);
    }
  });
  return out;
}

std::uint64_t count_forward_macs(const VitModel& model) {
  const ModelConfig& cfg = model.config;
  const ParamSet<double> w = detail::to_double(model.params);
  std::vector<float> image(3 * static_cast<std::size_t>(cfg.image_size) * cfg.image_size,
                           0.0f);
  std::uint64_t macs = 0;
  detail::forward_sample(cfg, w, image.data(), cfg.depth(), detail::model_head(w, cfg),
                         nullptr, &macs);
  return macs;
}

}  // namespace vitprune
