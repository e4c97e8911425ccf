#include "vitprune/grad.hpp"

#include <cmath>

#include "engine.hpp"
#include "vitprune/parallel.hpp"

namespace vitprune {

namespace {

struct Setup {
  int depth;
  std::size_t batch;
  std::size_t stride;
  int classes;
};

Setup prepare(const VitModel& model, const Tensor& images, std::span<const int> labels,
              const LossOptions& options) {
  const ModelConfig& cfg = model.config;
  Setup s;
  s.batch = batch_size_of(cfg, images);
  if (labels.size() != s.batch) {
    throw ArgumentError("got " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(s.batch) + " images");
  }
  if (s.batch == 0) throw ArgumentError("empty batch");
  s.depth = options.depth_limit == 0 ? cfg.depth() : options.depth_limit;
  if (s.depth < 1 || s.depth > cfg.depth()) {
    throw ArgumentError("depth_limit " + std::to_string(options.depth_limit) +
                        " outside [1, " + std::to_string(cfg.depth()) + "]");
  }
  s.classes = options.probe ? static_cast<int>(options.probe->bias.numel())
                            : cfg.num_classes;
  for (int y : labels) {
    if (y < 0 || y >= s.classes) {
      throw ArgumentError("label " + std::to_string(y) + " outside [0, " +
                          std::to_string(s.classes) + ")");
    }
  }
  s.stride = 3 * static_cast<std::size_t>(cfg.image_size) * cfg.image_size;
  return s;
}

void add_into(GradientSet& acc, const GradientSet& g, double scale) {
  auto a = named_tensors(acc);
  auto b = named_tensors(g);
  for (std::size_t t = 0; t < a.size(); ++t) {
    double* dst = a[t].tensor->data();
    const double* src = b[t].tensor->data();
    const std::size_t n = a[t].tensor->numel();
    for (std::size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
  }
}

double loss_with_weights(const VitModel& model, const ParamSet<double>& w,
                         const Tensor& images, std::span<const int> labels,
                         const LossOptions& options, const Setup& s,
                         const detail::ProbeD* probe_override = nullptr) {
  detail::ProbeD probe;
  detail::HeadRef head = detail::model_head(w, model.config);
  if (probe_override) {
    head = probe_override->ref();
  } else if (options.probe) {
    probe = detail::to_double(*options.probe);
    head = probe.ref();
  }
  std::vector<double> losses(s.batch);
  parallel_for(s.batch, [&](std::size_t b) {
    const auto z = detail::forward_sample(model.config, w, images.data() + b * s.stride,
                                          s.depth, head, nullptr);
    losses[b] = detail::cross_entropy(z, labels[b], nullptr);
  });
  double total = 0.0;
  for (double l : losses) total += l;
  return options.loss_scale * total / static_cast<double>(s.batch);
}

}  // namespace

GradientSet zero_gradients(const ModelConfig& config) { return make_params<double>(config); }

double mean_loss(const VitModel& model, const Tensor& images, std::span<const int> labels,
                 const LossOptions& options) {
  const Setup s = prepare(model, images, labels, options);
  const ParamSet<double> w = detail::to_double(model.params);
  return loss_with_weights(model, w, images, labels, options, s);
}

void for_each_sample_gradient(
    const VitModel& model, const Tensor& images, std::span<const int> labels,
    const std::function<void(std::size_t, double, const GradientSet&)>& fn,
    const LossOptions& options) {
  const Setup s = prepare(model, images, labels, options);
  const ParamSet<double> w = detail::to_double(model.params);
  detail::ProbeD probe;
  detail::HeadRef head = detail::model_head(w, model.config);
  if (options.probe) {
    probe = detail::to_double(*options.probe);
    head = probe.ref();
  }
  GradientSet zero = zero_gradients(model.config);
  if (options.probe) {
    zero.head_w = TensorD(options.probe->weight.shape());
    zero.head_b = TensorD(options.probe->bias.shape());
  }
  parallel_for(s.batch, [&](std::size_t b) {
    detail::SampleCache cache;
    const auto z = detail::forward_sample(model.config, w, images.data() + b * s.stride,
                                          s.depth, head, &cache);
    std::vector<double> dz;
    const double loss = detail::cross_entropy(z, labels[b], &dz);
    for (double& x : dz) x *= options.loss_scale;
    GradientSet g = zero;
    detail::backward_sample(model.config, w, cache, s.depth, head, dz, g);
    fn(b, options.loss_scale * loss, g);
  });
}

LossAndGradients backward(const VitModel& model, const Tensor& images,
                          std::span<const int> labels, const LossOptions& options) {
  const Setup s = prepare(model, images, labels, options);
  LossAndGradients out;
  out.grads = zero_gradients(model.config);
  if (options.probe) {
    out.grads.head_w = TensorD(options.probe->weight.shape());
    out.grads.head_b = TensorD(options.probe->bias.shape());
  }
  // Per-sample gradients are reduced in sample order, so the result does not
  // depend on the worker count. Chunking bounds the memory held at once.
  constexpr std::size_t kChunk = 64;
  const double inv = 1.0 / static_cast<double>(s.batch);
  double total = 0.0;
  const std::size_t stride = s.stride;
  const std::size_t image_elems = stride;
  for (std::size_t begin = 0; begin < s.batch; begin += kChunk) {
    const std::size_t n = std::min(kChunk, s.batch - begin);
    Shape shape = images.shape();
    if (shape.size() == 3) shape.insert(shape.begin(), 1);
    shape[0] = n;
    Tensor chunk(shape, std::vector<float>(images.data() + begin * image_elems,
                                           images.data() + (begin + n) * image_elems));
    std::vector<GradientSet> per(n);
    std::vector<double> losses(n);
    for_each_sample_gradient(
        model, chunk, labels.subspan(begin, n),
        [&](std::size_t i, double loss, const GradientSet& g) {
          per[i] = g;
          losses[i] = loss;
        },
        options);
    for (std::size_t i = 0; i < n; ++i) {
      add_into(out.grads, per[i], inv);
      total += losses[i];
    }
  }
  out.loss = total * inv;
  return out;
}

double finite_diff(const VitModel& model, const Tensor& images, std::span<const int> labels,
                   std::string_view tensor_name, std::size_t coordinate, double h,
                   const LossOptions& options) {
  const Setup s = prepare(model, images, labels, options);
  ParamSet<double> w = detail::to_double(model.params);
  // With a probe, head.* names address the probe, matching where backward
  // stores its gradients.
  detail::ProbeD probe;
  if (options.probe) probe = detail::to_double(*options.probe);
  double* target = nullptr;
  std::size_t extent = 0;
  if (options.probe && tensor_name.starts_with("head.")) {
    std::vector<double>* v = tensor_name == "head.ln.gamma" ? &probe.ln_gamma
                             : tensor_name == "head.ln.beta"   ? &probe.ln_beta
                             : tensor_name == "head.weight"    ? &probe.weight
                             : tensor_name == "head.bias"      ? &probe.bias
                                                               : nullptr;
    if (v) {
      target = v->data();
      extent = v->size();
    }
  } else {
    for (auto& nt : named_tensors(w)) {
      if (nt.name == tensor_name) {
        target = nt.tensor->data();
        extent = nt.tensor->numel();
      }
    }
  }
  if (!target) throw ArgumentError("unknown tensor name '" + std::string(tensor_name) + "'");
  if (coordinate >= extent) {
    throw ArgumentError("coordinate " + std::to_string(coordinate) + " out of range for " +
                        std::string(tensor_name) + " with " + std::to_string(extent) +
                        " elements");
  }
  const detail::ProbeD* override = options.probe ? &probe : nullptr;
  const double original = target[coordinate];
  target[coordinate] = original + h;
  const double plus = loss_with_weights(model, w, images, labels, options, s, override);
  target[coordinate] = original - h;
  const double minus = loss_with_weights(model, w, images, labels, options, s, override);
  return (plus - minus) / (2.0 * h);
}

}  // namespace vitprune
