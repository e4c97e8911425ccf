#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vitprune/tensor.hpp"

namespace vitprune {

/// Per-encoder structural sizes. Heads within one layer share widths
/// qk_size / heads and value_size / heads.
struct LayerConfig {
  int heads = 1;
  int qk_size = 1;
  int value_size = 1;
  int expansion_size = 0;

  int qk_head_width() const { return qk_size / heads; }
  int value_head_width() const { return value_size / heads; }

  friend bool operator==(const LayerConfig&, const LayerConfig&) = default;
};

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int embed_dim = 32;
  int num_classes = 10;
  double layernorm_eps = 1e-6;
  std::vector<LayerConfig> layers;

  int depth() const { return static_cast<int>(layers.size()); }
  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int tokens() const { return num_patches() + 1; }
  int patch_dim() const { return 3 * patch_size * patch_size; }

  /// Throws ArgumentError naming the first violated invariant.
  void validate() const;

  /// Uniform configuration: every layer gets the same H, q, v, e.
  static ModelConfig uniform(int image_size, int patch_size, int embed_dim, int depth,
                             int heads, int qk_size, int value_size, int expansion_size,
                             int num_classes);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerParams {
  BasicTensor<T> ln1_gamma, ln1_beta;
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicTensor<T> ln2_gamma, ln2_beta;
  BasicTensor<T> w1, b1, w2, b2;
};

/// Every trainable tensor of the network. Used for weights (float) and
/// gradients (double) alike, so both walk the same canonical name order.
template <typename T>
struct ParamSet {
  BasicTensor<T> patch_w, patch_b;  // [d x 3p^2], [d]
  BasicTensor<T> cls_token;         // [d]
  BasicTensor<T> pos_embed;         // [(N+1) x d]
  std::vector<LayerParams<T>> layers;
  BasicTensor<T> head_ln_gamma, head_ln_beta;
  BasicTensor<T> head_w, head_b;    // [C x d], [C]
};

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T>* tensor;
};

template <typename T>
struct NamedConstTensor {
  std::string name;
  const BasicTensor<T>* tensor;
};

/// Tensors in canonical container order (patch_embed.weight, ..., head.bias).
template <typename T>
std::vector<NamedTensor<T>> named_tensors(ParamSet<T>& params);
template <typename T>
std::vector<NamedConstTensor<T>> named_tensors(const ParamSet<T>& params);

/// Zero-filled parameter set with the shapes implied by `config`.
template <typename T>
ParamSet<T> make_params(const ModelConfig& config);

/// Early-exit classifier on the cls token: LayerNorm followed by a linear map.
struct Probe {
  Tensor ln_gamma, ln_beta;  // [d]
  Tensor weight;             // [C x d]
  Tensor bias;               // [C]
};

struct VitModel {
  ModelConfig config;
  ParamSet<float> params;
  std::vector<int> class_ids;
  /// Auxiliary per-layer early-exit probes; empty unless depth probes were attached.
  std::vector<Probe> probes;

  /// Checks config invariants, tensor shapes and class_ids.
  void validate() const;
};

/// The model's own classification head as a probe.
Probe head_probe(const VitModel& model);

/// Random initialization: truncated normal with std 0.02 for encoder and head
/// weights and fan-in scaling for the patch projection; LayerNorm gamma=1,
/// beta=0; zero biases. Deterministic in `seed`.
VitModel init_model(const ModelConfig& config, std::uint64_t seed,
                    std::vector<int> class_ids = {});

/// Per-sample activations recorded by forward_with_trace.
struct ActivationTrace {
  std::vector<TensorD> tokens;         // per layer, post-encoder [(N+1) x d]
  std::vector<TensorD> attention;      // per layer, [H x (N+1) x (N+1)]
  std::vector<TensorD> mlp_hidden;     // per layer, post-GELU [(N+1) x e_l]
  TensorD cls_feature;                 // final cls token before the head LayerNorm [d]
  TensorD logits;                      // [C]
};

/// images: [B x 3 x S x S]. Returns logits [B x C].
Tensor forward(const VitModel& model, const Tensor& images);

/// Runs the first depth_limit encoders and classifies the cls token with `probe`.
Tensor forward_truncated(const VitModel& model, const Tensor& images, int depth_limit,
                         const Probe& probe);

/// Single image [3 x S x S] or [1 x 3 x S x S].
ActivationTrace forward_with_trace(const VitModel& model, const Tensor& image);

/// GELU of neuron `neuron`'s cls-token pre-activation in encoder `layer`
/// (both zero-based).
double neuron_activation(const VitModel& model, const Tensor& image, int layer,
                         int neuron);

/// Cls-token residual features after each encoder: element l holds the
/// [B x d] features after l+1 layers.
std::vector<TensorD> cls_features_by_depth(const VitModel& model, const Tensor& images);

/// Number of images in a [B x 3 x S x S] or [3 x S x S] tensor, checked against config.
std::size_t batch_size_of(const ModelConfig& config, const Tensor& images);

/// Multiply-accumulate count of one instrumented forward pass on a single image
/// (matrix products only).
std::uint64_t count_forward_macs(const VitModel& model);

}  // namespace vitprune
