#pragma once

// Per-sample forward/backward kernels shared by model, grad, score and train.
// Everything runs in double on a double copy of the weights.

#include <cstdint>
#include <span>
#include <vector>

#include "vitprune/model.hpp"

namespace vitprune::detail {

struct HeadRef {
  const double* ln_gamma;
  const double* ln_beta;
  const double* weight;  // [C x d]
  const double* bias;    // [C]
  int classes;
};

HeadRef model_head(const ParamSet<double>& w, const ModelConfig& config);

struct ProbeD {
  std::vector<double> ln_gamma, ln_beta, weight, bias;
  int classes = 0;
  HeadRef ref() const {
    return {ln_gamma.data(), ln_beta.data(), weight.data(), bias.data(), classes};
  }
};

ProbeD to_double(const Probe& probe);

struct LayerCache {
  std::vector<double> x_in;        // [T x d]
  std::vector<double> xhat1, rstd1;
  std::vector<double> a;           // LN1 output [T x d]
  std::vector<double> q, k, v;     // [T x q], [T x q], [T x v]
  std::vector<double> p;           // [H x T x T]
  std::vector<double> o;           // [T x v]
  std::vector<double> x_mid;       // [T x d]
  std::vector<double> xhat2, rstd2;
  std::vector<double> b;           // LN2 output [T x d]
  std::vector<double> h_pre, h;    // [T x e]
};

struct SampleCache {
  std::vector<double> patches;     // [N x 3p^2]
  std::vector<LayerCache> layers;
  std::vector<double> x_out;       // residual stream after the last run layer [T x d]
  std::vector<double> head_xhat;   // [d]
  double head_rstd = 0.0;
  std::vector<double> feature;     // LN_head(cls) [d]
  std::vector<double> logits;
};

/// Runs `depth` encoders on one image and classifies through `head`. When
/// `cache` is null only the minimal state is kept. `macs` counts multiply-adds.
std::vector<double> forward_sample(const ModelConfig& config, const ParamSet<double>& w,
                                   const float* image, int depth, const HeadRef& head,
                                   SampleCache* cache, std::uint64_t* macs = nullptr);

/// Accumulates dLoss/dW into `grads` given dLoss/dlogits. Head gradients are
/// written to the grads.head_* slots whichever head was used.
void backward_sample(const ModelConfig& config, const ParamSet<double>& w,
                     const SampleCache& cache, int depth, const HeadRef& head,
                     std::span<const double> dlogits, ParamSet<double>& grads);

/// Cross-entropy of logits against `label`; writes softmax - onehot into dlogits.
double cross_entropy(std::span<const double> logits, int label,
                     std::vector<double>* dlogits);

ParamSet<double> to_double(const ParamSet<float>& params);

/// Row-wise LayerNorm backward: given g = dy * gamma, returns dx.
void layernorm_backward_row(const double* g, const double* xhat, double rstd,
                            std::size_t d, double* dx);

}  // namespace vitprune::detail
