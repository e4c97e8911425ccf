#include "support/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

namespace vitprune::testing {

namespace {

using Mat = std::vector<std::vector<double>>;

Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

std::vector<double> layer_norm(const std::vector<double>& x, const Tensor& g, const Tensor& b,
                               double eps) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= d;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= d;
  std::vector<double> y(d);
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  return y;
}

// y = W x + b for W [out x in].
std::vector<double> affine(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  const std::size_t out = w.extent(0), in = w.extent(1);
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < in; ++i) s += static_cast<double>(w[o * in + i]) * x[i];
    y[o] = s;
  }
  return y;
}

}  // namespace

double reference_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::vector<double> reference_logits(const VitModel& model, const float* image, int depth,
                                     const Probe* probe, ReferenceTrace* trace) {
  const ModelConfig& c = model.config;
  const ParamSet<float>& w = model.params;
  const int S = c.image_size, p = c.patch_size, g = S / p, N = g * g, d = c.embed_dim;
  const int T = N + 1;
  Mat x = zeros(T, d);
  for (int i = 0; i < d; ++i) x[0][i] = w.cls_token[i] + w.pos_embed[i];
  for (int n = 0; n < N; ++n) {
    const int gy = n / g, gx = n % g;
    std::vector<double> patch;
    for (int ch = 0; ch < 3; ++ch) {
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          patch.push_back(image[ch * S * S + (gy * p + py) * S + gx * p + px]);
        }
      }
    }
    const std::vector<double> e = affine(w.patch_w, w.patch_b, patch);
    for (int i = 0; i < d; ++i) x[n + 1][i] = e[i] + w.pos_embed[(n + 1) * d + i];
  }

  for (int l = 0; l < depth; ++l) {
    const LayerConfig& lc = c.layers[l];
    const LayerParams<float>& L = w.layers[l];
    const int H = lc.heads, qw = lc.qk_size / H, vw = lc.value_size / H;
    Mat q(T), k(T), v(T);
    for (int t = 0; t < T; ++t) {
      const auto a = layer_norm(x[t], L.ln1_gamma, L.ln1_beta, c.layernorm_eps);
      q[t] = affine(L.wq, L.bq, a);
      k[t] = affine(L.wk, L.bk, a);
      v[t] = affine(L.wv, L.bv, a);
    }
    Mat o = zeros(T, lc.value_size);
    for (int h = 0; h < H; ++h) {
      for (int t = 0; t < T; ++t) {
        std::vector<double> s(T);
        for (int u = 0; u < T; ++u) {
          double dot = 0.0;
          for (int j = 0; j < qw; ++j) dot += q[t][h * qw + j] * k[u][h * qw + j];
          s[u] = dot / std::sqrt(static_cast<double>(qw));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (int u = 0; u < T; ++u) {
          for (int j = 0; j < vw; ++j) o[t][h * vw + j] += s[u] / z * v[u][h * vw + j];
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      const auto y = affine(L.wo, L.bo, o[t]);
      for (int i = 0; i < d; ++i) x[t][i] += y[i];
    }
    for (int t = 0; t < T; ++t) {
      const auto b = layer_norm(x[t], L.ln2_gamma, L.ln2_beta, c.layernorm_eps);
      auto hid = affine(L.w1, L.b1, b);
      for (double& e : hid) e = reference_gelu(e);
      if (trace && t == 0) {
        trace->mlp_input_cls.push_back(b);
        trace->mlp_hidden_cls.push_back(hid);
      }
      const auto y = affine(L.w2, L.b2, hid);
      for (int i = 0; i < d; ++i) x[t][i] += y[i];
    }
  }

  const Probe head = probe ? *probe : head_probe(model);
  const auto f = layer_norm(x[0], head.ln_gamma, head.ln_beta, c.layernorm_eps);
  return affine(head.weight, head.bias, f);
}

double reference_loss(const VitModel& model, const Tensor& images,
                      const std::vector<int>& labels) {
  const std::size_t stride = 3 * static_cast<std::size_t>(model.config.image_size) *
                             model.config.image_size;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto z = reference_logits(model, images.data() + i * stride, model.config.depth());
    const double mx = *std::max_element(z.begin(), z.end());
    double se = 0.0;
    for (double e : z) se += std::exp(e - mx);
    total += -(z[labels[i]] - mx - std::log(se));
  }
  return total / static_cast<double>(labels.size());
}

std::vector<double> reference_singular_values(const TensorD& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Eigen::MatrixXd A(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) A(i, j) = a(i, j);
  }
  const Eigen::MatrixXd G = m >= n ? Eigen::MatrixXd(A.transpose() * A)
                                   : Eigen::MatrixXd(A * A.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  std::vector<double> out;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    out.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

std::vector<bool> brute_force_retained(const std::vector<double>& scores, double rho) {
  const std::size_t n = scores.size();
  double total = 0.0;
  for (double s : scores) total += s;
  if (total == 0.0) return std::vector<bool>(n, true);
  std::size_t best_size = n + 1;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    const std::size_t size = static_cast<std::size_t>(__builtin_popcount(mask));
    if (size >= best_size) continue;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) sum += scores[i];
    }
    if (sum / total >= rho) best_size = size;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<bool> keep(n, false);
  for (std::size_t i = 0; i < best_size && i < n; ++i) keep[order[i]] = true;
  return keep;
}

}  // namespace vitprune::testing
