#include "engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vitprune/linalg.hpp"

namespace vitprune::detail {

namespace {

// Four independent partial sums keep the reduction vectorizable while the
// summation order stays fixed.
inline double dot(const double* a, const double* b, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] += a[i] * b[i];
    acc[1] += a[i + 1] * b[i + 1];
    acc[2] += a[i + 2] * b[i + 2];
    acc[3] += a[i + 3] * b[i + 3];
  }
  double s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y[r, o] = b[o] + <x[r, :], w[o, :]>
void linear(const double* x, std::size_t rows, std::size_t in, const double* w,
            const double* b, std::size_t out, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    double* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      yr[o] = (b ? b[o] : 0.0) + dot(xr, w + o * in, in);
    }
  }
}

// Backward of linear: dW += dY^T X, db += colsum(dY), dX += dY W (if dx).
void linear_backward(const double* x, std::size_t rows, std::size_t in, const double* w,
                     std::size_t out, const double* dy, double* dw, double* db,
                     double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    const double* dyr = dy + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      axpy(g, xr, dw + o * in, in);
      if (db) db[o] += g;
      if (dx) axpy(g, w + o * in, dx + r * in, in);
    }
  }
}

void layernorm_rows(const double* x, std::size_t rows, std::size_t d, const double* gamma,
                    const double* beta, double eps, double* y, double* xhat,
                    double* rstd_out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    if (rstd_out) rstd_out[r] = rstd;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * rstd;
      if (xhat) xhat[r * d + j] = xh;
      y[r * d + j] = xh * gamma[j] + beta[j];
    }
  }
}

void softmax_inplace(double* row, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

std::vector<double> as_double(const Tensor& t) {
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[i];
  return out;
}

}  // namespace

void layernorm_backward_row(const double* g, const double* xhat, double rstd,
                            std::size_t d, double* dx) {
  double mean_g = 0.0, mean_gx = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    mean_g += g[j];
    mean_gx += g[j] * xhat[j];
  }
  mean_g /= static_cast<double>(d);
  mean_gx /= static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j) {
    dx[j] += rstd * (g[j] - mean_g - xhat[j] * mean_gx);
  }
}

HeadRef model_head(const ParamSet<double>& w, const ModelConfig& config) {
  return {w.head_ln_gamma.data(), w.head_ln_beta.data(), w.head_w.data(),
          w.head_b.data(), config.num_classes};
}

ProbeD to_double(const Probe& probe) {
  ProbeD out;
  out.ln_gamma = as_double(probe.ln_gamma);
  out.ln_beta = as_double(probe.ln_beta);
  out.weight = as_double(probe.weight);
  out.bias = as_double(probe.bias);
  out.classes = static_cast<int>(probe.bias.numel());
  return out;
}

ParamSet<double> to_double(const ParamSet<float>& params) {
  ParamSet<double> out;
  out.layers.resize(params.layers.size());
  auto src = named_tensors(params);
  auto dst = named_tensors(out);
  for (std::size_t i = 0; i < src.size(); ++i) {
    *dst[i].tensor = TensorD::cast(*src[i].tensor);
  }
  return out;
}

double cross_entropy(std::span<const double> logits, int label,
                     std::vector<double>* dlogits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double log_sum = std::log(sum) + mx;
  if (dlogits) {
    dlogits->resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
      (*dlogits)[c] = std::exp(logits[c] - log_sum);
    }
    (*dlogits)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return log_sum - logits[static_cast<std::size_t>(label)];
}

std::vector<double> forward_sample(const ModelConfig& config, const ParamSet<double>& w,
                                   const float* image, int depth, const HeadRef& head,
                                   SampleCache* cache, std::uint64_t* macs) {
  const std::size_t d = config.embed_dim;
  const std::size_t T = config.tokens();
  const std::size_t N = config.num_patches();
  const std::size_t p = config.patch_size;
  const std::size_t S = config.image_size;
  const std::size_t P = config.patch_dim();
  const std::size_t grid = config.grid();
  std::uint64_t mac = 0;

  SampleCache local;
  SampleCache& sc = cache ? *cache : local;
  sc.patches.assign(N * P, 0.0);
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      double* dst = sc.patches.data() + (gy * grid + gx) * P;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          const float* src = image + c * S * S + (gy * p + py) * S + gx * p;
          for (std::size_t px = 0; px < p; ++px) *dst++ = src[px];
        }
      }
    }
  }

  std::vector<double> x(T * d);
  for (std::size_t j = 0; j < d; ++j) x[j] = w.cls_token[j] + w.pos_embed[j];
  linear(sc.patches.data(), N, P, w.patch_w.data(), w.patch_b.data(), d, x.data() + d);
  for (std::size_t i = d; i < T * d; ++i) x[i] += w.pos_embed[i];
  mac += N * P * d;

  if (cache) sc.layers.resize(depth);
  LayerCache scratch;
  std::vector<double> qh, kh, vh, oh;
  for (int l = 0; l < depth; ++l) {
    const LayerConfig& lcfg = config.layers[l];
    const LayerParams<double>& lw = w.layers[l];
    LayerCache& lc = cache ? sc.layers[l] : scratch;
    const std::size_t H = lcfg.heads;
    const std::size_t q = lcfg.qk_size, v = lcfg.value_size, e = lcfg.expansion_size;
    const std::size_t qw = q / H, vw = v / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(qw));

    lc.x_in = x;
    lc.a.resize(T * d);
    lc.xhat1.resize(T * d);
    lc.rstd1.resize(T);
    layernorm_rows(x.data(), T, d, lw.ln1_gamma.data(), lw.ln1_beta.data(),
                   config.layernorm_eps, lc.a.data(), lc.xhat1.data(), lc.rstd1.data());

    lc.q.resize(T * q);
    lc.k.resize(T * q);
    lc.v.resize(T * v);
    linear(lc.a.data(), T, d, lw.wq.data(), lw.bq.data(), q, lc.q.data());
    linear(lc.a.data(), T, d, lw.wk.data(), lw.bk.data(), q, lc.k.data());
    linear(lc.a.data(), T, d, lw.wv.data(), lw.bv.data(), v, lc.v.data());
    mac += T * d * (2 * q + v);

    lc.p.resize(H * T * T);
    lc.o.assign(T * v, 0.0);
    qh.resize(T * qw);
    kh.resize(T * qw);
    vh.resize(T * vw);
    oh.resize(T * vw);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        std::copy_n(lc.q.data() + t * q + h * qw, qw, qh.data() + t * qw);
        std::copy_n(lc.k.data() + t * q + h * qw, qw, kh.data() + t * qw);
        std::copy_n(lc.v.data() + t * v + h * vw, vw, vh.data() + t * vw);
      }
      double* ph = lc.p.data() + h * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        double* row = ph + i * T;
        for (std::size_t j = 0; j < T; ++j) {
          row[j] = dot(qh.data() + i * qw, kh.data() + j * qw, qw) * scale;
        }
        softmax_inplace(row, T);
        std::fill(oh.begin() + i * vw, oh.begin() + (i + 1) * vw, 0.0);
        for (std::size_t j = 0; j < T; ++j) {
          axpy(row[j], vh.data() + j * vw, oh.data() + i * vw, vw);
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        std::copy_n(oh.data() + t * vw, vw, lc.o.data() + t * v + h * vw);
      }
    }
    mac += T * T * (q + v);

    lc.x_mid.resize(T * d);
    linear(lc.o.data(), T, v, lw.wo.data(), lw.bo.data(), d, lc.x_mid.data());
    for (std::size_t i = 0; i < T * d; ++i) lc.x_mid[i] += x[i];
    mac += T * v * d;

    lc.b.resize(T * d);
    lc.xhat2.resize(T * d);
    lc.rstd2.resize(T);
    layernorm_rows(lc.x_mid.data(), T, d, lw.ln2_gamma.data(), lw.ln2_beta.data(),
                   config.layernorm_eps, lc.b.data(), lc.xhat2.data(), lc.rstd2.data());
    lc.h_pre.resize(T * e);
    lc.h.resize(T * e);
    linear(lc.b.data(), T, d, lw.w1.data(), lw.b1.data(), e, lc.h_pre.data());
    for (std::size_t i = 0; i < T * e; ++i) lc.h[i] = gelu(lc.h_pre[i]);
    linear(lc.h.data(), T, e, lw.w2.data(), lw.b2.data(), d, x.data());
    for (std::size_t i = 0; i < T * d; ++i) x[i] += lc.x_mid[i];
    mac += 2 * T * d * e;
  }

  sc.head_xhat.resize(d);
  sc.feature.resize(d);
  layernorm_rows(x.data(), 1, d, head.ln_gamma, head.ln_beta, config.layernorm_eps,
                 sc.feature.data(), sc.head_xhat.data(), &sc.head_rstd);
  std::vector<double> logits(head.classes);
  linear(sc.feature.data(), 1, d, head.weight, head.bias, head.classes, logits.data());
  mac += static_cast<std::uint64_t>(head.classes) * d;
  sc.x_out = std::move(x);
  sc.logits = logits;
  if (macs) *macs += mac;
  return logits;
}

void backward_sample(const ModelConfig& config, const ParamSet<double>& w,
                     const SampleCache& sc, int depth, const HeadRef& head,
                     std::span<const double> dlogits, ParamSet<double>& g) {
  const std::size_t d = config.embed_dim;
  const std::size_t T = config.tokens();
  const std::size_t N = config.num_patches();
  const std::size_t P = config.patch_dim();
  const std::size_t C = head.classes;

  // Head: logits = W f + b, f = LN(x_cls).
  std::vector<double> df(d, 0.0);
  linear_backward(sc.feature.data(), 1, d, head.weight, C, dlogits.data(),
                  g.head_w.data(), g.head_b.data(), df.data());
  std::vector<double> gx(d);
  for (std::size_t j = 0; j < d; ++j) {
    g.head_ln_gamma[j] += df[j] * sc.head_xhat[j];
    g.head_ln_beta[j] += df[j];
    gx[j] = df[j] * head.ln_gamma[j];
  }
  std::vector<double> dx(T * d, 0.0);
  layernorm_backward_row(gx.data(), sc.head_xhat.data(), sc.head_rstd, d, dx.data());

  std::vector<double> dh, dpre, db, dxmid, dO, dq, dk, dv, da, tmp;
  std::vector<double> qh, kh, vh, dqh, dkh, dvh, doh, dp;
  for (int l = depth - 1; l >= 0; --l) {
    const LayerConfig& lcfg = config.layers[l];
    const LayerParams<double>& lw = w.layers[l];
    LayerParams<double>& lg = g.layers[l];
    const LayerCache& lc = sc.layers[l];
    const std::size_t H = lcfg.heads;
    const std::size_t q = lcfg.qk_size, v = lcfg.value_size, e = lcfg.expansion_size;
    const std::size_t qw = q / H, vw = v / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(qw));

    // MLP: x_out = x_mid + GELU(b W1^T + b1) W2^T + b2.
    dh.assign(T * e, 0.0);
    linear_backward(lc.h.data(), T, e, lw.w2.data(), d, dx.data(), lg.w2.data(),
                    lg.b2.data(), dh.data());
    dpre.resize(T * e);
    for (std::size_t i = 0; i < T * e; ++i) dpre[i] = dh[i] * gelu_derivative(lc.h_pre[i]);
    db.assign(T * d, 0.0);
    linear_backward(lc.b.data(), T, d, lw.w1.data(), e, dpre.data(), lg.w1.data(),
                    lg.b1.data(), db.data());
    dxmid = dx;
    tmp.resize(d);
    for (std::size_t t = 0; t < T; ++t) {
      const double* dbr = db.data() + t * d;
      const double* xh = lc.xhat2.data() + t * d;
      for (std::size_t j = 0; j < d; ++j) {
        lg.ln2_gamma[j] += dbr[j] * xh[j];
        lg.ln2_beta[j] += dbr[j];
        tmp[j] = dbr[j] * lw.ln2_gamma[j];
      }
      layernorm_backward_row(tmp.data(), xh, lc.rstd2[t], d, dxmid.data() + t * d);
    }

    // Attention: x_mid = x_in + O Wo^T + bo.
    dO.assign(T * v, 0.0);
    linear_backward(lc.o.data(), T, v, lw.wo.data(), d, dxmid.data(), lg.wo.data(),
                    lg.bo.data(), dO.data());
    dq.assign(T * q, 0.0);
    dk.assign(T * q, 0.0);
    dv.assign(T * v, 0.0);
    qh.resize(T * qw);
    kh.resize(T * qw);
    vh.resize(T * vw);
    doh.resize(T * vw);
    dqh.resize(T * qw);
    dkh.resize(T * qw);
    dvh.resize(T * vw);
    dp.resize(T);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        std::copy_n(lc.q.data() + t * q + h * qw, qw, qh.data() + t * qw);
        std::copy_n(lc.k.data() + t * q + h * qw, qw, kh.data() + t * qw);
        std::copy_n(lc.v.data() + t * v + h * vw, vw, vh.data() + t * vw);
        std::copy_n(dO.data() + t * v + h * vw, vw, doh.data() + t * vw);
      }
      std::fill(dqh.begin(), dqh.end(), 0.0);
      std::fill(dkh.begin(), dkh.end(), 0.0);
      std::fill(dvh.begin(), dvh.end(), 0.0);
      const double* ph = lc.p.data() + h * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const double* prow = ph + i * T;
        const double* doi = doh.data() + i * vw;
        double weighted = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          dp[j] = dot(doi, vh.data() + j * vw, vw);
          weighted += prow[j] * dp[j];
          axpy(prow[j], doi, dvh.data() + j * vw, vw);
        }
        for (std::size_t j = 0; j < T; ++j) {
          const double ds = prow[j] * (dp[j] - weighted) * scale;
          if (ds == 0.0) continue;
          axpy(ds, kh.data() + j * qw, dqh.data() + i * qw, qw);
          axpy(ds, qh.data() + i * qw, dkh.data() + j * qw, qw);
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        std::copy_n(dqh.data() + t * qw, qw, dq.data() + t * q + h * qw);
        std::copy_n(dkh.data() + t * qw, qw, dk.data() + t * q + h * qw);
        std::copy_n(dvh.data() + t * vw, vw, dv.data() + t * v + h * vw);
      }
    }
    da.assign(T * d, 0.0);
    linear_backward(lc.a.data(), T, d, lw.wq.data(), q, dq.data(), lg.wq.data(),
                    lg.bq.data(), da.data());
    linear_backward(lc.a.data(), T, d, lw.wk.data(), q, dk.data(), lg.wk.data(),
                    lg.bk.data(), da.data());
    linear_backward(lc.a.data(), T, d, lw.wv.data(), v, dv.data(), lg.wv.data(),
                    lg.bv.data(), da.data());
    dx = dxmid;
    for (std::size_t t = 0; t < T; ++t) {
      const double* dar = da.data() + t * d;
      const double* xh = lc.xhat1.data() + t * d;
      for (std::size_t j = 0; j < d; ++j) {
        lg.ln1_gamma[j] += dar[j] * xh[j];
        lg.ln1_beta[j] += dar[j];
        tmp[j] = dar[j] * lw.ln1_gamma[j];
      }
      layernorm_backward_row(tmp.data(), xh, lc.rstd1[t], d, dx.data() + t * d);
    }
  }

  // Embeddings.
  for (std::size_t i = 0; i < T * d; ++i) g.pos_embed[i] += dx[i];
  for (std::size_t j = 0; j < d; ++j) g.cls_token[j] += dx[j];
  linear_backward(sc.patches.data(), N, P, w.patch_w.data(), d, dx.data() + d,
                  g.patch_w.data(), g.patch_b.data(), nullptr);
}

}  // namespace vitprune::detail
