#include "vitprune/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace vitprune {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    out << (i ? "x" : "") << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

template <typename T>
void require_matrix(const BasicTensor<T>& a, const char* what) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " +
                         shape_to_string(a.shape()));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ, " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicTensor<T> c({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a(i, t);
      const T* brow = b.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) c(i, j) = static_cast<T>(acc[j]);
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner extents differ, " +
                         shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) {
        acc += static_cast<double>(arow[t]) * static_cast<double>(brow[t]);
      }
      c(i, j) = static_cast<T>(acc);
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner extents differ, " +
                         shape_to_string(a.shape()) + "^T x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(t, i);
      double* crow = acc.data() + i * n;
      const T* brow = b.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * static_cast<double>(brow[j]);
    }
  }
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < acc.size(); ++i) c[i] = static_cast<T>(acc[i]);
  return c;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_matrix(a, "transpose");
  BasicTensor<T> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a) {
  require_matrix(a, "softmax_rows");
  BasicTensor<T> out(a.shape());
  const std::size_t n = a.cols();
  std::vector<double> buf(n);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(a(i, j)));
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      buf[j] = std::exp(static_cast<double>(a(i, j)) - mx);
      sum += buf[j];
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<T>(buf[j] / sum);
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    out[i] = static_cast<T>(gelu(static_cast<double>(x[i])));
  }
  return out;
}

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layernorm: scalar input");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layernorm: last axis has zero extent");
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layernorm: gamma/beta length does not match last axis " +
                         std::to_string(d));
  }
  BasicTensor<T> out(x.shape());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    T* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = static_cast<T>((in[j] - mean) * rstd * gamma[j] + beta[j]);
    }
  }
  return out;
}

namespace {

constexpr int kMaxSweeps = 80;

// One-sided Jacobi on the columns of an m x n matrix with m >= n. `cols` holds
// the matrix transposed (n rows of length m). On return `cols` holds U*Sigma
// column-wise and `v` (n x n, row-major, rows are V columns) the rotations.
int jacobi_orthogonalize(std::vector<double>& cols, std::vector<double>& v,
                         std::size_t m, std::size_t n, double& off_residual) {
  constexpr double tol = 1e-15;
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 1; sweep <= kMaxSweeps; ++sweep) {
    bool rotated = false;
    off_residual = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = cols.data() + p * m;
        double* cq = cols.data() + q * m;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        const double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
        off_residual = std::max(off_residual, coupling);
        if (coupling <= tol) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = cp[i], xq = cq[i];
          cp[i] = c * xp - s * xq;
          cq[i] = s * xp + c * xq;
        }
        double* vp = v.data() + p * n;
        double* vq = v.data() + q * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double xp = vp[i], xq = vq[i];
          vp[i] = c * xp - s * xq;
          vq[i] = s * xp + c * xq;
        }
      }
    }
    if (!rotated) return sweep;
  }
  return -1;
}

// Fills `target` (length m) with a unit vector orthogonal to the first `count`
// vectors stored in `basis` (rows of length m).
void complete_basis(const std::vector<double>& basis, std::size_t count, std::size_t m,
                    std::span<double> target) {
  for (std::size_t e = 0; e < m; ++e) {
    std::fill(target.begin(), target.end(), 0.0);
    target[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t b = 0; b < count; ++b) {
        const double* bv = basis.data() + b * m;
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) dot += bv[i] * target[i];
        for (std::size_t i = 0; i < m; ++i) target[i] -= dot * bv[i];
      }
    }
    double norm = 0.0;
    for (double x : target) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 1e-6) {
      for (double& x : target) x /= norm;
      return;
    }
  }
}

struct SvdDouble {
  std::vector<double> u;  // r rows of length m (U columns)
  std::vector<double> sigma;
  std::vector<double> v;  // r rows of length n (V columns)
  int sweeps = 0;
};

SvdDouble svd_tall(std::vector<double> cols, std::size_t m, std::size_t n) {
  std::vector<double> v;
  double residual = 0.0;
  const int sweeps = jacobi_orthogonalize(cols, v, m, n, residual);
  if (sweeps < 0) {
    throw NumericError("svd: Jacobi iteration did not converge after " +
                           std::to_string(kMaxSweeps) +
                           " sweeps (max column coupling " + std::to_string(residual) +
                           ")",
                       residual);
  }
  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += cols[j * m + i] * cols[j * m + i];
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
  const double largest = n ? norms[order[0]] : 0.0;
  const double negligible =
      std::max(largest, 1.0) * static_cast<double>(std::max(m, n)) * 1e-15;

  SvdDouble out;
  out.sweeps = sweeps;
  out.u.assign(n * m, 0.0);
  out.v.assign(n * n, 0.0);
  out.sigma.assign(n, 0.0);
  std::size_t filled = 0;
  std::vector<std::size_t> deficient;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    std::copy_n(v.data() + j * n, n, out.v.data() + k * n);
    if (norms[j] > negligible) {
      out.sigma[k] = norms[j];
      for (std::size_t i = 0; i < m; ++i) out.u[k * m + i] = cols[j * m + i] / norms[j];
      ++filled;
    } else {
      deficient.push_back(k);
    }
  }
  // Zero singular values sort last, so the filled rows are exactly [0, filled).
  for (std::size_t k : deficient) {
    complete_basis(out.u, k, m, std::span<double>(out.u.data() + k * m, m));
  }
  for (std::size_t k = 0; k < n; ++k) {
    double* uk = out.u.data() + k * m;
    double* vk = out.v.data() + k * n;
    for (std::size_t i = 0; i < m; ++i) {
      if (std::abs(uk[i]) > 1e-9) {
        if (uk[i] < 0.0) {
          for (std::size_t t = 0; t < m; ++t) uk[t] = -uk[t];
          for (std::size_t t = 0; t < n; ++t) vk[t] = -vk[t];
        }
        break;
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
BasicSvd<T> svd(const BasicTensor<T>& a) {
  require_matrix(a, "svd");
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(a[i]))) {
      throw ArgumentError("svd: input contains non-finite values");
    }
  }
  const bool tall = m >= n;
  const std::size_t rows = tall ? m : n;  // length of each column vector
  const std::size_t cnt = tall ? n : m;   // number of columns orthogonalized
  std::vector<double> cols(rows * cnt);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (tall) {
        cols[j * m + i] = a(i, j);
      } else {
        cols[i * n + j] = a(i, j);
      }
    }
  }
  SvdDouble s = svd_tall(std::move(cols), rows, cnt);
  const std::size_t r = cnt;
  // For wide inputs we factored A^T = U' S V'^T, hence A = V' S U'^T.
  const std::vector<double>& left = tall ? s.u : s.v;
  const std::vector<double>& right = tall ? s.v : s.u;
  BasicSvd<T> out;
  out.sweeps = s.sweeps;
  out.u = BasicTensor<T>({m, r});
  out.vt = BasicTensor<T>({r, n});
  out.sigma.resize(r);
  for (std::size_t k = 0; k < r; ++k) {
    out.sigma[k] = static_cast<T>(s.sigma[k]);
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = static_cast<T>(left[k * m + i]);
    for (std::size_t j = 0; j < n; ++j) out.vt(k, j) = static_cast<T>(right[k * n + j]);
  }
  if (!tall) {
    // Re-apply the sign convention on the final U.
    for (std::size_t k = 0; k < r; ++k) {
      for (std::size_t i = 0; i < m; ++i) {
        if (std::abs(static_cast<double>(out.u(i, k))) > 1e-9) {
          if (out.u(i, k) < 0) {
            for (std::size_t t = 0; t < m; ++t) out.u(t, k) = -out.u(t, k);
            for (std::size_t t = 0; t < n; ++t) out.vt(k, t) = -out.vt(k, t);
          }
          break;
        }
      }
    }
  }
  return out;
}

template <typename T>
double frobenius_norm(const BasicTensor<T>& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * a[i];
  return std::sqrt(s);
}

template <typename T>
double max_abs(const BasicTensor<T>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i])));
  }
  return m;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: shapes differ, " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

#define VITPRUNE_INSTANTIATE(T)                                                      \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);      \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                          \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                       \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                               \
  template BasicTensor<T> layernorm(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                    const BasicTensor<T>&, double);                  \
  template BasicSvd<T> svd(const BasicTensor<T>&);                                   \
  template double frobenius_norm(const BasicTensor<T>&);                             \
  template double max_abs(const BasicTensor<T>&);                                    \
  template double max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);

VITPRUNE_INSTANTIATE(float)
VITPRUNE_INSTANTIATE(double)

#undef VITPRUNE_INSTANTIATE

}  // namespace vitprune
