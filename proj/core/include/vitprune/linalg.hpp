#pragma once

#include <vector>

#include "vitprune/tensor.hpp"

namespace vitprune {

template <typename T>
struct BasicSvd {
  BasicTensor<T> u;       // [m x r]
  std::vector<T> sigma;   // r values, descending, non-negative
  BasicTensor<T> vt;      // [r x n]
  int sweeps = 0;
};

using SvdFactorization = BasicSvd<float>;

// All kernels accumulate in double regardless of T.

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a * b^T
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a^T * b
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

/// Row-wise softmax, stabilized by subtracting each row's maximum.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& a);

/// Exact GELU, x * Phi(x) with Phi the standard normal CDF.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

double gelu(double x);
double gelu_derivative(double x);

/// Normalizes over the last axis, then applies gamma * xhat + beta.
template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, double eps);

/// Thin SVD by one-sided Jacobi rotations, computed in double.
///
/// Returns r = min(m, n) singular triplets sorted by descending singular value.
/// U columns and V^T rows are orthonormal, including those paired with zero
/// singular values (completed against the standard basis). The sign of each
/// triplet is fixed so the first non-negligible entry of its U column is
/// non-negative. Throws NumericError if the sweep cap is hit.
template <typename T>
BasicSvd<T> svd(const BasicTensor<T>& a);

template <typename T>
double frobenius_norm(const BasicTensor<T>& a);

template <typename T>
double max_abs(const BasicTensor<T>& a);

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace vitprune
