#pragma once

// Dense row-major kernels shared by the forward and adjoint passes. Weights
// are float32, activations double. All loops run in a fixed order so results
// are bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "densealign/config.hpp"

namespace densealign::ops {

inline constexpr double kLayerNormEps = 1e-5;

/// y[r, o] = b[o] + sum_k x[r, k] * w[o, k]   (w is [out, in])
inline void linear(std::span<const double> x, std::size_t rows, std::size_t in, std::span<const float> w,
                   std::span<const float> b, std::size_t out, std::span<double> y) {
  constexpr std::size_t kLanes = 8;
  std::vector<double> wo(in);
  for (std::size_t o = 0; o < out; ++o) {
    std::copy_n(w.data() + o * in, in, wo.begin());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * in;
      double lane[kLanes] = {};
      std::size_t k = 0;
      for (; k + kLanes <= in; k += kLanes)
        for (std::size_t j = 0; j < kLanes; ++j) lane[j] += xr[k + j] * wo[k + j];
      double acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
      for (; k < in; ++k) acc += xr[k] * wo[k];
      y[r * out + o] = acc + (b.empty() ? 0.0 : b[o]);
    }
  }
}

/// y[r, o] = sum_k x[r, k] * w[k, o]   (w is [in, out], as in CLIP projections)
inline void matmul(std::span<const double> x, std::size_t rows, std::size_t in, std::span<const float> w,
                   std::size_t out, std::span<double> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y.data() + r * out;
    std::fill(yr, yr + out, 0.0);
    const double* xr = x.data() + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = xr[k];
      const float* wk = w.data() + k * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wk[o];
    }
  }
}

/// Row-wise layer norm. `xhat` and `rstd` may be empty when not needed.
inline void layer_norm(std::span<const double> x, std::size_t rows, std::size_t width, std::span<const float> gamma,
                       std::span<const float> beta, std::span<double> y, std::span<double> xhat = {},
                       std::span<double> rstd = {}) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    double mean = 0.0;
    for (std::size_t k = 0; k < width; ++k) mean += xr[k];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      const double d = xr[k] - mean;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    if (!rstd.empty()) rstd[r] = inv;
    for (std::size_t k = 0; k < width; ++k) {
      const double h = (xr[k] - mean) * inv;
      if (!xhat.empty()) xhat[r * width + k] = h;
      y[r * width + k] = h * gamma[k] + beta[k];
    }
  }
}

inline double activate(Activation kind, double x) {
  if (kind == Activation::quick_gelu) return x / (1.0 + std::exp(-1.702 * x));
  return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752));
}

inline double activate_grad(Activation kind, double x) {
  if (kind == Activation::quick_gelu) {
    const double s = 1.0 / (1.0 + std::exp(-1.702 * x));
    return s + 1.702 * x * s * (1.0 - s);
  }
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752));
  const double pdf = 0.39894228040143268 * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

/// Numerically stable softmax over the first `valid` entries of `row`;
/// the remaining entries are set to exactly zero.
inline void masked_softmax(std::span<double> row, std::size_t valid) {
  double mx = row[0];
  for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < valid; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  for (std::size_t j = 0; j < valid; ++j) row[j] /= sum;
  for (std::size_t j = valid; j < row.size(); ++j) row[j] = 0.0;
}

}  // namespace densealign::ops
