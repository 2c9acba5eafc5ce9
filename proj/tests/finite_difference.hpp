// SPDX-License-Identifier: Apache-2.0
// Central finite-difference oracle shared by the gradient tests. It only
// evaluates forward values, never the reverse pass it is checking.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "lime/tensor.hpp"

namespace lime::testing {

inline Tensor central_difference(const std::function<double(const Tensor&)>& f, const Tensor& at, double step = 1e-5) {
  Tensor grad(at.shape());
  Tensor probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// ||a - b|| / max(||a||, ||b||), with an absolute floor for near-zero gradients.
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace lime::testing
