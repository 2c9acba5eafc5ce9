// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "lime/tensor.hpp"

namespace lime {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of parameter tensors.
class Adam {
 public:
  Adam(AdamConfig config, const std::vector<Shape>& shapes);

  /// params[i] -= lr * m_hat / (sqrt(v_hat) + eps), using grads[i].
  void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

}  // namespace lime
