// SPDX-License-Identifier: Apache-2.0
#include "lime/adam.hpp"

#include <cmath>

#include "lime/errors.hpp"

namespace lime {

Adam::Adam(AdamConfig config, const std::vector<Shape>& shapes) : config_(config) {
  for (const auto& s : shapes) {
    m_.emplace_back(s);
    v_.emplace_back(s);
  }
}

void Adam::step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw ContractError("Adam::step: parameter count does not match optimizer state");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    require_same_shape(p, grads[i], "Adam::step");
    auto m = m_[i].data();
    auto v = v_[i].data();
    auto g = grads[i].data();
    auto w = p.data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= config_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
}

}  // namespace lime
