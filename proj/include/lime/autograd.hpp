// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "lime/tensor.hpp"

namespace lime::ad {

enum class Op {
  leaf,
  add,
  mul,
  matmul,
  transpose,
  exp,
  log,
  softmax,
  sum,
  mean,
  broadcast,
  slice,
  concat,
  scale,
  reciprocal_eps,
  sign,
  norm_stats,
  sqrt,
  maximum,
};

std::string_view op_name(Op op);

/// Attributes for parameterised operations. Unused fields are ignored.
struct OpAttrs {
  int axis = 1;            // softmax, sum (-1 = all), concat
  double scalar = 0.0;     // scale factor
  double eps = 0.0;        // reciprocal_eps stabilizer, norm_stats variance floor
  bool centered = false;   // norm_stats: layer-norm (true) or rms-norm (false)
  std::size_t row_begin = 0, row_end = 0, col_begin = 0, col_end = 0;  // slice
  std::size_t rows = 0, cols = 0;                                        // broadcast target
};

class Node;
using Var = std::shared_ptr<const Node>;

/// Immutable vertex of the computation graph. Its backward rule adds the
/// vector-Jacobian product for each parent into the supplied accumulators
/// (an accumulator is left untouched when the parent needs no gradient).
class Node {
 public:
  using Backward = std::function<void(const Node& self, const Tensor& grad, std::span<Tensor> parent_grads)>;

  Node(Tensor value, Op op, std::vector<Var> parents, bool requires_grad, Backward backward);

  const Tensor& value() const noexcept { return value_; }
  Op op() const noexcept { return op_; }
  const std::vector<Var>& parents() const noexcept { return parents_; }
  bool requires_grad() const noexcept { return requires_grad_; }
  const Backward& backward() const noexcept { return backward_; }

 private:
  Tensor value_;
  Op op_;
  std::vector<Var> parents_;
  bool requires_grad_;
  Backward backward_;
};

/// Leaf that never receives a gradient (frozen weights, masks, data).
Var constant(Tensor value);
/// Leaf that gradients are taken with respect to.
Var variable(Tensor value);

/// Generic entry point; the named helpers below forward here.
Var op_forward(Op kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softmax(const Var& a, int axis);
/// axis 0 -> 1 x cols, axis 1 -> rows x 1, axis -1 -> 1 x 1.
Var sum(const Var& a, int axis);
Var mean(const Var& a);
Var broadcast(const Var& a, std::size_t rows, std::size_t cols);
Var slice(const Var& a, std::size_t row_begin, std::size_t row_end, std::size_t col_begin, std::size_t col_end);
Var concat(std::span<const Var> parts, int axis);
Var scale(const Var& a, double factor);
/// 1 / (a + eps * s(a)) with s(a) = +1 for a >= 0 and -1 otherwise.
/// With eps == 0, |a| below the dead band raises SingularityError.
Var reciprocal_eps(const Var& a, double eps);
Var sign(const Var& a);
Var norm_stats(const Var& a, bool centered, double eps);
Var sqrt(const Var& a);
Var maximum(const Var& a, const Var& b);

// Composites.
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var relu(const Var& a);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
/// Broadcast a (rows x 1), (1 x cols) or (1 x 1) operand to the shape of like.
Var broadcast_like(const Var& a, const Var& like);
Var log_sum_exp(const Var& row);

/// Magnitude below which a denominator counts as singular.
inline constexpr double kDeadBand = 1e-12;

/// Reverse-mode gradients of a scalar node. Nodes outside the ancestry of
/// output receive exact zeros.
std::vector<Tensor> gradient(const Var& output, std::span<const Var> wrt);
Tensor gradient(const Var& output, const Var& wrt);

}  // namespace lime::ad
