// SPDX-License-Identifier: Apache-2.0
#include "lime/autograd.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "lime/errors.hpp"

namespace lime::ad {

namespace {

void accumulate(Tensor& acc, const Tensor& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  auto dst = acc.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor map(const Tensor& a, auto&& fn) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  return out;
}

Tensor zip(const Tensor& a, const Tensor& b, auto&& fn) {
  Tensor out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) dst[i] = fn(pa[i], pb[i]);
  return out;
}

double stabilizer_sign(double v) { return v >= 0.0 ? 1.0 : -1.0; }

void require_arity(Op op, std::span<const Var> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw ContractError(std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs, got " +
                        std::to_string(inputs.size()));
  }
  for (const auto& in : inputs)
    if (!in) throw ContractError(std::string(op_name(op)) + ": null input");
}

/// Sum g (rows x cols) down to the shape of an operand that was broadcast.
Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Tensor out = Tensor::matrix(rows, cols);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) out(rows == 1 ? 0 : r, cols == 1 ? 0 : c) += g(r, c);
  return out;
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::softmax: return "softmax";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::broadcast: return "broadcast";
    case Op::slice: return "slice";
    case Op::concat: return "concat";
    case Op::scale: return "scale";
    case Op::reciprocal_eps: return "reciprocal_eps";
    case Op::sign: return "sign";
    case Op::norm_stats: return "norm_stats";
    case Op::sqrt: return "sqrt";
    case Op::maximum: return "maximum";
  }
  return "unknown";
}

Node::Node(Tensor value, Op op, std::vector<Var> parents, bool requires_grad, Backward backward)
    : value_(std::move(value)),
      op_(op),
      parents_(std::move(parents)),
      requires_grad_(requires_grad),
      backward_(std::move(backward)) {}

Var constant(Tensor value) { return std::make_shared<const Node>(std::move(value), Op::leaf, std::vector<Var>{}, false, nullptr); }

Var variable(Tensor value) { return std::make_shared<const Node>(std::move(value), Op::leaf, std::vector<Var>{}, true, nullptr); }

Var op_forward(Op kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  Tensor value;
  Node::Backward backward;

  switch (kind) {
    case Op::leaf:
      throw ContractError("op_forward: leaves are created with constant() or variable()");

    case Op::add: {
      require_arity(kind, inputs, 2);
      require_same_shape(inputs[0]->value(), inputs[1]->value(), "add");
      value = zip(inputs[0]->value(), inputs[1]->value(), [](double x, double y) { return x + y; });
      backward = [](const Node&, const Tensor& g, std::span<Tensor> pg) {
        accumulate(pg[0], g);
        accumulate(pg[1], g);
      };
      break;
    }
    case Op::mul: {
      require_arity(kind, inputs, 2);
      require_same_shape(inputs[0]->value(), inputs[1]->value(), "mul");
      value = zip(inputs[0]->value(), inputs[1]->value(), [](double x, double y) { return x * y; });
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& a = self.parents()[0]->value();
        const auto& b = self.parents()[1]->value();
        if (self.parents()[0]->requires_grad()) accumulate(pg[0], zip(g, b, [](double x, double y) { return x * y; }));
        if (self.parents()[1]->requires_grad()) accumulate(pg[1], zip(g, a, [](double x, double y) { return x * y; }));
      };
      break;
    }
    case Op::matmul: {
      require_arity(kind, inputs, 2);
      value = kernels::matmul(inputs[0]->value(), inputs[1]->value());
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& a = self.parents()[0]->value();
        const auto& b = self.parents()[1]->value();
        if (self.parents()[0]->requires_grad()) accumulate(pg[0], kernels::matmul_nt(g, b));
        if (self.parents()[1]->requires_grad()) accumulate(pg[1], kernels::matmul_tn(a, g));
      };
      break;
    }
    case Op::transpose: {
      require_arity(kind, inputs, 1);
      value = kernels::transpose(inputs[0]->value());
      backward = [](const Node&, const Tensor& g, std::span<Tensor> pg) { accumulate(pg[0], kernels::transpose(g)); };
      break;
    }
    case Op::exp: {
      require_arity(kind, inputs, 1);
      value = map(inputs[0]->value(), [](double x) { return std::exp(x); });
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        accumulate(pg[0], zip(g, self.value(), [](double x, double y) { return x * y; }));
      };
      break;
    }
    case Op::log: {
      require_arity(kind, inputs, 1);
      const auto& x = inputs[0]->value();
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x[i]));
      }
      value = map(x, [](double v) { return std::log(v); });
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        accumulate(pg[0], zip(g, self.parents()[0]->value(), [](double x, double y) { return x / y; }));
      };
      break;
    }
    case Op::softmax: {
      require_arity(kind, inputs, 1);
      const int axis = attrs.axis;
      value = kernels::softmax(inputs[0]->value(), axis);
      backward = [axis](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const Tensor& y = self.value();
        Tensor out(y.shape());
        if (axis == 1) {
          for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
            for (std::size_t c = 0; c < y.cols(); ++c) out(r, c) = y(r, c) * (g(r, c) - dot);
          }
        } else {
          for (std::size_t c = 0; c < y.cols(); ++c) {
            double dot = 0.0;
            for (std::size_t r = 0; r < y.rows(); ++r) dot += g(r, c) * y(r, c);
            for (std::size_t r = 0; r < y.rows(); ++r) out(r, c) = y(r, c) * (g(r, c) - dot);
          }
        }
        accumulate(pg[0], out);
      };
      break;
    }
    case Op::sum: {
      require_arity(kind, inputs, 1);
      const auto& x = inputs[0]->value();
      require_matrix(x, "sum");
      const int axis = attrs.axis;
      if (axis == -1) {
        value = Tensor::scalar(x.sum());
      } else if (axis == 0) {
        value = Tensor::matrix(1, x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) value(0, c) += x(r, c);
      } else if (axis == 1) {
        value = Tensor::matrix(x.rows(), 1);
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) value(r, 0) += x(r, c);
      } else {
        throw ContractError("sum: axis must be -1, 0 or 1");
      }
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& x = self.parents()[0]->value();
        Tensor out(x.shape());
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c)
            out(r, c) = g(g.rows() == 1 ? 0 : r, g.cols() == 1 ? 0 : c);
        accumulate(pg[0], out);
      };
      break;
    }
    case Op::mean: {
      require_arity(kind, inputs, 1);
      const auto& x = inputs[0]->value();
      if (x.empty()) throw ContractError("mean of empty tensor");
      value = Tensor::scalar(x.sum() / static_cast<double>(x.size()));
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& x = self.parents()[0]->value();
        accumulate(pg[0], Tensor(x.shape(), g.item() / static_cast<double>(x.size())));
      };
      break;
    }
    case Op::broadcast: {
      require_arity(kind, inputs, 1);
      const auto& x = inputs[0]->value();
      require_matrix(x, "broadcast");
      const std::size_t rows = attrs.rows, cols = attrs.cols;
      if ((x.rows() != 1 && x.rows() != rows) || (x.cols() != 1 && x.cols() != cols)) {
        throw DimensionError("broadcast: cannot expand " + shape_string(x.shape()) + " to [" + std::to_string(rows) +
                             "x" + std::to_string(cols) + "]");
      }
      value = Tensor::matrix(rows, cols);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) value(r, c) = x(x.rows() == 1 ? 0 : r, x.cols() == 1 ? 0 : c);
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& x = self.parents()[0]->value();
        accumulate(pg[0], reduce_to(g, x.rows(), x.cols()));
      };
      break;
    }
    case Op::slice: {
      require_arity(kind, inputs, 1);
      const auto& x = inputs[0]->value();
      require_matrix(x, "slice");
      const auto r0 = attrs.row_begin, r1 = attrs.row_end, c0 = attrs.col_begin, c1 = attrs.col_end;
      if (r0 > r1 || r1 > x.rows() || c0 > c1 || c1 > x.cols()) {
        throw DimensionError("slice out of range for " + shape_string(x.shape()));
      }
      value = Tensor::matrix(r1 - r0, c1 - c0);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) value(r - r0, c - c0) = x(r, c);
      backward = [r0, c0](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& x = self.parents()[0]->value();
        if (pg[0].empty()) pg[0] = Tensor(x.shape());
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) pg[0](r + r0, c + c0) += g(r, c);
      };
      break;
    }
    case Op::concat: {
      if (inputs.empty()) throw ContractError("concat: no inputs");
      const int axis = attrs.axis;
      if (axis != 0 && axis != 1) throw ContractError("concat: axis must be 0 or 1");
      std::size_t rows = 0, cols = 0;
      for (const auto& in : inputs) {
        if (!in) throw ContractError("concat: null input");
        const auto& t = in->value();
        require_matrix(t, "concat");
        if (axis == 0) {
          if (rows && t.cols() != cols) throw DimensionError("concat: column counts differ");
          cols = t.cols();
          rows += t.rows();
        } else {
          if (cols && t.rows() != rows) throw DimensionError("concat: row counts differ");
          rows = t.rows();
          cols += t.cols();
        }
      }
      value = Tensor::matrix(rows, cols);
      std::size_t offset = 0;
      for (const auto& in : inputs) {
        const auto& t = in->value();
        for (std::size_t r = 0; r < t.rows(); ++r)
          for (std::size_t c = 0; c < t.cols(); ++c) {
            if (axis == 0) value(offset + r, c) = t(r, c);
            else value(r, offset + c) = t(r, c);
          }
        offset += axis == 0 ? t.rows() : t.cols();
      }
      backward = [axis](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.parents().size(); ++i) {
          const auto& t = self.parents()[i]->value();
          if (self.parents()[i]->requires_grad()) {
            Tensor part(t.shape());
            for (std::size_t r = 0; r < t.rows(); ++r)
              for (std::size_t c = 0; c < t.cols(); ++c) part(r, c) = axis == 0 ? g(off + r, c) : g(r, off + c);
            accumulate(pg[i], part);
          }
          off += axis == 0 ? t.rows() : t.cols();
        }
      };
      break;
    }
    case Op::scale: {
      require_arity(kind, inputs, 1);
      const double f = attrs.scalar;
      value = map(inputs[0]->value(), [f](double x) { return x * f; });
      backward = [f](const Node&, const Tensor& g, std::span<Tensor> pg) {
        accumulate(pg[0], map(g, [f](double x) { return x * f; }));
      };
      break;
    }
    case Op::reciprocal_eps: {
      require_arity(kind, inputs, 1);
      const double eps = attrs.eps;
      if (eps < 0.0) throw ContractError("reciprocal_eps: epsilon must be non-negative");
      const auto& x = inputs[0]->value();
      if (eps == 0.0) {
        for (std::size_t i = 0; i < x.size(); ++i)
          if (std::abs(x[i]) < kDeadBand) throw SingularityError("reciprocal of value inside the dead band", i);
      }
      value = map(x, [eps](double v) { return 1.0 / (v + eps * stabilizer_sign(v)); });
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        accumulate(pg[0], zip(g, self.value(), [](double gv, double y) { return -gv * y * y; }));
      };
      break;
    }
    case Op::sign: {
      require_arity(kind, inputs, 1);
      value = map(inputs[0]->value(), [](double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); });
      backward = [](const Node& self, const Tensor&, std::span<Tensor> pg) {
        accumulate(pg[0], Tensor(self.parents()[0]->value().shape()));
      };
      break;
    }
    case Op::norm_stats: {
      require_arity(kind, inputs, 1);
      const bool centered = attrs.centered;
      value = kernels::norm_stats(inputs[0]->value(), centered, attrs.eps);
      backward = [centered](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& x = self.parents()[0]->value();
        const double n = static_cast<double>(x.cols());
        Tensor out(x.shape());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          double mu = 0.0;
          if (centered) {
            for (std::size_t c = 0; c < x.cols(); ++c) mu += x(r, c);
            mu /= n;
          }
          const double coef = g(r, 0) / (n * self.value()(r, 0));
          for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = coef * (x(r, c) - mu);
        }
        accumulate(pg[0], out);
      };
      break;
    }
    case Op::sqrt: {
      require_arity(kind, inputs, 1);
      const auto& x = inputs[0]->value();
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] < 0.0) throw DomainError("sqrt of negative value " + std::to_string(x[i]));
      value = map(x, [](double v) { return std::sqrt(v); });
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        accumulate(pg[0], zip(g, self.value(), [](double gv, double y) { return gv / (2.0 * y); }));
      };
      break;
    }
    case Op::maximum: {
      require_arity(kind, inputs, 2);
      require_same_shape(inputs[0]->value(), inputs[1]->value(), "maximum");
      value = zip(inputs[0]->value(), inputs[1]->value(), [](double x, double y) { return x >= y ? x : y; });
      backward = [](const Node& self, const Tensor& g, std::span<Tensor> pg) {
        const auto& a = self.parents()[0]->value();
        const auto& b = self.parents()[1]->value();
        Tensor ga(a.shape()), gb(b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) (a[i] >= b[i] ? ga[i] : gb[i]) = g[i];
        if (self.parents()[0]->requires_grad()) accumulate(pg[0], ga);
        if (self.parents()[1]->requires_grad()) accumulate(pg[1], gb);
      };
      break;
    }
  }

  if (!value.all_finite()) {
    throw NumericError("non-finite value produced by " + std::string(op_name(kind)));
  }
  const bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v->requires_grad(); });
  return std::make_shared<const Node>(std::move(value), kind, std::vector<Var>(inputs.begin(), inputs.end()),
                                      needs_grad, needs_grad ? std::move(backward) : Node::Backward{});
}

Var add(const Var& a, const Var& b) { return op_forward(Op::add, std::array{a, b}); }
Var mul(const Var& a, const Var& b) { return op_forward(Op::mul, std::array{a, b}); }
Var matmul(const Var& a, const Var& b) { return op_forward(Op::matmul, std::array{a, b}); }
Var transpose(const Var& a) { return op_forward(Op::transpose, std::array{a}); }
Var exp(const Var& a) { return op_forward(Op::exp, std::array{a}); }
Var log(const Var& a) { return op_forward(Op::log, std::array{a}); }

Var softmax(const Var& a, int axis) {
  OpAttrs at;
  at.axis = axis;
  return op_forward(Op::softmax, std::array{a}, at);
}

Var sum(const Var& a, int axis) {
  OpAttrs at;
  at.axis = axis;
  return op_forward(Op::sum, std::array{a}, at);
}

Var mean(const Var& a) { return op_forward(Op::mean, std::array{a}); }

Var broadcast(const Var& a, std::size_t rows, std::size_t cols) {
  OpAttrs at;
  at.rows = rows;
  at.cols = cols;
  return op_forward(Op::broadcast, std::array{a}, at);
}

Var slice(const Var& a, std::size_t row_begin, std::size_t row_end, std::size_t col_begin, std::size_t col_end) {
  OpAttrs at;
  at.row_begin = row_begin;
  at.row_end = row_end;
  at.col_begin = col_begin;
  at.col_end = col_end;
  return op_forward(Op::slice, std::array{a}, at);
}

Var concat(std::span<const Var> parts, int axis) {
  OpAttrs at;
  at.axis = axis;
  return op_forward(Op::concat, parts, at);
}

Var scale(const Var& a, double factor) {
  OpAttrs at;
  at.scalar = factor;
  return op_forward(Op::scale, std::array{a}, at);
}

Var reciprocal_eps(const Var& a, double eps) {
  OpAttrs at;
  at.eps = eps;
  return op_forward(Op::reciprocal_eps, std::array{a}, at);
}

Var sign(const Var& a) { return op_forward(Op::sign, std::array{a}); }

Var norm_stats(const Var& a, bool centered, double eps) {
  OpAttrs at;
  at.centered = centered;
  at.eps = eps;
  return op_forward(Op::norm_stats, std::array{a}, at);
}

Var sqrt(const Var& a) { return op_forward(Op::sqrt, std::array{a}); }
Var maximum(const Var& a, const Var& b) { return op_forward(Op::maximum, std::array{a, b}); }

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }
Var neg(const Var& a) { return scale(a, -1.0); }
Var relu(const Var& a) { return maximum(a, constant(Tensor(a->value().shape()))); }

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  return slice(a, begin, end, 0, a->value().cols());
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  return slice(a, 0, a->value().rows(), begin, end);
}

Var broadcast_like(const Var& a, const Var& like) {
  return broadcast(a, like->value().rows(), like->value().cols());
}

Var log_sum_exp(const Var& row) {
  // The shift is a constant, so it contributes nothing to the gradient.
  double shift = row->value()[0];
  for (double v : row->value().data()) shift = std::max(shift, v);
  const Var shifted = sub(row, constant(Tensor(row->value().shape(), shift)));
  return add(log(sum(exp(shifted), -1)), constant(Tensor::scalar(shift)));
}

std::vector<Tensor> gradient(const Var& output, std::span<const Var> wrt) {
  if (!output) throw ContractError("gradient: null output");
  if (output->value().size() != 1) {
    throw ContractError("gradient: output must be scalar, got " + shape_string(output->value().shape()));
  }

  // Iterative post-order DFS over the grad-requiring subgraph.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> visited;
  if (output->requires_grad()) {
    std::vector<std::pair<const Node*, std::size_t>> stack{{output.get(), 0}};
    visited.insert(output.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents().size()) {
        const Node* p = node->parents()[next++].get();
        if (p->requires_grad() && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<const Node*, Tensor> grads;
  grads.emplace(output.get(), Tensor(output->value().shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (!node->backward()) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    const Tensor g = found->second;
    std::vector<Tensor> parent_grads(node->parents().size());
    node->backward()(*node, g, parent_grads);
    for (std::size_t i = 0; i < parent_grads.size(); ++i) {
      const Node* p = node->parents()[i].get();
      if (!p->requires_grad() || parent_grads[i].empty()) continue;
      if (!parent_grads[i].all_finite()) {
        throw NumericError("non-finite gradient flowing out of " + std::string(op_name(node->op())));
      }
      accumulate(grads[p], parent_grads[i]);
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = grads.find(w.get());
    result.push_back(found != grads.end() ? found->second : Tensor(w->value().shape()));
  }
  return result;
}

Tensor gradient(const Var& output, const Var& wrt) { return gradient(output, std::span<const Var>(&wrt, 1)).front(); }

}  // namespace lime::ad
