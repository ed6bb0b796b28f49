#include "testdg/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>

namespace testdg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_matrix(const RealArray& a) {
  return ConstMatMap(a.data(), static_cast<Eigen::Index>(a.extent(0)),
                     static_cast<Eigen::Index>(a.extent(1)));
}

MatMap as_matrix(RealArray& a) {
  return MatMap(a.data(), static_cast<Eigen::Index>(a.extent(0)),
                static_cast<Eigen::Index>(a.extent(1)));
}

// Element offsets of one broadcast operand for every element of the result.
std::vector<std::size_t> broadcast_offsets(const std::vector<std::size_t>& op_shape,
                                           const std::vector<std::size_t>& out_shape) {
  const std::size_t out_rank = out_shape.size();
  const std::size_t op_rank = op_shape.size();

  std::vector<std::size_t> op_strides(out_rank, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < op_rank; ++i) {
    std::size_t axis = op_rank - 1 - i;           // axis in operand
    std::size_t out_axis = out_rank - 1 - i;      // aligned axis in result
    op_strides[out_axis] = (op_shape[axis] == 1) ? 0 : stride;
    stride *= op_shape[axis];
  }

  std::size_t numel = 1;
  for (std::size_t e : out_shape) numel *= e;

  std::vector<std::size_t> offsets(numel);
  std::vector<std::size_t> idx(out_rank, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < numel; ++lin) {
    offsets[lin] = off;
    for (std::size_t a = out_rank; a-- > 0;) {
      ++idx[a];
      off += op_strides[a];
      if (idx[a] < out_shape[a]) break;
      off -= op_strides[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  return offsets;
}

bool any_requires_grad(const std::vector<Var>& parents) {
  return std::any_of(parents.begin(), parents.end(),
                     [](const Var& p) { return p->requires_grad; });
}

}  // namespace

std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                         const std::vector<std::size_t>& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  std::vector<std::size_t> out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw std::invalid_argument("broadcast: incompatible extents");
    }
    out[rank - 1 - i] = std::max(ea, eb);
  }
  return out;
}

namespace detail {

Var make_node(RealArray value, std::vector<Var> parents,
              std::function<void(Node&)> backprop, const char* context) {
  ensure_finite(value, context);
  auto node = std::make_shared<Node>();
  node->requires_grad = any_requires_grad(parents);
  if (node->requires_grad) {
    node->grad = RealArray(value.shape());
    node->backprop = std::move(backprop);
  }
  node->value = std::move(value);
  node->parents = std::move(parents);
  return node;
}

}  // namespace detail

Var constant(RealArray value) {
  ensure_finite(value, "constant");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var parameter(RealArray value) {
  ensure_finite(value, "parameter");
  auto node = std::make_shared<Node>();
  node->grad = RealArray(value.shape());
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

void backward(const Var& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->value.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                root->value.shape_str());
  }
  if (!root->requires_grad) return;  // constant root, nothing reachable

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // iterative post-order DFS over grad-requiring subgraph
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) node->backprop(*node);
  }
}

Var matmul(const Var& a, const Var& b) {
  const RealArray& av = a->value;
  const RealArray& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2) {
    throw std::invalid_argument("matmul: operands must be rank 2");
  }
  if (av.extent(1) != bv.extent(0)) {
    throw std::invalid_argument("matmul: inner extents disagree, " + av.shape_str() +
                                " x " + bv.shape_str());
  }
  RealArray out({av.extent(0), bv.extent(1)});
  as_matrix(out) = as_matrix(av) * as_matrix(bv);

  auto backprop = [](Node& self) {
    Var a = self.parents[0];
    Var b = self.parents[1];
    ConstMatMap g(self.grad.data(), static_cast<Eigen::Index>(self.grad.extent(0)),
                  static_cast<Eigen::Index>(self.grad.extent(1)));
    if (a->requires_grad) as_matrix(a->grad) += g * as_matrix(b->value).transpose();
    if (b->requires_grad) as_matrix(b->grad) += as_matrix(a->value).transpose() * g;
  };
  return detail::make_node(std::move(out), {a, b}, backprop, "matmul");
}

namespace {

Var binary_broadcast(const Var& a, const Var& b, EwBinary op, bool negate_b) {
  auto out_shape = broadcast_shape(a->value.shape(), b->value.shape());
  auto map_a = broadcast_offsets(a->value.shape(), out_shape);
  auto map_b = broadcast_offsets(b->value.shape(), out_shape);

  RealArray out(out_shape);
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  const double bsign = negate_b ? -1.0 : 1.0;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double xa = pa[map_a[i]];
    double xb = bsign * pb[map_b[i]];
    out[i] = (op == EwBinary::add) ? xa + xb : xa * xb;
  }

  auto backprop = [map_a = std::move(map_a), map_b = std::move(map_b), op,
                   bsign](Node& self) {
    Var a = self.parents[0];
    Var b = self.parents[1];
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      if (op == EwBinary::add) {
        if (a->requires_grad) a->grad[map_a[i]] += g[i];
        if (b->requires_grad) b->grad[map_b[i]] += bsign * g[i];
      } else {
        if (a->requires_grad) a->grad[map_a[i]] += g[i] * b->value[map_b[i]];
        if (b->requires_grad) b->grad[map_b[i]] += g[i] * a->value[map_a[i]];
      }
    }
  };
  const char* name = (op == EwBinary::add) ? (negate_b ? "sub" : "add") : "mul";
  return detail::make_node(std::move(out), {a, b}, backprop, name);
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary_broadcast(a, b, EwBinary::add, false); }
Var sub(const Var& a, const Var& b) { return binary_broadcast(a, b, EwBinary::add, true); }
Var mul(const Var& a, const Var& b) { return binary_broadcast(a, b, EwBinary::mul, false); }

Var scale(const Var& a, double c) {
  RealArray out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = c * a->value[i];
  auto backprop = [c](Node& self) {
    Var a = self.parents[0];
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) a->grad[i] += c * self.grad[i];
  };
  return detail::make_node(std::move(out), {a}, backprop, "scale");
}

namespace {

// Unary elementwise node: fwd(x) and dfdx(x, fx).
template <typename F, typename G>
Var unary_op(const Var& x, F fwd, G dfdx, const char* name) {
  RealArray out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(x->value[i]);
  auto backprop = [dfdx](Node& self) {
    Var x = self.parents[0];
    if (!x->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      x->grad[i] += self.grad[i] * dfdx(x->value[i], self.value[i]);
    }
  };
  return detail::make_node(std::move(out), {x}, backprop, name);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Var relu(const Var& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; }, "relu");
}

Var gelu(const Var& x) {
  return unary_op(
      x,
      [](double v) {
        double u = kGeluC * (v + kGeluA * v * v * v);
        return 0.5 * v * (1.0 + std::tanh(u));
      },
      [](double v, double) {
        double u = kGeluC * (v + kGeluA * v * v * v);
        double t = std::tanh(u);
        double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      },
      "gelu");
}

Var sigmoid(const Var& x) {
  return unary_op(
      x,
      [](double v) {
        // stable in both tails
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double s) { return s * (1.0 - s); }, "sigmoid");
}

Var vlog(const Var& x) {
  for (std::size_t i = 0; i < x->value.numel(); ++i) {
    if (!(x->value[i] > 0.0)) {
      throw std::domain_error("log: non-positive input");
    }
  }
  return unary_op(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; }, "log");
}

Var vabs(const Var& x) {
  return unary_op(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); },
      "abs");
}

Var square(const Var& x) {
  return unary_op(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; }, "square");
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  return unary_op(
      x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; },
      "clamp");
}

Var sum(const Var& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
  auto backprop = [](Node& self) {
    Var x = self.parents[0];
    if (!x->requires_grad) return;
    double g = self.grad[0];
    for (std::size_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g;
  };
  return detail::make_node(RealArray::scalar(s), {x}, backprop, "sum");
}

Var gather_rows(const Var& x, std::vector<std::size_t> rows) {
  if (x->value.rank() != 2) throw std::invalid_argument("gather_rows: input must be rank-2");
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const std::size_t cols = x->value.extent(1);
  for (std::size_t r : rows)
    if (r >= x->value.extent(0)) throw std::invalid_argument("gather_rows: index out of range");
  RealArray out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::span<const double> src = x->value.row(rows[i]);
    std::span<double> dst = out.row(i);
    for (std::size_t j = 0; j < cols; ++j) dst[j] = src[j];
  }
  auto backprop = [rows, cols](Node& self) {
    Var x = self.parents[0];
    if (!x->requires_grad) return;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::span<const double> g = self.grad.row(i);
      std::span<double> dst = x->grad.row(rows[i]);
      for (std::size_t j = 0; j < cols; ++j) dst[j] += g[j];
    }
  };
  return detail::make_node(std::move(out), {x}, backprop, "gather_rows");
}

Var mean(const Var& x) {
  if (x->value.numel() == 0) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < x->value.numel(); ++i) s += x->value[i];
  const double inv_n = 1.0 / static_cast<double>(x->value.numel());
  auto backprop = [inv_n](Node& self) {
    Var x = self.parents[0];
    if (!x->requires_grad) return;
    double g = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g;
  };
  return detail::make_node(RealArray::scalar(s * inv_n), {x}, backprop, "mean");
}

Var softmax_rows(const Var& logits) {
  const RealArray& z = logits->value;
  if (z.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 input required");
  const std::size_t rows = z.extent(0), cols = z.extent(1);

  RealArray out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double m = z.at(r, 0);
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, z.at(r, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double e = std::exp(z.at(r, c) - m);
      out.at(r, c) = e;
      denom += e;
    }
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= denom;
  }

  auto backprop = [rows, cols](Node& self) {
    Var x = self.parents[0];
    if (!x->requires_grad) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) {
        x->grad.at(r, c) += self.value.at(r, c) * (self.grad.at(r, c) - dot);
      }
    }
  };
  return detail::make_node(std::move(out), {logits}, backprop, "softmax");
}

Var elementwise(EwUnary op, const Var& x) {
  switch (op) {
    case EwUnary::relu: return relu(x);
    case EwUnary::gelu: return gelu(x);
    case EwUnary::sigmoid: return sigmoid(x);
    case EwUnary::log: return vlog(x);
    case EwUnary::abs: return vabs(x);
    case EwUnary::square: return square(x);
  }
  throw std::invalid_argument("elementwise: unknown unary op");
}

Var elementwise(EwBinary op, const Var& a, const Var& b) {
  switch (op) {
    case EwBinary::add: return add(a, b);
    case EwBinary::mul: return mul(a, b);
  }
  throw std::invalid_argument("elementwise: unknown binary op");
}

}  // namespace testdg
