#ifndef TESTDG_AUTODIFF_HPP
#define TESTDG_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <vector>

#include "testdg/array.hpp"

namespace testdg {

// One node of the dynamically built reverse-mode graph. Leaves are created
// with constant() / parameter(); every op allocates a fresh node referencing
// its inputs, so graphs are rebuilt per step while parameter leaves persist.
class Node {
 public:
  RealArray value;
  RealArray grad;  // allocated (zeros) iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pushes this->grad into parents
};

using Var = std::shared_ptr<Node>;

Var constant(RealArray value);
Var parameter(RealArray value);

// Reverse-mode accumulation from a scalar root into every reachable node
// that requires gradients. Throws std::invalid_argument for non-scalar roots.
void backward(const Var& root);

// --- differentiable operations -------------------------------------------

enum class EwUnary { relu, gelu, sigmoid, log, abs, square };
enum class EwBinary { add, mul };

Var matmul(const Var& a, const Var& b);

Var add(const Var& a, const Var& b);  // numpy-style broadcasting
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);

Var relu(const Var& x);
Var gelu(const Var& x);  // tanh approximation
Var sigmoid(const Var& x);
Var vlog(const Var& x);  // throws std::domain_error on non-positive input
Var vabs(const Var& x);  // subgradient 0 at 0
Var square(const Var& x);
Var clamp(const Var& x, double lo, double hi);  // gradient passes strictly inside

Var sum(const Var& x);   // -> scalar
Var mean(const Var& x);  // -> scalar
Var softmax_rows(const Var& logits);  // rank-2, stabilized per row

// Row gather from a rank-2 input; duplicate indices are allowed and their
// gradients accumulate.
Var gather_rows(const Var& x, std::vector<std::size_t> rows);

// Enum-dispatched forms; same nodes as the named functions above.
Var elementwise(EwUnary op, const Var& x);
Var elementwise(EwBinary op, const Var& a, const Var& b);

// --- helpers ---------------------------------------------------------------

// Broadcast result shape of two operand shapes (right-aligned); throws on
// incompatible extents.
std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                         const std::vector<std::size_t>& b);

namespace detail {
Var make_node(RealArray value, std::vector<Var> parents,
              std::function<void(Node&)> backprop, const char* context);
}

}  // namespace testdg

#endif
