#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mlab/tensor.hpp"

namespace mlab::ad {

// Reverse-mode automatic differentiation over a dynamically built DAG of
// tensor operations. The backward pass emits ordinary graph nodes, so the
// result of grad() is itself differentiable; that is what makes training with
// a gradient-norm penalty (grad-of-grad) possible.

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,     // c * x, c a compile-time constant of the graph
  SMul,      // broadcast scalar node * tensor node
  MatMul,    // optional transposition of either operand
  Reshape,
  AddRowVec, // (n,k) + broadcast row vector (k)
  ColSum,    // (n,k) -> (k)
  RowSum,    // (n,k) -> (n)
  TileRows,  // (k) -> (n,k)
  TileCols,  // (n) -> (n,c)
  Sum,       // all elements -> scalar
  Exp,
  Log,
  Softplus,
  Sigmoid,
  Tanh,
  Relu,
  Heaviside, // derivative of relu; its own derivative is zero a.e.
  RowLse,    // row-wise log-sum-exp, (n,c) -> (n)
  Pick,      // select one column per row, (n,c) -> (n)
  Scatter,   // inverse of Pick, (n) -> (n,c)
};

const char* op_name(Op op);

namespace detail {
struct Node {
  std::uint64_t id = 0;
  Op op = Op::Const;
  std::vector<std::shared_ptr<Node>> inputs;
  Tensor value;
  double scalar_attr = 0.0;           // Scale factor
  bool trans_a = false, trans_b = false;  // MatMul
  std::size_t count_attr = 0;         // TileRows/TileCols/Scatter extent
  std::vector<std::int32_t> index_attr;  // Pick/Scatter column indices
};
using NodePtr = std::shared_ptr<Node>;
}  // namespace detail

// Value-semantic handle to a graph node. Cheap to copy; the underlying node
// is immutable after construction.
class Var {
 public:
  Var() = default;
  explicit Var(detail::NodePtr n) : node_(std::move(n)) {}

  bool valid() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  double scalar_value() const { return node_->value.scalar_value(); }
  bool is_leaf() const { return node_->op == Op::Leaf; }
  Op op() const { return node_->op; }
  std::uint64_t id() const { return node_->id; }

  const detail::NodePtr& node() const { return node_; }
  bool same_node(const Var& o) const { return node_.get() == o.node_.get(); }

 private:
  detail::NodePtr node_;
};

// --- graph construction -----------------------------------------------------

Var leaf(Tensor v);
Var constant(Tensor v);
Var constant(double v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var smul(const Var& scalar_node, const Var& t);
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var reshape(const Var& a, Shape shape);
Var add_rowvec(const Var& m, const Var& v);
Var colsum(const Var& m);
Var rowsum(const Var& m);
Var tile_rows(const Var& v, std::size_t n);
Var tile_cols(const Var& v, std::size_t c);
Var sum(const Var& a);
Var mean(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var heaviside(const Var& a);
Var rowlse(const Var& z);
Var pick(const Var& z, const std::vector<std::int32_t>& cols);
Var scatter(const Var& v, const std::vector<std::int32_t>& cols, std::size_t num_cols);

// Conveniences composed from the primitives above.
Var matvec(const Var& a, const Var& x);
Var dot(const Var& a, const Var& b);
Var sumsq(const Var& a);

// --- differentiation --------------------------------------------------------

// Gradient of a scalar-valued node with respect to one leaf (or intermediate).
// The result is a node in a new graph region and can be differentiated again.
// Throws if `out` is not scalar or if `wrt` does not feed into `out`.
Var grad(const Var& out, const Var& wrt);

// One backward sweep for several targets. Targets that do not feed into `out`
// yield zero tensors when allow_unused is set, and throw otherwise.
std::vector<Var> gradients(const Var& out, std::span<const Var> wrts, bool allow_unused = true);

// --- replay -----------------------------------------------------------------

// A captured computation: one output node plus the ordered input leaves it was
// built from. forward() re-evaluates the recorded operations against fresh
// input values without mutating the graph, so replay is pure and safe to run
// concurrently from several threads.
class Graph {
 public:
  Graph(Var output, std::vector<Var> inputs);

  const Var& output() const { return output_; }
  std::size_t num_nodes() const { return order_.size(); }

  Tensor forward(std::span<const Tensor> inputs) const;
  Tensor forward(const Tensor& input) const;

 private:
  Var output_;
  std::vector<Var> inputs_;
  std::vector<detail::Node*> order_;  // topological, inputs before consumers
};

// Max over coordinates of |AD gradient - central difference| relative error,
// the gradient-verification oracle. `fn` must build a scalar graph from a
// leaf of the same shape as `point`.
double finite_diff_check(const std::function<Var(const Var&)>& fn, const Tensor& point, double h);

// Central-difference gradient of a plain scalar function; shared by tests.
Tensor central_diff(const std::function<double(const Tensor&)>& f, const Tensor& point, double h);

}  // namespace mlab::ad
