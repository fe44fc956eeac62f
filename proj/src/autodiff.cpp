#include "mlab/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

namespace mlab::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

using detail::Node;
using detail::NodePtr;

const char* kOpNames[] = {
    "leaf",   "const",    "add",      "sub",     "mul",     "div",       "neg",
    "scale",  "smul",     "matmul",   "reshape", "add_rowvec", "colsum", "rowsum",
    "tile_rows", "tile_cols", "sum",  "exp",     "log",     "softplus",  "sigmoid",
    "tanh",   "relu",     "heaviside", "rowlse", "pick",    "scatter",
};

double stable_softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C = A^ta * B^tb with effective shapes (m,k) x (k,n).
void matmul_kernel(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t n = tb ? b.rows() : b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  const std::size_t lda = a.cols(), ldb = b.cols();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * lda + p];
        if (av == 0.0) continue;
        const double* brow = pb + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = pa + i * lda;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = pb + j * ldb;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        crow[j] = s;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = pa + p * lda;
      const double* brow = pb + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        if (av == 0.0) continue;
        double* crow = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = pb + j * ldb;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += pa[p * lda + i] * brow[p];
        crow[j] = s;
      }
    }
  }
}

using GetValue = std::function<const Tensor&(const Node*)>;

Tensor eval_node(const Node& n, const GetValue& getv) {
  auto in = [&](std::size_t i) -> const Tensor& { return getv(n.inputs[i].get()); };
  switch (n.op) {
    case Op::Leaf:
    case Op::Const:
      return n.value;
    case Op::Add: {
      Tensor out = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
      return out;
    }
    case Op::Sub: {
      Tensor out = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
      return out;
    }
    case Op::Mul: {
      Tensor out = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
      return out;
    }
    case Op::Div: {
      Tensor out = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= b[i];
      return out;
    }
    case Op::Neg: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -out[i];
      return out;
    }
    case Op::Scale: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= n.scalar_attr;
      return out;
    }
    case Op::SMul: {
      const double s = in(0)[0];
      Tensor out = in(1);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
      return out;
    }
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = n.trans_a ? a.cols() : a.rows();
      const std::size_t cols = n.trans_b ? b.rows() : b.cols();
      Tensor out(Shape{m, cols});
      matmul_kernel(a, n.trans_a, b, n.trans_b, out);
      return out;
    }
    case Op::Reshape: {
      const Tensor& a = in(0);
      return Tensor::from(std::vector<double>(a.data(), a.data() + a.numel()), n.value.shape());
    }
    case Op::AddRowVec: {
      Tensor out = in(0);
      const Tensor& v = in(1);
      const std::size_t rows = out.rows(), cols = out.cols();
      for (std::size_t i = 0; i < rows; ++i) {
        double* row = out.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) row[j] += v[j];
      }
      return out;
    }
    case Op::ColSum: {
      const Tensor& m = in(0);
      Tensor out(Shape{m.cols()});
      for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* row = m.data() + i * m.cols();
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += row[j];
      }
      return out;
    }
    case Op::RowSum: {
      const Tensor& m = in(0);
      Tensor out(Shape{m.rows()});
      for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* row = m.data() + i * m.cols();
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += row[j];
        out[i] = s;
      }
      return out;
    }
    case Op::TileRows: {
      const Tensor& v = in(0);
      Tensor out(Shape{n.count_attr, v.numel()});
      for (std::size_t i = 0; i < n.count_attr; ++i)
        std::memcpy(out.data() + i * v.numel(), v.data(), v.numel() * sizeof(double));
      return out;
    }
    case Op::TileCols: {
      const Tensor& v = in(0);
      Tensor out(Shape{v.numel(), n.count_attr});
      for (std::size_t i = 0; i < v.numel(); ++i) {
        double* row = out.data() + i * n.count_attr;
        for (std::size_t j = 0; j < n.count_attr; ++j) row[j] = v[i];
      }
      return out;
    }
    case Op::Sum: {
      const Tensor& a = in(0);
      double s = 0.0, comp = 0.0;  // Kahan; sums feed tolerance-critical checks
      for (std::size_t i = 0; i < a.numel(); ++i) {
        const double y = a[i] - comp;
        const double t = s + y;
        comp = (t - s) - y;
        s = t;
      }
      return Tensor::scalar(s);
    }
    case Op::Exp: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
      return out;
    }
    case Op::Log: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
      return out;
    }
    case Op::Softplus: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stable_softplus(out[i]);
      return out;
    }
    case Op::Sigmoid: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
      return out;
    }
    case Op::Tanh: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
      return out;
    }
    case Op::Relu: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
      return out;
    }
    case Op::Heaviside: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? 1.0 : 0.0;
      return out;
    }
    case Op::RowLse: {
      const Tensor& z = in(0);
      const std::size_t rows = z.rows(), cols = z.cols();
      Tensor out(Shape{rows});
      for (std::size_t i = 0; i < rows; ++i) {
        const double* row = z.data() + i * cols;
        double m = row[0];
        for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - m);
        out[i] = m + std::log(s);
      }
      return out;
    }
    case Op::Pick: {
      const Tensor& z = in(0);
      Tensor out(Shape{z.rows()});
      for (std::size_t i = 0; i < z.rows(); ++i) out[i] = z.at2(i, static_cast<std::size_t>(n.index_attr[i]));
      return out;
    }
    case Op::Scatter: {
      const Tensor& v = in(0);
      Tensor out(Shape{v.numel(), n.count_attr});
      for (std::size_t i = 0; i < v.numel(); ++i)
        out.at2(i, static_cast<std::size_t>(n.index_attr[i])) = v[i];
      return out;
    }
  }
  throw std::logic_error("unhandled op");
}

NodePtr make_node(Op op, std::vector<NodePtr> inputs) {
  auto n = std::make_shared<Node>();
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->op = op;
  n->inputs = std::move(inputs);
  return n;
}

Var finish(NodePtr n) {
  GetValue getv = [](const Node* p) -> const Tensor& { return p->value; };
  n->value = eval_node(*n, getv);
  if (!n->value.all_finite()) {
    throw NumericError(std::string("non-finite values produced by op '") + op_name(n->op) + "'");
  }
  return Var(std::move(n));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_same_shape(const Var& a, const Var& b, const char* what) {
  require(a.shape() == b.shape(), std::string(what) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

const char* op_name(Op op) { return kOpNames[static_cast<std::size_t>(op)]; }

Var leaf(Tensor v) {
  if (!v.all_finite()) throw NumericError("leaf initialized with non-finite values");
  auto n = make_node(Op::Leaf, {});
  n->value = std::move(v);
  return Var(std::move(n));
}

Var constant(Tensor v) {
  if (!v.all_finite()) throw NumericError("constant initialized with non-finite values");
  auto n = make_node(Op::Const, {});
  n->value = std::move(v);
  return Var(std::move(n));
}

Var constant(double v) { return constant(Tensor::scalar(v)); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return finish(make_node(Op::Add, {a.node(), b.node()}));
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return finish(make_node(Op::Sub, {a.node(), b.node()}));
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return finish(make_node(Op::Mul, {a.node(), b.node()}));
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  return finish(make_node(Op::Div, {a.node(), b.node()}));
}

Var neg(const Var& a) { return finish(make_node(Op::Neg, {a.node()})); }

Var scale(const Var& a, double c) {
  auto n = make_node(Op::Scale, {a.node()});
  n->scalar_attr = c;
  return finish(std::move(n));
}

Var smul(const Var& scalar_node, const Var& t) {
  require(scalar_node.numel() == 1, "smul: first operand must be scalar");
  return finish(make_node(Op::SMul, {scalar_node.node(), t.node()}));
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: operands must be rank-2");
  const std::size_t ka = trans_a ? a.value().rows() : a.value().cols();
  const std::size_t kb = trans_b ? b.value().cols() : b.value().rows();
  require(ka == kb, "matmul: inner extents differ, " + shape_str(a.shape()) + (trans_a ? "^T" : "") +
                        " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
  auto n = make_node(Op::MatMul, {a.node(), b.node()});
  n->trans_a = trans_a;
  n->trans_b = trans_b;
  return finish(std::move(n));
}

Var reshape(const Var& a, Shape shape) {
  std::size_t ne = 1;
  for (std::size_t e : shape) ne *= e;
  require(ne == a.numel(), "reshape: element count mismatch");
  auto n = make_node(Op::Reshape, {a.node()});
  n->value = Tensor::zeros(shape);  // records the target shape for eval
  GetValue getv = [](const Node* p) -> const Tensor& { return p->value; };
  n->value = eval_node(*n, getv);
  return Var(std::move(n));
}

Var add_rowvec(const Var& m, const Var& v) {
  require(m.shape().size() == 2 && v.shape().size() == 1, "add_rowvec: want (n,k) and (k)");
  require(m.value().cols() == v.numel(), "add_rowvec: column count mismatch");
  return finish(make_node(Op::AddRowVec, {m.node(), v.node()}));
}

Var colsum(const Var& m) {
  require(m.shape().size() == 2, "colsum: want rank-2");
  return finish(make_node(Op::ColSum, {m.node()}));
}

Var rowsum(const Var& m) {
  require(m.shape().size() == 2, "rowsum: want rank-2");
  return finish(make_node(Op::RowSum, {m.node()}));
}

Var tile_rows(const Var& v, std::size_t n) {
  require(v.shape().size() == 1, "tile_rows: want rank-1");
  auto node = make_node(Op::TileRows, {v.node()});
  node->count_attr = n;
  return finish(std::move(node));
}

Var tile_cols(const Var& v, std::size_t c) {
  require(v.shape().size() == 1, "tile_cols: want rank-1");
  auto node = make_node(Op::TileCols, {v.node()});
  node->count_attr = c;
  return finish(std::move(node));
}

Var sum(const Var& a) { return finish(make_node(Op::Sum, {a.node()})); }

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Var exp(const Var& a) { return finish(make_node(Op::Exp, {a.node()})); }
Var log(const Var& a) { return finish(make_node(Op::Log, {a.node()})); }
Var softplus(const Var& a) { return finish(make_node(Op::Softplus, {a.node()})); }
Var sigmoid(const Var& a) { return finish(make_node(Op::Sigmoid, {a.node()})); }
Var tanh(const Var& a) { return finish(make_node(Op::Tanh, {a.node()})); }
Var relu(const Var& a) { return finish(make_node(Op::Relu, {a.node()})); }
Var heaviside(const Var& a) { return finish(make_node(Op::Heaviside, {a.node()})); }

Var rowlse(const Var& z) {
  require(z.shape().size() == 2, "rowlse: want rank-2");
  return finish(make_node(Op::RowLse, {z.node()}));
}

Var pick(const Var& z, const std::vector<std::int32_t>& cols) {
  require(z.shape().size() == 2, "pick: want rank-2");
  require(cols.size() == z.value().rows(), "pick: one column index per row required");
  for (std::int32_t c : cols) {
    if (c < 0 || static_cast<std::size_t>(c) >= z.value().cols())
      throw std::invalid_argument("pick: column index " + std::to_string(c) + " out of range");
  }
  auto n = make_node(Op::Pick, {z.node()});
  n->index_attr = cols;
  return finish(std::move(n));
}

Var scatter(const Var& v, const std::vector<std::int32_t>& cols, std::size_t num_cols) {
  require(v.shape().size() == 1, "scatter: want rank-1");
  require(cols.size() == v.numel(), "scatter: one column index per element required");
  for (std::int32_t c : cols) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_cols)
      throw std::invalid_argument("scatter: column index out of range");
  }
  auto n = make_node(Op::Scatter, {v.node()});
  n->index_attr = cols;
  n->count_attr = num_cols;
  return finish(std::move(n));
}

Var matvec(const Var& a, const Var& x) {
  require(a.shape().size() == 2 && x.shape().size() == 1, "matvec: want (m,k) and (k)");
  const std::size_t m = a.value().rows();
  return reshape(matmul(a, reshape(x, Shape{x.numel(), 1})), Shape{m});
}

Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

Var sumsq(const Var& a) { return sum(mul(a, a)); }

// --- backward ---------------------------------------------------------------

namespace {

// Topological order of the subgraph under `root` (inputs before consumers).
std::vector<NodePtr> topo_order(const NodePtr& root) {
  std::vector<NodePtr> order;
  std::unordered_set<Node*> done;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (done.count(n.get())) {
      stack.pop_back();
      continue;
    }
    if (next < n->inputs.size()) {
      const NodePtr& child = n->inputs[next];
      ++next;
      if (!done.count(child.get())) stack.emplace_back(child, 0);
    } else {
      done.insert(n.get());
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

struct AdjointMap {
  std::unordered_map<Node*, Var> adj;
  void accumulate(Node* n, const Var& contrib) {
    auto it = adj.find(n);
    if (it == adj.end()) {
      adj.emplace(n, contrib);
    } else {
      it->second = add(it->second, contrib);
    }
  }
};

// Wrap a raw node from the traversal back into a Var handle.
Var as_var(const NodePtr& p) { return Var(p); }

// Emit adjoint contributions of `n`'s inputs given its own adjoint g.
// All contributions are ordinary graph nodes, so the backward pass itself
// stays differentiable.
void backprop_node(const NodePtr& np, const Var& g, AdjointMap& adj,
                   const std::unordered_set<Node*>& needed) {
  Node* n = np.get();
  auto want = [&](std::size_t i) {
    Node* in = n->inputs[i].get();
    return in->op != Op::Const && needed.count(in) > 0;
  };
  auto give = [&](std::size_t i, const Var& v) { adj.accumulate(n->inputs[i].get(), v); };
  const Var self = as_var(np);
  switch (n->op) {
    case Op::Leaf:
    case Op::Const:
      return;
    case Op::Add:
      if (want(0)) give(0, g);
      if (want(1)) give(1, g);
      return;
    case Op::Sub:
      if (want(0)) give(0, g);
      if (want(1)) give(1, neg(g));
      return;
    case Op::Mul:
      if (want(0)) give(0, mul(g, as_var(n->inputs[1])));
      if (want(1)) give(1, mul(g, as_var(n->inputs[0])));
      return;
    case Op::Div: {
      const Var a = as_var(n->inputs[0]);
      const Var b = as_var(n->inputs[1]);
      if (want(0)) give(0, div(g, b));
      if (want(1)) give(1, neg(div(mul(g, a), mul(b, b))));
      return;
    }
    case Op::Neg:
      if (want(0)) give(0, neg(g));
      return;
    case Op::Scale:
      if (want(0)) give(0, scale(g, n->scalar_attr));
      return;
    case Op::SMul: {
      const Var s = as_var(n->inputs[0]);
      const Var t = as_var(n->inputs[1]);
      if (want(0)) give(0, reshape(sum(mul(g, t)), s.shape()));
      if (want(1)) give(1, smul(s, g));
      return;
    }
    case Op::MatMul: {
      const Var a = as_var(n->inputs[0]);
      const Var b = as_var(n->inputs[1]);
      const bool ta = n->trans_a, tb = n->trans_b;
      if (want(0)) give(0, ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb));
      if (want(1)) give(1, tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false));
      return;
    }
    case Op::Reshape:
      if (want(0)) give(0, reshape(g, n->inputs[0]->value.shape()));
      return;
    case Op::AddRowVec:
      if (want(0)) give(0, g);
      if (want(1)) give(1, colsum(g));
      return;
    case Op::ColSum:
      if (want(0)) give(0, tile_rows(g, n->inputs[0]->value.rows()));
      return;
    case Op::RowSum:
      if (want(0)) give(0, tile_cols(g, n->inputs[0]->value.cols()));
      return;
    case Op::TileRows:
      if (want(0)) give(0, colsum(g));
      return;
    case Op::TileCols:
      if (want(0)) give(0, rowsum(g));
      return;
    case Op::Sum:
      if (want(0))
        give(0, smul(g, constant(Tensor::full(n->inputs[0]->value.shape(), 1.0))));
      return;
    case Op::Exp:
      if (want(0)) give(0, mul(g, self));
      return;
    case Op::Log:
      if (want(0)) give(0, div(g, as_var(n->inputs[0])));
      return;
    case Op::Softplus:
      if (want(0)) give(0, mul(g, sigmoid(as_var(n->inputs[0]))));
      return;
    case Op::Sigmoid: {
      if (want(0)) {
        const Var ones = constant(Tensor::full(n->value.shape(), 1.0));
        give(0, mul(g, mul(self, sub(ones, self))));
      }
      return;
    }
    case Op::Tanh: {
      if (want(0)) {
        const Var ones = constant(Tensor::full(n->value.shape(), 1.0));
        give(0, mul(g, sub(ones, mul(self, self))));
      }
      return;
    }
    case Op::Relu:
      if (want(0)) give(0, mul(g, heaviside(as_var(n->inputs[0]))));
      return;
    case Op::Heaviside:
      // Derivative is zero almost everywhere; contributes nothing.
      return;
    case Op::RowLse: {
      if (want(0)) {
        const Var z = as_var(n->inputs[0]);
        const std::size_t c = n->inputs[0]->value.cols();
        const Var softmax = exp(sub(z, tile_cols(self, c)));
        give(0, mul(tile_cols(g, c), softmax));
      }
      return;
    }
    case Op::Pick:
      if (want(0)) give(0, scatter(g, n->index_attr, n->inputs[0]->value.cols()));
      return;
    case Op::Scatter:
      if (want(0)) give(0, pick(g, n->index_attr));
      return;
  }
}

}  // namespace

std::vector<Var> gradients(const Var& out, std::span<const Var> wrts, bool allow_unused) {
  if (!out.valid()) throw std::invalid_argument("gradients: invalid output");
  if (out.numel() != 1)
    throw ShapeError("gradients: output must be scalar, got shape " + shape_str(out.shape()));

  const std::vector<NodePtr> order = topo_order(out.node());

  // A node needs an adjoint only if some requested target is reachable from it
  // through its inputs; this prunes work the caller did not ask for.
  std::unordered_set<Node*> targets;
  for (const Var& w : wrts) targets.insert(w.node().get());
  std::unordered_set<Node*> needed;
  for (const NodePtr& n : order) {
    bool need = targets.count(n.get()) > 0;
    if (!need) {
      for (const auto& in : n->inputs) {
        if (needed.count(in.get())) {
          need = true;
          break;
        }
      }
    }
    if (need) needed.insert(n.get());
  }

  AdjointMap adj;
  adj.adj.emplace(out.node().get(), constant(Tensor::full(out.shape(), 1.0)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& n = *it;
    auto found = adj.adj.find(n.get());
    if (found == adj.adj.end()) continue;
    backprop_node(n, found->second, adj, needed);
  }

  std::vector<Var> result;
  result.reserve(wrts.size());
  for (const Var& w : wrts) {
    auto it = adj.adj.find(w.node().get());
    if (it != adj.adj.end()) {
      result.push_back(it->second);
    } else if (allow_unused) {
      result.push_back(constant(Tensor::zeros(w.shape())));
    } else {
      throw std::invalid_argument("gradients: target is not connected to the output");
    }
  }
  return result;
}

Var grad(const Var& out, const Var& wrt) {
  const Var w[] = {wrt};
  return gradients(out, w, /*allow_unused=*/false)[0];
}

// --- replay -----------------------------------------------------------------

Graph::Graph(Var output, std::vector<Var> inputs)
    : output_(std::move(output)), inputs_(std::move(inputs)) {
  if (!output_.valid()) throw std::invalid_argument("Graph: invalid output");
  for (const Var& v : inputs_) {
    if (!v.valid() || !v.is_leaf()) throw std::invalid_argument("Graph: inputs must be leaves");
  }
  for (const NodePtr& n : topo_order(output_.node())) order_.push_back(n.get());
}

Tensor Graph::forward(std::span<const Tensor> inputs) const {
  if (inputs.size() != inputs_.size())
    throw std::invalid_argument("Graph::forward: expected " + std::to_string(inputs_.size()) +
                                " inputs, got " + std::to_string(inputs.size()));
  std::unordered_map<const Node*, Tensor> vals;
  vals.reserve(order_.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != inputs_[i].shape())
      throw ShapeError("Graph::forward: input " + std::to_string(i) + " has shape " +
                       shape_str(inputs[i].shape()) + ", want " + shape_str(inputs_[i].shape()));
    vals.emplace(inputs_[i].node().get(), inputs[i]);
  }
  GetValue getv = [&vals](const Node* p) -> const Tensor& {
    auto it = vals.find(p);
    return it != vals.end() ? it->second : p->value;
  };
  for (Node* n : order_) {
    if (n->op == Op::Leaf || n->op == Op::Const) continue;
    Tensor v = eval_node(*n, getv);
    if (!v.all_finite())
      throw NumericError(std::string("non-finite values produced by op '") + op_name(n->op) +
                         "' during replay");
    vals.insert_or_assign(n, std::move(v));
  }
  return getv(output_.node().get());
}

Tensor Graph::forward(const Tensor& input) const {
  return forward(std::span<const Tensor>(&input, 1));
}

// --- finite differences -----------------------------------------------------

Tensor central_diff(const std::function<double(const Tensor&)>& f, const Tensor& point, double h) {
  if (h <= 0.0) throw std::invalid_argument("central_diff: h must be positive");
  Tensor g(point.shape());
  Tensor x = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("central_diff: function returned non-finite value");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double finite_diff_check(const std::function<Var(const Var&)>& fn, const Tensor& point, double h) {
  const Var x = leaf(point);
  const Var y = fn(x);
  if (y.numel() != 1) throw ShapeError("finite_diff_check: fn must build a scalar");
  const Tensor ad = grad(y, x).value();
  const Tensor fd = central_diff(
      [&fn](const Tensor& p) { return fn(leaf(p)).value().scalar_value(); }, point, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double rel = std::fabs(ad[i] - fd[i]) / (std::fabs(fd[i]) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace mlab::ad
