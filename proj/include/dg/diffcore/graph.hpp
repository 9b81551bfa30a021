#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dg/diffcore/tensor.hpp"

namespace dg::diff {

// Errors carry the offending node's identity so a blown-up value inside a
// 50-step unrolled planner can be traced to its source.
struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : GraphError {
  using GraphError::GraphError;
};
struct DomainError : GraphError {
  using GraphError::GraphError;
};
struct NonFiniteError : GraphError {
  using GraphError::GraphError;
};

enum class Op : uint8_t {
  kLeaf,
  kAdd,        // broadcasting elementwise add
  kMul,        // broadcasting elementwise multiply
  kAddScalar,  // x + c
  kScale,      // c * x
  kMatMul,     // 2D x 2D, or batched 3D x 3D
  kPower,      // x^p, requires x > 0
  kExp,
  kLog,  // requires x > 0
  kSigmoid,
  kTanh,
  kSoftmax,  // over last axis
  kConcat,   // along a given axis
  kIndexSelect,
  kReshape,
  kReduceSum,      // to scalar
  kReduceSumLast,  // over last axis
  kReduceMean,
  kReduceMeanLast,
  kReduceMax,  // over last axis; subgradient through the argmax branch
  kStopGradient,
};

const char* op_name(Op op);

// Reverse-mode differentiable computation graph over dense tensors.
//
// Nodes are appended in construction order, which is a topological order by
// definition: an operation can only reference ids that already exist. Forward
// values are computed eagerly at construction and can be refreshed with
// recompute() after rebinding leaves; backward() accumulates gradients in
// reverse construction order without mutating the graph.
//
// A Graph and its evaluation state are confined to one thread at a time.
// There is no shared global state, so distinct graphs may run concurrently.
class Graph {
 public:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;  // same shape as value once backward() has run
    bool trainable = false;
    double attr = 0.0;           // exponent / scalar addend / scale factor
    int axis = -1;               // concat, index_select
    std::vector<int> indices;    // index_select
    std::string name;            // leaves, for error provenance
  };

  // --- leaves -------------------------------------------------------------

  int leaf(Tensor t, bool trainable = false, std::string name = "");
  int constant(Tensor t, std::string name = "") {
    return leaf(std::move(t), false, std::move(name));
  }
  int scalar(double v) { return leaf(Tensor::scalar(v)); }

  // Rebind a leaf's value. Downstream values are stale until recompute().
  void bind(int id, Tensor t);

  // --- primitives -----------------------------------------------------------

  int add(int a, int b);
  int mul(int a, int b);
  int add_scalar(int a, double c);
  int scale(int a, double c);
  int sub(int a, int b) { return add(a, scale(b, -1.0)); }
  int matmul(int a, int b);
  int power(int a, double p);
  int exp(int a);
  int log(int a);
  int sigmoid(int a);
  int tanh(int a);
  int softmax(int a);  // last axis
  int concat(const std::vector<int>& xs, int axis);
  int index_select(int a, int axis, std::vector<int> indices);
  int reshape(int a, std::vector<int> target);
  int reduce_sum(int a);
  int reduce_sum_last(int a);
  int reduce_mean(int a);
  int reduce_mean_last(int a);
  int reduce_max_last(int a);
  int stop_gradient(int a);

  // --- evaluation -----------------------------------------------------------

  // Deterministic forward value of a node; recompute() first if leaves were
  // rebound since construction.
  const Tensor& value(int id) const { return node(id).value; }

  // Recompute every node's value from current leaf bindings, in order.
  void recompute();

  // Reverse accumulation from a scalar-valued root. Gradients of nodes not on
  // a path to the root are zero.
  void backward(int root);

  const Tensor& grad(int id) const;

  // Gradient of a scalar root with respect to the requested leaves.
  std::map<int, Tensor> gradient(int root, const std::vector<int>& wrt);

  // Compares backward() gradients against central finite differences for each
  // component of each listed leaf. Returns the worst relative error, with
  // denominator max(|analytic|, |numeric|, 1e-8). Leaves are restored and the
  // graph recomputed before returning.
  double check_gradient(int root, const std::vector<int>& wrt, double step);

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int id) const;
  bool is_leaf(int id) const { return node(id).op == Op::kLeaf; }

 private:
  Node& node_mut(int id);
  int push(Node n);
  void compute(int id);
  void backprop(int id);
  void check_finite(int id) const;
  [[noreturn]] void fail_shape(int id, const std::string& what) const;
  std::string describe(int id) const;

  std::vector<Node> nodes_;
};

}  // namespace dg::diff
