#include "dg/diffcore/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dg::diff {

namespace {

// Pads a shape to rank 3 with leading ones so every elementwise loop below
// can use the same three nested loops.
struct Dims3 {
  int d0 = 1, d1 = 1, d2 = 1;
};

Dims3 pad3(const std::vector<int>& s) {
  Dims3 d;
  int r = static_cast<int>(s.size());
  if (r > 3) throw ShapeError("rank > 3 unsupported");
  if (r >= 1) d.d2 = s[r - 1];
  if (r >= 2) d.d1 = s[r - 2];
  if (r >= 3) d.d0 = s[r - 3];
  return d;
}

// Row-major strides with zeros on broadcast axes.
struct Strides3 {
  size_t s0 = 0, s1 = 0, s2 = 0;
};

Strides3 strides_for(const Dims3& own, const Dims3& out) {
  Strides3 st;
  st.s2 = (own.d2 == out.d2) ? 1 : 0;
  st.s1 = (own.d1 == out.d1) ? static_cast<size_t>(own.d2) : 0;
  st.s0 = (own.d0 == out.d0) ? static_cast<size_t>(own.d1) * own.d2 : 0;
  return st;
}

bool broadcast_compatible(const Dims3& a, const Dims3& b, Dims3& out) {
  auto merge = [](int x, int y, int& o) {
    if (x == y) { o = x; return true; }
    if (x == 1) { o = y; return true; }
    if (y == 1) { o = x; return true; }
    return false;
  };
  return merge(a.d0, b.d0, out.d0) && merge(a.d1, b.d1, out.d1) &&
         merge(a.d2, b.d2, out.d2);
}

std::vector<int> unpad_shape(const Dims3& d, int rank) {
  std::vector<int> s;
  if (rank >= 3) s.push_back(d.d0);
  if (rank >= 2) s.push_back(d.d1);
  if (rank >= 1) s.push_back(d.d2);
  return s;
}

// out[i] = f(a[map(i)], b[map(i)]) over the broadcast shape.
template <typename F>
void broadcast_apply(const Tensor& a, const Tensor& b, Tensor& out, F&& f) {
  Dims3 da = pad3(a.shape), db = pad3(b.shape), dout = pad3(out.shape);
  Strides3 sa = strides_for(da, dout), sb = strides_for(db, dout);
  size_t o = 0;
  for (int i = 0; i < dout.d0; ++i)
    for (int j = 0; j < dout.d1; ++j)
      for (int k = 0; k < dout.d2; ++k)
        out.v[o++] = f(a.v[i * sa.s0 + j * sa.s1 + k * sa.s2],
                       b.v[i * sb.s0 + j * sb.s1 + k * sb.s2]);
}

// Accumulates `src` (broadcast output shape) into `dst` (operand shape),
// summing over axes the operand was broadcast along.
void reduce_into(const Tensor& src, Tensor& dst) {
  Dims3 dd = pad3(dst.shape), ds = pad3(src.shape);
  Strides3 st = strides_for(dd, ds);
  size_t o = 0;
  for (int i = 0; i < ds.d0; ++i)
    for (int j = 0; j < ds.d1; ++j)
      for (int k = 0; k < ds.d2; ++k)
        dst.v[i * st.s0 + j * st.s1 + k * st.s2] += src.v[o++];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kAddScalar: return "add_scalar";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kPower: return "power";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftmax: return "softmax";
    case Op::kConcat: return "concat";
    case Op::kIndexSelect: return "index_select";
    case Op::kReshape: return "reshape";
    case Op::kReduceSum: return "reduce_sum";
    case Op::kReduceSumLast: return "reduce_sum_last";
    case Op::kReduceMean: return "reduce_mean";
    case Op::kReduceMeanLast: return "reduce_mean_last";
    case Op::kReduceMax: return "reduce_max";
    case Op::kStopGradient: return "stop_gradient";
  }
  return "?";
}

const Graph::Node& Graph::node(int id) const {
  if (id < 0 || id >= size()) throw GraphError("node id out of range");
  return nodes_[static_cast<size_t>(id)];
}

Graph::Node& Graph::node_mut(int id) {
  if (id < 0 || id >= size()) throw GraphError("node id out of range");
  return nodes_[static_cast<size_t>(id)];
}

std::string Graph::describe(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  std::string s = "node #" + std::to_string(id) + " (" + op_name(n.op) + ")";
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s;
}

void Graph::fail_shape(int id, const std::string& what) const {
  throw ShapeError(describe(id) + ": " + what);
}

void Graph::check_finite(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.value.all_finite())
    throw NonFiniteError("non-finite value at " + describe(id));
}

int Graph::push(Node n) {
  for (int in : n.inputs)
    if (in < 0 || in >= size())
      throw GraphError("operand id out of range for new node");
  nodes_.push_back(std::move(n));
  int id = size() - 1;
  compute(id);
  check_finite(id);
  return id;
}

int Graph::leaf(Tensor t, bool trainable, std::string name) {
  Node n;
  n.op = Op::kLeaf;
  n.trainable = trainable;
  n.name = std::move(name);
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  int id = size() - 1;
  check_finite(id);
  return id;
}

void Graph::bind(int id, Tensor t) {
  Node& n = node_mut(id);
  if (n.op != Op::kLeaf) throw GraphError(describe(id) + ": bind on non-leaf");
  if (t.shape != n.value.shape)
    fail_shape(id, "bind changes shape " + shape_str(n.value.shape) + " -> " +
                       shape_str(t.shape));
  if (!t.all_finite())
    throw NonFiniteError("non-finite value bound to " + describe(id));
  n.value = std::move(t);
}

// --- builders ---------------------------------------------------------------

int Graph::add(int a, int b) {
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a, b};
  return push(std::move(n));
}

int Graph::mul(int a, int b) {
  Node n;
  n.op = Op::kMul;
  n.inputs = {a, b};
  return push(std::move(n));
}

int Graph::add_scalar(int a, double c) {
  Node n;
  n.op = Op::kAddScalar;
  n.inputs = {a};
  n.attr = c;
  return push(std::move(n));
}

int Graph::scale(int a, double c) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {a};
  n.attr = c;
  return push(std::move(n));
}

int Graph::matmul(int a, int b) {
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a, b};
  return push(std::move(n));
}

int Graph::power(int a, double p) {
  Node n;
  n.op = Op::kPower;
  n.inputs = {a};
  n.attr = p;
  return push(std::move(n));
}

int Graph::exp(int a) {
  Node n;
  n.op = Op::kExp;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::log(int a) {
  Node n;
  n.op = Op::kLog;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::sigmoid(int a) {
  Node n;
  n.op = Op::kSigmoid;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::tanh(int a) {
  Node n;
  n.op = Op::kTanh;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::softmax(int a) {
  Node n;
  n.op = Op::kSoftmax;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::concat(const std::vector<int>& xs, int axis) {
  if (xs.empty()) throw GraphError("concat of zero tensors");
  Node n;
  n.op = Op::kConcat;
  n.inputs = xs;
  n.axis = axis;
  return push(std::move(n));
}

int Graph::index_select(int a, int axis, std::vector<int> indices) {
  Node n;
  n.op = Op::kIndexSelect;
  n.inputs = {a};
  n.axis = axis;
  n.indices = std::move(indices);
  return push(std::move(n));
}

int Graph::reshape(int a, std::vector<int> target) {
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a};
  n.indices = std::move(target);  // reuse the index buffer for the shape
  return push(std::move(n));
}

int Graph::reduce_sum(int a) {
  Node n;
  n.op = Op::kReduceSum;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::reduce_sum_last(int a) {
  Node n;
  n.op = Op::kReduceSumLast;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::reduce_mean(int a) {
  Node n;
  n.op = Op::kReduceMean;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::reduce_mean_last(int a) {
  Node n;
  n.op = Op::kReduceMeanLast;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::reduce_max_last(int a) {
  Node n;
  n.op = Op::kReduceMax;
  n.inputs = {a};
  return push(std::move(n));
}

int Graph::stop_gradient(int a) {
  Node n;
  n.op = Op::kStopGradient;
  n.inputs = {a};
  return push(std::move(n));
}

// --- forward ----------------------------------------------------------------

void Graph::compute(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  auto in = [&](int i) -> const Tensor& {
    return nodes_[static_cast<size_t>(n.inputs[static_cast<size_t>(i)])].value;
  };

  switch (n.op) {
    case Op::kLeaf:
      return;

    case Op::kAdd:
    case Op::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() != b.rank())
        fail_shape(id, "rank mismatch " + shape_str(a.shape) + " vs " +
                           shape_str(b.shape));
      Dims3 da = pad3(a.shape), db = pad3(b.shape), dout;
      if (!broadcast_compatible(da, db, dout))
        fail_shape(id, "incompatible shapes " + shape_str(a.shape) + " vs " +
                           shape_str(b.shape));
      n.value = Tensor::zeros(unpad_shape(dout, a.rank()));
      if (n.op == Op::kAdd)
        broadcast_apply(a, b, n.value, [](double x, double y) { return x + y; });
      else
        broadcast_apply(a, b, n.value, [](double x, double y) { return x * y; });
      return;
    }

    case Op::kAddScalar: {
      const Tensor& a = in(0);
      n.value = a;
      for (double& x : n.value.v) x += n.attr;
      return;
    }

    case Op::kScale: {
      const Tensor& a = in(0);
      n.value = a;
      for (double& x : n.value.v) x *= n.attr;
      return;
    }

    case Op::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() == 2 && b.rank() == 2) {
        int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], p = b.shape[1];
        if (k != k2)
          fail_shape(id, "inner extents " + shape_str(a.shape) + " x " +
                             shape_str(b.shape));
        n.value = Tensor::zeros({m, p});
        for (int i = 0; i < m; ++i) {
          const double* arow = &a.v[static_cast<size_t>(i) * k];
          double* crow = &n.value.v[static_cast<size_t>(i) * p];
          for (int kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = &b.v[static_cast<size_t>(kk) * p];
            for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
          }
        }
        return;
      }
      if (a.rank() == 3 && b.rank() == 3) {
        int B = a.shape[0], m = a.shape[1], k = a.shape[2];
        if (b.shape[0] != B || b.shape[1] != k)
          fail_shape(id, "batched extents " + shape_str(a.shape) + " x " +
                             shape_str(b.shape));
        int p = b.shape[2];
        n.value = Tensor::zeros({B, m, p});
        for (int bb = 0; bb < B; ++bb) {
          const double* ab = &a.v[static_cast<size_t>(bb) * m * k];
          const double* bbp = &b.v[static_cast<size_t>(bb) * k * p];
          double* cb = &n.value.v[static_cast<size_t>(bb) * m * p];
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double av = ab[static_cast<size_t>(i) * k + kk];
              if (av == 0.0) continue;
              const double* brow = &bbp[static_cast<size_t>(kk) * p];
              double* crow = &cb[static_cast<size_t>(i) * p];
              for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
        return;
      }
      fail_shape(id, "matmul needs 2D x 2D or 3D x 3D, got " +
                         shape_str(a.shape) + " x " + shape_str(b.shape));
    }

    case Op::kPower: {
      const Tensor& a = in(0);
      n.value = a;
      for (double& x : n.value.v) {
        if (x <= 0.0)
          throw DomainError(describe(id) +
                            ": power base must be positive, got " +
                            std::to_string(x));
        x = std::pow(x, n.attr);
      }
      return;
    }

    case Op::kExp: {
      n.value = in(0);
      for (double& x : n.value.v) x = std::exp(x);
      return;
    }

    case Op::kLog: {
      n.value = in(0);
      for (double& x : n.value.v) {
        if (x <= 0.0)
          throw DomainError(describe(id) + ": log of non-positive value " +
                            std::to_string(x));
        x = std::log(x);
      }
      return;
    }

    case Op::kSigmoid: {
      n.value = in(0);
      for (double& x : n.value.v)
        x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                     : std::exp(x) / (1.0 + std::exp(x));
      return;
    }

    case Op::kTanh: {
      n.value = in(0);
      for (double& x : n.value.v) x = std::tanh(x);
      return;
    }

    case Op::kSoftmax: {
      const Tensor& a = in(0);
      if (a.rank() < 1 || a.shape.back() < 1) fail_shape(id, "empty softmax axis");
      n.value = a;
      int cols = a.shape.back();
      size_t rows = a.numel() / static_cast<size_t>(cols);
      for (size_t r = 0; r < rows; ++r) {
        double* x = &n.value.v[r * static_cast<size_t>(cols)];
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
          x[j] = std::exp(x[j] - mx);
          sum += x[j];
        }
        for (int j = 0; j < cols; ++j) x[j] /= sum;
      }
      return;
    }

    case Op::kConcat: {
      int axis = n.axis;
      const Tensor& first = in(0);
      if (axis < 0 || axis >= first.rank()) fail_shape(id, "bad concat axis");
      std::vector<int> out_shape = first.shape;
      for (size_t i = 1; i < n.inputs.size(); ++i) {
        const Tensor& t = in(static_cast<int>(i));
        if (t.rank() != first.rank()) fail_shape(id, "concat rank mismatch");
        for (int ax = 0; ax < first.rank(); ++ax)
          if (ax != axis && t.shape[static_cast<size_t>(ax)] !=
                                first.shape[static_cast<size_t>(ax)])
            fail_shape(id, "concat extent mismatch off-axis");
        out_shape[static_cast<size_t>(axis)] += t.shape[static_cast<size_t>(axis)];
      }
      n.value = Tensor::zeros(out_shape);
      // outer = product of extents before axis, inner = product after.
      size_t outer = 1, inner = 1;
      for (int ax = 0; ax < axis; ++ax) outer *= first.shape[static_cast<size_t>(ax)];
      for (int ax = axis + 1; ax < first.rank(); ++ax)
        inner *= first.shape[static_cast<size_t>(ax)];
      size_t out_axis = static_cast<size_t>(out_shape[static_cast<size_t>(axis)]);
      size_t offset = 0;
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& t = in(static_cast<int>(i));
        size_t t_axis = static_cast<size_t>(t.shape[static_cast<size_t>(axis)]);
        for (size_t o = 0; o < outer; ++o)
          std::memcpy(&n.value.v[(o * out_axis + offset) * inner],
                      &t.v[o * t_axis * inner],
                      t_axis * inner * sizeof(double));
        offset += t_axis;
      }
      return;
    }

    case Op::kIndexSelect: {
      const Tensor& a = in(0);
      int axis = n.axis;
      if (axis < 0 || axis >= a.rank()) fail_shape(id, "bad index_select axis");
      int axis_extent = a.shape[static_cast<size_t>(axis)];
      for (int idx : n.indices)
        if (idx < 0 || idx >= axis_extent)
          throw DomainError(describe(id) + ": index " + std::to_string(idx) +
                            " out of range for extent " +
                            std::to_string(axis_extent));
      std::vector<int> out_shape = a.shape;
      out_shape[static_cast<size_t>(axis)] = static_cast<int>(n.indices.size());
      n.value = Tensor::zeros(out_shape);
      size_t outer = 1, inner = 1;
      for (int ax = 0; ax < axis; ++ax) outer *= a.shape[static_cast<size_t>(ax)];
      for (int ax = axis + 1; ax < a.rank(); ++ax)
        inner *= a.shape[static_cast<size_t>(ax)];
      size_t k = n.indices.size();
      for (size_t o = 0; o < outer; ++o)
        for (size_t j = 0; j < k; ++j)
          std::memcpy(
              &n.value.v[(o * k + j) * inner],
              &a.v[(o * static_cast<size_t>(axis_extent) +
                    static_cast<size_t>(n.indices[j])) * inner],
              inner * sizeof(double));
      return;
    }

    case Op::kReshape: {
      const Tensor& a = in(0);
      std::vector<int> target = n.indices;
      if (Tensor::numel_of(target) != a.numel())
        fail_shape(id, "reshape numel mismatch " + shape_str(a.shape) +
                           " -> " + shape_str(target));
      n.value = Tensor(target, a.v);
      return;
    }

    case Op::kReduceSum:
    case Op::kReduceMean: {
      const Tensor& a = in(0);
      if (a.numel() == 0) fail_shape(id, "reduce over empty tensor");
      double s = 0.0;
      for (double x : a.v) s += x;
      if (n.op == Op::kReduceMean) s /= static_cast<double>(a.numel());
      n.value = Tensor::scalar(s);
      return;
    }

    case Op::kReduceSumLast:
    case Op::kReduceMeanLast: {
      const Tensor& a = in(0);
      if (a.rank() < 2) fail_shape(id, "reduce_last needs rank >= 2");
      int cols = a.shape.back();
      if (cols == 0) fail_shape(id, "reduce over empty axis");
      std::vector<int> out_shape(a.shape.begin(), a.shape.end() - 1);
      n.value = Tensor::zeros(out_shape);
      size_t rows = n.value.numel();
      for (size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* x = &a.v[r * static_cast<size_t>(cols)];
        for (int j = 0; j < cols; ++j) s += x[j];
        if (n.op == Op::kReduceMeanLast) s /= cols;
        n.value.v[r] = s;
      }
      return;
    }

    case Op::kReduceMax: {
      const Tensor& a = in(0);
      if (a.rank() < 2) fail_shape(id, "reduce_max needs rank >= 2");
      int cols = a.shape.back();
      if (cols == 0) fail_shape(id, "reduce over empty axis");
      std::vector<int> out_shape(a.shape.begin(), a.shape.end() - 1);
      n.value = Tensor::zeros(out_shape);
      size_t rows = n.value.numel();
      for (size_t r = 0; r < rows; ++r) {
        const double* x = &a.v[r * static_cast<size_t>(cols)];
        double mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        n.value.v[r] = mx;
      }
      return;
    }

    case Op::kStopGradient:
      n.value = in(0);
      return;
  }
  throw GraphError("unhandled op");
}

void Graph::recompute() {
  for (int id = 0; id < size(); ++id) {
    if (nodes_[static_cast<size_t>(id)].op == Op::kLeaf) continue;
    compute(id);
    check_finite(id);
  }
}

// --- backward ---------------------------------------------------------------

void Graph::backward(int root) {
  const Node& r = node(root);
  if (r.value.numel() != 1)
    throw GraphError(describe(root) + ": backward requires a scalar root");
  for (Node& n : nodes_) n.grad = Tensor();
  node_mut(root).grad = Tensor::full(r.value.shape, 1.0);
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0 || n.op == Op::kLeaf || n.op == Op::kStopGradient)
      continue;
    backprop(id);
  }
  // Zero-fill gradients of nodes the root does not depend on, so callers read
  // zeros rather than empty tensors.
  for (Node& n : nodes_)
    if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape);
}

void Graph::backprop(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  auto input = [&](int i) -> Node& {
    return nodes_[static_cast<size_t>(n.inputs[static_cast<size_t>(i)])];
  };
  auto ensure_grad = [](Node& m) {
    if (m.grad.numel() == 0) m.grad = Tensor::zeros(m.value.shape);
  };
  const Tensor& g = n.grad;

  switch (n.op) {
    case Op::kLeaf:
    case Op::kStopGradient:
      return;

    case Op::kAdd: {
      for (int i = 0; i < 2; ++i) {
        Node& a = input(i);
        ensure_grad(a);
        reduce_into(g, a.grad);
      }
      return;
    }

    case Op::kMul: {
      Node& a = input(0);
      Node& b = input(1);
      ensure_grad(a);
      ensure_grad(b);
      Tensor tmp = Tensor::zeros(g.shape);
      broadcast_apply(g, b.value, tmp, [](double x, double y) { return x * y; });
      reduce_into(tmp, a.grad);
      broadcast_apply(g, a.value, tmp, [](double x, double y) { return x * y; });
      reduce_into(tmp, b.grad);
      return;
    }

    case Op::kAddScalar: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i) a.grad.v[i] += g.v[i];
      return;
    }

    case Op::kScale: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i) a.grad.v[i] += n.attr * g.v[i];
      return;
    }

    case Op::kMatMul: {
      Node& a = input(0);
      Node& b = input(1);
      ensure_grad(a);
      ensure_grad(b);
      const Tensor& av = a.value;
      const Tensor& bv = b.value;
      if (av.rank() == 2) {
        int m = av.shape[0], k = av.shape[1], p = bv.shape[1];
        // dA += dC * B^T ; dB += A^T * dC
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < p; ++j) {
            double gij = g.v[static_cast<size_t>(i) * p + j];
            if (gij == 0.0) continue;
            for (int kk = 0; kk < k; ++kk) {
              a.grad.v[static_cast<size_t>(i) * k + kk] +=
                  gij * bv.v[static_cast<size_t>(kk) * p + j];
              b.grad.v[static_cast<size_t>(kk) * p + j] +=
                  gij * av.v[static_cast<size_t>(i) * k + kk];
            }
          }
      } else {
        int B = av.shape[0], m = av.shape[1], k = av.shape[2], p = bv.shape[2];
        for (int bb = 0; bb < B; ++bb) {
          size_t ao = static_cast<size_t>(bb) * m * k;
          size_t bo = static_cast<size_t>(bb) * k * p;
          size_t co = static_cast<size_t>(bb) * m * p;
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < p; ++j) {
              double gij = g.v[co + static_cast<size_t>(i) * p + j];
              if (gij == 0.0) continue;
              for (int kk = 0; kk < k; ++kk) {
                a.grad.v[ao + static_cast<size_t>(i) * k + kk] +=
                    gij * bv.v[bo + static_cast<size_t>(kk) * p + j];
                b.grad.v[bo + static_cast<size_t>(kk) * p + j] +=
                    gij * av.v[ao + static_cast<size_t>(i) * k + kk];
              }
            }
        }
      }
      return;
    }

    case Op::kPower: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i)
        a.grad.v[i] += g.v[i] * n.attr * std::pow(a.value.v[i], n.attr - 1.0);
      return;
    }

    case Op::kExp: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i)
        a.grad.v[i] += g.v[i] * n.value.v[i];
      return;
    }

    case Op::kLog: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i)
        a.grad.v[i] += g.v[i] / a.value.v[i];
      return;
    }

    case Op::kSigmoid: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i) {
        double y = n.value.v[i];
        a.grad.v[i] += g.v[i] * y * (1.0 - y);
      }
      return;
    }

    case Op::kTanh: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i) {
        double y = n.value.v[i];
        a.grad.v[i] += g.v[i] * (1.0 - y * y);
      }
      return;
    }

    case Op::kSoftmax: {
      Node& a = input(0);
      ensure_grad(a);
      int cols = n.value.shape.back();
      size_t rows = n.value.numel() / static_cast<size_t>(cols);
      for (size_t r = 0; r < rows; ++r) {
        const double* y = &n.value.v[r * static_cast<size_t>(cols)];
        const double* gy = &g.v[r * static_cast<size_t>(cols)];
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
        double* ga = &a.grad.v[r * static_cast<size_t>(cols)];
        for (int j = 0; j < cols; ++j) ga[j] += (gy[j] - dot) * y[j];
      }
      return;
    }

    case Op::kConcat: {
      int axis = n.axis;
      const Tensor& first = input(0).value;
      size_t outer = 1, inner = 1;
      for (int ax = 0; ax < axis; ++ax) outer *= first.shape[static_cast<size_t>(ax)];
      for (int ax = axis + 1; ax < first.rank(); ++ax)
        inner *= first.shape[static_cast<size_t>(ax)];
      size_t out_axis =
          static_cast<size_t>(n.value.shape[static_cast<size_t>(axis)]);
      size_t offset = 0;
      for (size_t i = 0; i < n.inputs.size(); ++i) {
        Node& a = input(static_cast<int>(i));
        ensure_grad(a);
        size_t t_axis =
            static_cast<size_t>(a.value.shape[static_cast<size_t>(axis)]);
        for (size_t o = 0; o < outer; ++o) {
          const double* src = &g.v[(o * out_axis + offset) * inner];
          double* dst = &a.grad.v[o * t_axis * inner];
          for (size_t x = 0; x < t_axis * inner; ++x) dst[x] += src[x];
        }
        offset += t_axis;
      }
      return;
    }

    case Op::kIndexSelect: {
      Node& a = input(0);
      ensure_grad(a);
      int axis = n.axis;
      int axis_extent = a.value.shape[static_cast<size_t>(axis)];
      size_t outer = 1, inner = 1;
      for (int ax = 0; ax < axis; ++ax)
        outer *= a.value.shape[static_cast<size_t>(ax)];
      for (int ax = axis + 1; ax < a.value.rank(); ++ax)
        inner *= a.value.shape[static_cast<size_t>(ax)];
      size_t k = n.indices.size();
      for (size_t o = 0; o < outer; ++o)
        for (size_t j = 0; j < k; ++j) {
          const double* src = &g.v[(o * k + j) * inner];
          double* dst = &a.grad.v[(o * static_cast<size_t>(axis_extent) +
                                   static_cast<size_t>(n.indices[j])) * inner];
          for (size_t x = 0; x < inner; ++x) dst[x] += src[x];
        }
      return;
    }

    case Op::kReshape: {
      Node& a = input(0);
      ensure_grad(a);
      for (size_t i = 0; i < g.v.size(); ++i) a.grad.v[i] += g.v[i];
      return;
    }

    case Op::kReduceSum:
    case Op::kReduceMean: {
      Node& a = input(0);
      ensure_grad(a);
      double w = g.v[0];
      if (n.op == Op::kReduceMean) w /= static_cast<double>(a.value.numel());
      for (double& x : a.grad.v) x += w;
      return;
    }

    case Op::kReduceSumLast:
    case Op::kReduceMeanLast: {
      Node& a = input(0);
      ensure_grad(a);
      int cols = a.value.shape.back();
      size_t rows = g.v.size();
      for (size_t r = 0; r < rows; ++r) {
        double w = g.v[r];
        if (n.op == Op::kReduceMeanLast) w /= cols;
        double* dst = &a.grad.v[r * static_cast<size_t>(cols)];
        for (int j = 0; j < cols; ++j) dst[j] += w;
      }
      return;
    }

    case Op::kReduceMax: {
      // Subgradient through the argmax branch; ties break to the lowest index.
      Node& a = input(0);
      ensure_grad(a);
      int cols = a.value.shape.back();
      size_t rows = g.v.size();
      for (size_t r = 0; r < rows; ++r) {
        const double* x = &a.value.v[r * static_cast<size_t>(cols)];
        int arg = 0;
        for (int j = 1; j < cols; ++j)
          if (x[j] > x[arg]) arg = j;
        a.grad.v[r * static_cast<size_t>(cols) + arg] += g.v[r];
      }
      return;
    }
  }
  throw GraphError("unhandled op in backward");
}

const Tensor& Graph::grad(int id) const {
  const Node& n = node(id);
  if (n.grad.numel() == 0)
    throw GraphError(describe(id) + ": gradient not computed; run backward()");
  return n.grad;
}

std::map<int, Tensor> Graph::gradient(int root, const std::vector<int>& wrt) {
  for (int id : wrt) node(id);  // validates ids
  backward(root);
  std::map<int, Tensor> out;
  for (int id : wrt) out[id] = grad(id);
  return out;
}

double Graph::check_gradient(int root, const std::vector<int>& wrt,
                             double step) {
  if (step <= 0.0) throw GraphError("check_gradient: step must be positive");
  std::map<int, Tensor> analytic = gradient(root, wrt);
  double worst = 0.0;
  for (int id : wrt) {
    if (!is_leaf(id)) throw GraphError(describe(id) + ": not a leaf");
    Tensor base = node(id).value;
    for (size_t i = 0; i < base.v.size(); ++i) {
      Tensor t = base;
      t.v[i] = base.v[i] + step;
      bind(id, t);
      recompute();
      double fp = value(root).v[0];
      t.v[i] = base.v[i] - step;
      bind(id, std::move(t));
      recompute();
      double fm = value(root).v[0];
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[id].v[i];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
      bind(id, base);
    }
    recompute();
  }
  return worst;
}

}  // namespace dg::diff
