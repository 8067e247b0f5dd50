#include "dms/graph.hpp"

#include <algorithm>
#include <cmath>

#include "dms/error.hpp"

namespace dms {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) fail(std::string(what) + " produced a non-finite value");
}

// Odometer walk over the output index space of a broadcast elementwise op.
// Inputs contribute stride 0 on axes where their extent is 1.
struct BroadcastIter {
  Shape out_shape;
  std::vector<int64_t> stride_a, stride_b;

  BroadcastIter(const Shape& a, const Shape& b) {
    require(a.size() == b.size(), "elementwise rank mismatch: " + shape_str(a) + " vs " +
                                      shape_str(b) + " (broadcast is size-1 axis expansion only)");
    out_shape.resize(a.size());
    for (size_t d = 0; d < a.size(); ++d) {
      require(a[d] == b[d] || a[d] == 1 || b[d] == 1,
              "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
      out_shape[d] = std::max(a[d], b[d]);
    }
    auto sa = row_major_strides(a);
    auto sb = row_major_strides(b);
    stride_a.resize(a.size());
    stride_b.resize(b.size());
    for (size_t d = 0; d < a.size(); ++d) {
      stride_a[d] = (a[d] == 1) ? 0 : sa[d];
      stride_b[d] = (b[d] == 1) ? 0 : sb[d];
    }
  }

  template <class F>
  void run(F&& f) const {
    int rank = static_cast<int>(out_shape.size());
    if (rank == 0) {
      f(0, 0);
      return;
    }
    std::vector<int> idx(rank, 0);
    int64_t oa = 0, ob = 0;
    for (;;) {
      f(oa, ob);
      int d = rank - 1;
      for (; d >= 0; --d) {
        ++idx[d];
        oa += stride_a[d];
        ob += stride_b[d];
        if (idx[d] < out_shape[d]) break;
        oa -= stride_a[d] * out_shape[d];
        ob -= stride_b[d] * out_shape[d];
        idx[d] = 0;
      }
      if (d < 0) return;
    }
  }
};

// C(M,N) += or = opA(A) * opB(B) on raw row-major buffers. The trans flags
// interpret the buffers as transposed views of the logical operands.
void matmul_raw(const double* A, const double* B, double* C, int M, int K, int N, bool ta,
                bool tb, bool accumulate) {
  if (!accumulate) std::fill(C, C + static_cast<int64_t>(M) * N, 0.0);
  if (!ta && !tb) {
    for (int m = 0; m < M; ++m)
      for (int k = 0; k < K; ++k) {
        double a = A[static_cast<int64_t>(m) * K + k];
        const double* brow = B + static_cast<int64_t>(k) * N;
        double* crow = C + static_cast<int64_t>(m) * N;
        for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
  } else if (!ta && tb) {
    for (int m = 0; m < M; ++m)
      for (int n = 0; n < N; ++n) {
        const double* arow = A + static_cast<int64_t>(m) * K;
        const double* brow = B + static_cast<int64_t>(n) * K;
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
        C[static_cast<int64_t>(m) * N + n] += acc;
      }
  } else if (ta && !tb) {
    for (int k = 0; k < K; ++k)
      for (int m = 0; m < M; ++m) {
        double a = A[static_cast<int64_t>(k) * M + m];
        const double* brow = B + static_cast<int64_t>(k) * N;
        double* crow = C + static_cast<int64_t>(m) * N;
        for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
      }
  } else {
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        double b = B[static_cast<int64_t>(n) * K + k];
        for (int m = 0; m < M; ++m) C[static_cast<int64_t>(m) * N + n] += A[static_cast<int64_t>(k) * M + m] * b;
      }
  }
}

}  // namespace

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::ensure_node(const Tensor& t) {
  if (t.node >= 0) {
    require(t.node < static_cast<int>(nodes_.size()), "tensor node id refers to another graph");
    const Node& n = nodes_[t.node];
    require(n.shape == t.shape, "tensor handle out of sync with its graph node");
    return t.node;
  }
  Node n;
  n.op = t.requires_grad ? Op::leaf : Op::constant;
  n.shape = t.shape;
  n.values = t.values;
  n.grad_path = t.requires_grad;
  return push(std::move(n));
}

Tensor Graph::wrap(int id) const {
  const Node& n = nodes_[id];
  Tensor t(n.shape, n.values);
  t.node = id;
  t.requires_grad = n.grad_path;
  return t;
}

Tensor Graph::leaf(const Tensor& t) {
  Tensor reg = t;
  reg.node = -1;
  reg.requires_grad = true;
  return wrap(ensure_node(reg));
}

Tensor Graph::constant(const Tensor& t) {
  Tensor reg = t;
  reg.node = -1;
  reg.requires_grad = false;
  return wrap(ensure_node(reg));
}

static Shape broadcast_shape(const Shape& a, const Shape& b) {
  BroadcastIter it(a, b);
  return it.out_shape;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  int ia = ensure_node(a), ib = ensure_node(b);
  Node n;
  n.op = Op::add;
  n.a = ia;
  n.b = ib;
  n.shape = broadcast_shape(a.shape, b.shape);
  n.values.resize(static_cast<size_t>(numel(n.shape)));
  BroadcastIter it(a.shape, b.shape);
  size_t o = 0;
  const auto& va = nodes_[ia].values;
  const auto& vb = nodes_[ib].values;
  it.run([&](int64_t oa, int64_t ob) { n.values[o++] = va[oa] + vb[ob]; });
  n.grad_path = nodes_[ia].grad_path || nodes_[ib].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  int ia = ensure_node(a), ib = ensure_node(b);
  Node n;
  n.op = Op::sub;
  n.a = ia;
  n.b = ib;
  n.shape = broadcast_shape(a.shape, b.shape);
  n.values.resize(static_cast<size_t>(numel(n.shape)));
  BroadcastIter it(a.shape, b.shape);
  size_t o = 0;
  const auto& va = nodes_[ia].values;
  const auto& vb = nodes_[ib].values;
  it.run([&](int64_t oa, int64_t ob) { n.values[o++] = va[oa] - vb[ob]; });
  n.grad_path = nodes_[ia].grad_path || nodes_[ib].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  int ia = ensure_node(a), ib = ensure_node(b);
  Node n;
  n.op = Op::mul;
  n.a = ia;
  n.b = ib;
  n.shape = broadcast_shape(a.shape, b.shape);
  n.values.resize(static_cast<size_t>(numel(n.shape)));
  BroadcastIter it(a.shape, b.shape);
  size_t o = 0;
  const auto& va = nodes_[ia].values;
  const auto& vb = nodes_[ib].values;
  it.run([&](int64_t oa, int64_t ob) { n.values[o++] = va[oa] * vb[ob]; });
  n.grad_path = nodes_[ia].grad_path || nodes_[ib].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require(a.rank() >= 2, "matmul lhs must have rank >= 2, got " + shape_str(a.shape));
  require(b.rank() == 2 || b.rank() == a.rank(),
          "matmul rhs must have rank 2 or match lhs rank, got " + shape_str(a.shape) + " x " +
              shape_str(b.shape));
  int ra = a.rank();
  int rows_a = a.shape[ra - 2], cols_a = a.shape[ra - 1];
  int M = trans_a ? cols_a : rows_a;
  int K = trans_a ? rows_a : cols_a;
  int rb = b.rank();
  int rows_b = b.shape[rb - 2], cols_b = b.shape[rb - 1];
  int Kb = trans_b ? cols_b : rows_b;
  int N = trans_b ? rows_b : cols_b;
  require(K == Kb, "matmul inner dimensions differ: " + shape_str(a.shape) + " x " +
                       shape_str(b.shape));
  int64_t batch = 1;
  Shape out_shape;
  for (int d = 0; d < ra - 2; ++d) {
    out_shape.push_back(a.shape[d]);
    batch *= a.shape[d];
    if (rb == ra)
      require(b.shape[d] == a.shape[d], "matmul batch dimensions differ: " + shape_str(a.shape) +
                                            " x " + shape_str(b.shape));
  }
  out_shape.push_back(M);
  out_shape.push_back(N);

  int ia = ensure_node(a), ib = ensure_node(b);
  Node n;
  n.op = Op::matmul;
  n.a = ia;
  n.b = ib;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.shape = out_shape;
  n.values.resize(static_cast<size_t>(numel(out_shape)));
  const auto& va = nodes_[ia].values;
  const auto& vb = nodes_[ib].values;
  int64_t a_step = static_cast<int64_t>(rows_a) * cols_a;
  int64_t b_step = (rb == ra) ? static_cast<int64_t>(rows_b) * cols_b : 0;
  int64_t c_step = static_cast<int64_t>(M) * N;
  for (int64_t t = 0; t < batch; ++t)
    matmul_raw(va.data() + t * a_step, vb.data() + t * b_step, n.values.data() + t * c_step, M, K,
               N, trans_a, trans_b, false);
  check_finite(n.values, "matmul");
  n.grad_path = nodes_[ia].grad_path || nodes_[ib].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::sigmoid(const Tensor& a) {
  int ia = ensure_node(a);
  Node n;
  n.op = Op::sigmoid;
  n.a = ia;
  n.shape = a.shape;
  n.values.resize(a.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) n.values[i] = stable_sigmoid(nodes_[ia].values[i]);
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::relu(const Tensor& a) {
  int ia = ensure_node(a);
  Node n;
  n.op = Op::relu;
  n.a = ia;
  n.shape = a.shape;
  n.values.resize(a.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) n.values[i] = std::max(0.0, nodes_[ia].values[i]);
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::log(const Tensor& a) {
  int ia = ensure_node(a);
  for (double x : nodes_[ia].values)
    require(x > 0.0, "log domain violation: argument " + std::to_string(x) + " is not positive");
  Node n;
  n.op = Op::log;
  n.a = ia;
  n.shape = a.shape;
  n.values.resize(a.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) n.values[i] = std::log(nodes_[ia].values[i]);
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::exp(const Tensor& a) {
  int ia = ensure_node(a);
  Node n;
  n.op = Op::exp;
  n.a = ia;
  n.shape = a.shape;
  n.values.resize(a.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) n.values[i] = std::exp(nodes_[ia].values[i]);
  check_finite(n.values, "exp");
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::sum(const Tensor& a) {
  int ia = ensure_node(a);
  Node n;
  n.op = Op::sum;
  n.a = ia;
  n.shape = {1};
  double acc = 0.0;
  for (double x : nodes_[ia].values) acc += x;
  n.values = {acc};
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::sum_axis(const Tensor& a, int axis) {
  require(axis >= 0 && axis < a.rank(), "sum axis out of range for " + shape_str(a.shape));
  int ia = ensure_node(a);
  Node n;
  n.op = Op::sum_axis;
  n.a = ia;
  n.axis = axis;
  n.shape = a.shape;
  n.shape[axis] = 1;
  n.values.assign(static_cast<size_t>(numel(n.shape)), 0.0);
  auto st = row_major_strides(a.shape);
  int64_t outer = 1, inner = st[axis];
  for (int d = 0; d < axis; ++d) outer *= a.shape[d];
  int extent = a.shape[axis];
  const auto& v = nodes_[ia].values;
  for (int64_t o = 0; o < outer; ++o)
    for (int e = 0; e < extent; ++e)
      for (int64_t i = 0; i < inner; ++i)
        n.values[o * inner + i] += v[o * extent * inner + e * inner + i];
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::mean(const Tensor& a) {
  int ia = ensure_node(a);
  Node n;
  n.op = Op::mean;
  n.a = ia;
  n.shape = {1};
  double acc = 0.0;
  for (double x : nodes_[ia].values) acc += x;
  n.values = {acc / static_cast<double>(nodes_[ia].values.size())};
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::scale(const Tensor& a, double c) {
  require(std::isfinite(c), "scale constant must be finite");
  int ia = ensure_node(a);
  Node n;
  n.op = Op::scale;
  n.a = ia;
  n.c = c;
  n.shape = a.shape;
  n.values.resize(a.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) n.values[i] = c * nodes_[ia].values[i];
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::reshape(const Tensor& a, Shape target) {
  require(numel(target) == a.size(), "reshape " + shape_str(a.shape) + " -> " +
                                         shape_str(target) + " changes element count");
  int ia = ensure_node(a);
  Node n;
  n.op = Op::reshape;
  n.a = ia;
  n.shape = std::move(target);
  n.values = nodes_[ia].values;
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::slice(const Tensor& a, int axis, int start, int stop) {
  require(axis >= 0 && axis < a.rank(), "slice axis out of range for " + shape_str(a.shape));
  require(0 <= start && start < stop && stop <= a.shape[axis],
          "slice bounds [" + std::to_string(start) + "," + std::to_string(stop) +
              ") invalid for axis " + std::to_string(axis) + " of " + shape_str(a.shape));
  int ia = ensure_node(a);
  Node n;
  n.op = Op::slice;
  n.a = ia;
  n.axis = axis;
  n.start = start;
  n.stop = stop;
  n.shape = a.shape;
  n.shape[axis] = stop - start;
  n.values.resize(static_cast<size_t>(numel(n.shape)));
  auto st = row_major_strides(a.shape);
  int64_t outer = 1, inner = st[axis];
  for (int d = 0; d < axis; ++d) outer *= a.shape[d];
  int extent = a.shape[axis];
  const auto& v = nodes_[ia].values;
  size_t o = 0;
  for (int64_t out = 0; out < outer; ++out)
    for (int e = start; e < stop; ++e)
      for (int64_t i = 0; i < inner; ++i) n.values[o++] = v[out * extent * inner + e * inner + i];
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::permute(const Tensor& a, const std::vector<int>& perm) {
  require(static_cast<int>(perm.size()) == a.rank(), "permute order length must equal rank");
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    require(p >= 0 && p < a.rank() && !seen[p], "permute order must be a permutation of axes");
    seen[p] = true;
  }
  int ia = ensure_node(a);
  Node n;
  n.op = Op::permute;
  n.a = ia;
  n.perm = perm;
  n.shape.resize(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) n.shape[d] = a.shape[perm[d]];
  n.values.resize(a.values.size());
  auto in_st = row_major_strides(a.shape);
  std::vector<int64_t> src_stride(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) src_stride[d] = in_st[perm[d]];
  const auto& v = nodes_[ia].values;
  int rank = a.rank();
  std::vector<int> idx(rank, 0);
  int64_t src = 0;
  for (size_t o = 0; o < n.values.size(); ++o) {
    n.values[o] = v[src];
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < n.shape[d]) break;
      src -= src_stride[d] * n.shape[d];
      idx[d] = 0;
    }
  }
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::softmax(const Tensor& a) {
  require(a.rank() >= 1, "softmax needs rank >= 1");
  int ia = ensure_node(a);
  Node n;
  n.op = Op::softmax;
  n.a = ia;
  n.shape = a.shape;
  n.values.resize(a.values.size());
  int last = a.shape[a.rank() - 1];
  int64_t rows = a.size() / last;
  const auto& v = nodes_[ia].values;
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = v.data() + r * last;
    double* y = n.values.data() + r * last;
    double m = x[0];
    for (int i = 1; i < last; ++i) m = std::max(m, x[i]);
    double z = 0.0;
    for (int i = 0; i < last; ++i) {
      y[i] = std::exp(x[i] - m);
      z += y[i];
    }
    for (int i = 0; i < last; ++i) y[i] /= z;
  }
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Tensor Graph::softmax_cross_entropy(const Tensor& logits, const Tensor& labels) {
  require(logits.rank() == 2, "cross entropy expects logits of shape (batch, classes)");
  int batch = logits.shape[0], classes = logits.shape[1];
  require(labels.rank() == 1 && labels.shape[0] == batch,
          "cross entropy labels must be shape (batch,)");
  int ia = ensure_node(logits);
  const auto& lv = labels.values;
  for (int b = 0; b < batch; ++b) {
    double y = lv[static_cast<size_t>(b)];
    require(y == std::floor(y) && y >= 0 && y < classes,
            "label " + std::to_string(y) + " at row " + std::to_string(b) +
                " is not a class index in [0," + std::to_string(classes) + ")");
  }
  Node n;
  n.op = Op::softmax_cross_entropy;
  n.a = ia;
  n.shape = {1};
  n.saved.resize(nodes_[ia].values.size() + static_cast<size_t>(batch));
  double loss = 0.0;
  const auto& v = nodes_[ia].values;
  for (int b = 0; b < batch; ++b) {
    const double* x = v.data() + static_cast<int64_t>(b) * classes;
    double* p = n.saved.data() + static_cast<int64_t>(b) * classes;
    double m = x[0];
    for (int i = 1; i < classes; ++i) m = std::max(m, x[i]);
    double z = 0.0;
    for (int i = 0; i < classes; ++i) {
      p[i] = std::exp(x[i] - m);
      z += p[i];
    }
    for (int i = 0; i < classes; ++i) p[i] /= z;
    int y = static_cast<int>(lv[static_cast<size_t>(b)]);
    loss += std::log(z) + m - x[y];
  }
  // labels ride along in `saved` after the probabilities
  for (int b = 0; b < batch; ++b)
    n.saved[nodes_[ia].values.size() + static_cast<size_t>(b)] = lv[static_cast<size_t>(b)];
  n.values = {loss / batch};
  check_finite(n.values, "softmax_cross_entropy");
  n.grad_path = nodes_[ia].grad_path;
  return wrap(push(std::move(n)));
}

Gradients Graph::backward(const Tensor& root) const {
  require(root.node >= 0 && root.node < static_cast<int>(nodes_.size()),
          "backward root is not on this graph");
  require(numel(root.shape) == 1, "backward root must be scalar, got " + shape_str(root.shape));

  std::vector<std::vector<double>> grad(nodes_.size());
  auto ensure = [&](int id) -> std::vector<double>& {
    if (grad[id].empty()) grad[id].assign(nodes_[id].values.size(), 0.0);
    return grad[id];
  };
  ensure(root.node)[0] = 1.0;

  for (int id = root.node; id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!n.grad_path || grad[id].empty()) continue;
    const std::vector<double>& g = grad[id];
    switch (n.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::add:
      case Op::sub: {
        const Node& pa = nodes_[n.a];
        const Node& pb = nodes_[n.b];
        double sign_b = (n.op == Op::sub) ? -1.0 : 1.0;
        BroadcastIter it(pa.shape, pb.shape);
        size_t o = 0;
        std::vector<double>* ga = pa.grad_path ? &ensure(n.a) : nullptr;
        std::vector<double>* gb = pb.grad_path ? &ensure(n.b) : nullptr;
        it.run([&](int64_t oa, int64_t ob) {
          if (ga) (*ga)[oa] += g[o];
          if (gb) (*gb)[ob] += sign_b * g[o];
          ++o;
        });
        break;
      }
      case Op::mul: {
        const Node& pa = nodes_[n.a];
        const Node& pb = nodes_[n.b];
        BroadcastIter it(pa.shape, pb.shape);
        size_t o = 0;
        std::vector<double>* ga = pa.grad_path ? &ensure(n.a) : nullptr;
        std::vector<double>* gb = pb.grad_path ? &ensure(n.b) : nullptr;
        it.run([&](int64_t oa, int64_t ob) {
          if (ga) (*ga)[oa] += g[o] * pb.values[ob];
          if (gb) (*gb)[ob] += g[o] * pa.values[oa];
          ++o;
        });
        break;
      }
      case Op::matmul: {
        const Node& pa = nodes_[n.a];
        const Node& pb = nodes_[n.b];
        int ra = static_cast<int>(pa.shape.size());
        int rows_a = pa.shape[ra - 2], cols_a = pa.shape[ra - 1];
        int M = n.trans_a ? cols_a : rows_a;
        int K = n.trans_a ? rows_a : cols_a;
        int rb = static_cast<int>(pb.shape.size());
        int rows_b = pb.shape[rb - 2], cols_b = pb.shape[rb - 1];
        int N = n.trans_b ? rows_b : cols_b;
        int64_t batch = 1;
        for (int d = 0; d < ra - 2; ++d) batch *= pa.shape[d];
        int64_t a_step = static_cast<int64_t>(rows_a) * cols_a;
        int64_t b_step = (rb == ra) ? static_cast<int64_t>(rows_b) * cols_b : 0;
        int64_t c_step = static_cast<int64_t>(M) * N;
        std::vector<double> tmp;
        if (pa.grad_path) {
          auto& ga = ensure(n.a);
          for (int64_t t = 0; t < batch; ++t) {
            // dA' = dC * (B')^T; scatter transposed when A is a transposed view
            if (!n.trans_a) {
              matmul_raw(g.data() + t * c_step, pb.values.data() + t * b_step,
                         ga.data() + t * a_step, M, N, K, false, !n.trans_b, true);
            } else {
              tmp.assign(static_cast<size_t>(M) * K, 0.0);
              matmul_raw(g.data() + t * c_step, pb.values.data() + t * b_step, tmp.data(), M, N, K,
                         false, !n.trans_b, false);
              double* dst = ga.data() + t * a_step;
              for (int m = 0; m < M; ++m)
                for (int k = 0; k < K; ++k) dst[static_cast<int64_t>(k) * M + m] += tmp[static_cast<int64_t>(m) * K + k];
            }
          }
        }
        if (pb.grad_path) {
          auto& gb = ensure(n.b);
          for (int64_t t = 0; t < batch; ++t) {
            // dB' = (A')^T * dC
            if (!n.trans_b) {
              matmul_raw(pa.values.data() + t * a_step, g.data() + t * c_step,
                         gb.data() + t * b_step, K, M, N, !n.trans_a, false, true);
            } else {
              tmp.assign(static_cast<size_t>(K) * N, 0.0);
              matmul_raw(pa.values.data() + t * a_step, g.data() + t * c_step, tmp.data(), K, M, N,
                         !n.trans_a, false, false);
              double* dst = gb.data() + t * b_step;
              for (int k = 0; k < K; ++k)
                for (int nn = 0; nn < N; ++nn) dst[static_cast<int64_t>(nn) * K + k] += tmp[static_cast<int64_t>(k) * N + nn];
            }
          }
        }
        break;
      }
      case Op::sigmoid: {
        auto& ga = ensure(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.values[i] * (1.0 - n.values[i]);
        break;
      }
      case Op::relu: {
        const Node& pa = nodes_[n.a];
        auto& ga = ensure(n.a);
        for (size_t i = 0; i < g.size(); ++i)
          if (pa.values[i] > 0.0) ga[i] += g[i];
        break;
      }
      case Op::log: {
        const Node& pa = nodes_[n.a];
        auto& ga = ensure(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / pa.values[i];
        break;
      }
      case Op::exp: {
        auto& ga = ensure(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.values[i];
        break;
      }
      case Op::sum: {
        auto& ga = ensure(n.a);
        for (double& x : ga) x += g[0];
        break;
      }
      case Op::sum_axis: {
        const Node& pa = nodes_[n.a];
        auto& ga = ensure(n.a);
        auto st = row_major_strides(pa.shape);
        int64_t outer = 1, inner = st[n.axis];
        for (int d = 0; d < n.axis; ++d) outer *= pa.shape[d];
        int extent = pa.shape[n.axis];
        for (int64_t o = 0; o < outer; ++o)
          for (int e = 0; e < extent; ++e)
            for (int64_t i = 0; i < inner; ++i)
              ga[o * extent * inner + e * inner + i] += g[o * inner + i];
        break;
      }
      case Op::mean: {
        auto& ga = ensure(n.a);
        double s = g[0] / static_cast<double>(ga.size());
        for (double& x : ga) x += s;
        break;
      }
      case Op::scale: {
        auto& ga = ensure(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.c;
        break;
      }
      case Op::reshape: {
        auto& ga = ensure(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        break;
      }
      case Op::slice: {
        const Node& pa = nodes_[n.a];
        auto& ga = ensure(n.a);
        auto st = row_major_strides(pa.shape);
        int64_t outer = 1, inner = st[n.axis];
        for (int d = 0; d < n.axis; ++d) outer *= pa.shape[d];
        int extent = pa.shape[n.axis];
        size_t o = 0;
        for (int64_t out = 0; out < outer; ++out)
          for (int e = n.start; e < n.stop; ++e)
            for (int64_t i = 0; i < inner; ++i)
              ga[out * extent * inner + e * inner + i] += g[o++];
        break;
      }
      case Op::permute: {
        const Node& pa = nodes_[n.a];
        auto& ga = ensure(n.a);
        auto in_st = row_major_strides(pa.shape);
        std::vector<int64_t> src_stride(n.perm.size());
        for (size_t d = 0; d < n.perm.size(); ++d) src_stride[d] = in_st[n.perm[d]];
        int rank = static_cast<int>(n.shape.size());
        std::vector<int> idx(rank, 0);
        int64_t src = 0;
        for (size_t o = 0; o < g.size(); ++o) {
          ga[src] += g[o];
          for (int d = rank - 1; d >= 0; --d) {
            ++idx[d];
            src += src_stride[d];
            if (idx[d] < n.shape[d]) break;
            src -= src_stride[d] * n.shape[d];
            idx[d] = 0;
          }
        }
        break;
      }
      case Op::softmax: {
        auto& ga = ensure(n.a);
        int last = n.shape[n.shape.size() - 1];
        int64_t rows = static_cast<int64_t>(n.values.size()) / last;
        for (int64_t r = 0; r < rows; ++r) {
          const double* y = n.values.data() + r * last;
          const double* go = g.data() + r * last;
          double dot = 0.0;
          for (int i = 0; i < last; ++i) dot += go[i] * y[i];
          double* gi = ga.data() + r * last;
          for (int i = 0; i < last; ++i) gi[i] += (go[i] - dot) * y[i];
        }
        break;
      }
      case Op::softmax_cross_entropy: {
        const Node& pa = nodes_[n.a];
        auto& ga = ensure(n.a);
        int classes = pa.shape[1];
        int batch = pa.shape[0];
        double s = g[0] / batch;
        const double* probs = n.saved.data();
        const double* labels = n.saved.data() + pa.values.size();
        for (int b = 0; b < batch; ++b) {
          int y = static_cast<int>(labels[b]);
          double* gi = ga.data() + static_cast<int64_t>(b) * classes;
          const double* p = probs + static_cast<int64_t>(b) * classes;
          for (int i = 0; i < classes; ++i) gi[i] += s * (p[i] - (i == y ? 1.0 : 0.0));
        }
        break;
      }
    }
  }
  return Gradients(std::move(grad));
}

Tensor Gradients::wrt(const Tensor& t) const {
  if (t.node < 0 || t.node >= static_cast<int>(by_node_.size()) || by_node_[t.node].empty())
    return Tensor::zeros(t.shape);
  return Tensor(t.shape, by_node_[t.node]);
}

}  // namespace dms
