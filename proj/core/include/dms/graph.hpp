#pragma once
#include <vector>

#include "dms/tensor.hpp"

namespace dms {

// Reverse-mode tape over dense tensors. A Graph is built during one forward
// pass and discarded after backward; nodes are stored in insertion order,
// which is also a valid topological order. Confined to one thread per
// forward/backward episode.
class Graph {
 public:
  enum class Op {
    leaf,
    constant,
    add,
    sub,
    mul,
    matmul,
    sigmoid,
    relu,
    log,
    exp,
    sum,        // all elements -> scalar
    sum_axis,   // one axis, kept as size 1
    mean,       // all elements -> scalar
    scale,      // multiply by compile-time constant
    reshape,
    slice,      // one axis, [start, stop)
    permute,
    softmax,    // along last axis
    softmax_cross_entropy,  // (logits, integer labels) -> mean scalar loss
  };

  // Registers a learnable leaf; gradients accumulate here during backward.
  Tensor leaf(const Tensor& t);
  // Registers a non-learnable input (zero gradient, never propagated into).
  Tensor constant(const Tensor& t);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
  Tensor sigmoid(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor exp(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor sum_axis(const Tensor& a, int axis);
  Tensor mean(const Tensor& a);
  Tensor scale(const Tensor& a, double c);
  Tensor reshape(const Tensor& a, Shape target);
  Tensor slice(const Tensor& a, int axis, int start, int stop);
  Tensor permute(const Tensor& a, const std::vector<int>& perm);
  Tensor softmax(const Tensor& a);
  Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& labels);

  // d(root)/d(leaf) for every registered leaf, accumulated additively over
  // all paths in reverse insertion order. root must be scalar.
  class Gradients backward(const Tensor& root) const;

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    int a = -1, b = -1;
    Shape shape;
    std::vector<double> values;
    bool grad_path = false;  // some leaf lives in this subtree
    // op-specific attributes
    double c = 0.0;
    int axis = -1, start = 0, stop = 0;
    bool trans_a = false, trans_b = false;
    std::vector<int> perm;
    std::vector<double> saved;  // softmax probabilities for the fused loss
  };

  int push(Node n);
  int ensure_node(const Tensor& t);
  Tensor wrap(int id) const;

  std::vector<Node> nodes_;

  friend class Gradients;
};

// Result of Graph::backward. Lookup by any tensor handle produced on the
// graph — leaves for parameter gradients, interior nodes for signals like
// d(loss)/d(mask). Tensors that never reached the root get zeros.
class Gradients {
 public:
  Tensor wrt(const Tensor& t) const;

 private:
  explicit Gradients(std::vector<std::vector<double>> by_node) : by_node_(std::move(by_node)) {}
  std::vector<std::vector<double>> by_node_;

  friend class Graph;
};

}  // namespace dms
