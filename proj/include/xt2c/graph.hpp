#pragma once

#include "xt2c/tensor.hpp"

#include <functional>
#include <vector>

namespace xt2c {

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Matrix<T>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward()
// walks them in reverse. With recording disabled no backward closures are
// kept, which is what inference uses.
template <typename T>
class Graph {
 public:
  using Mat = Matrix<T>;
  // Receives the node's own value and the gradient flowing into it, and
  // pushes contributions to its parents through accumulate().
  using Backward = std::function<void(Graph&, const Mat& out, const Mat& grad_out)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Mat value) { return push(std::move(value), false, nullptr); }

  // Differentiable leaf whose gradient is read back through grad().
  Var<T> input(Mat value) { return push(std::move(value), record_, nullptr); }

  // Leaf bound to a trainable tensor; backward() adds into tensor.grad()
  // when the tensor requires a gradient.
  Var<T> parameter(Tensor<T>& tensor);

  Var<T> push(Mat value, bool needs_grad, Backward backward);

  const Mat& value(Var<T> v) const { return nodes_[v.id].value; }
  const Mat& grad(Var<T> v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(Var<T> v, const Mat& delta);
  template <typename Expr>
  void accumulate_block(Var<T> v, Eigen::Index row, Eigen::Index col, const Expr& delta) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    ensure_grad(n);
    n.grad.block(row, col, delta.rows(), delta.cols()) += delta;
  }

  // Seeds d(root)/d(root) = 1 for a 1x1 root and runs the tape backwards.
  void backward(Var<T> root);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
    Tensor<T>* parameter = nullptr;
  };

  static void ensure_grad(Node& n) {
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace xt2c
