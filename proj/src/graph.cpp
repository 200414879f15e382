#include "xt2c/graph.hpp"

#include <sstream>

namespace xt2c {

std::string shape_string(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Var<T> Graph<T>::parameter(Tensor<T>& tensor) {
  Mat value = tensor.matrix();
  Var<T> v = push(std::move(value), tensor.requires_grad(), nullptr);
  if (nodes_[v.id].needs_grad) nodes_[v.id].parameter = &tensor;
  return v;
}

template <typename T>
Var<T> Graph<T>::push(Mat value, bool needs_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
void Graph<T>::accumulate(Var<T> v, const Mat& delta) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  if (!record_) throw std::logic_error("backward() on a graph built without recording");
  Node& r = nodes_.at(root.id);
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw DimensionError("backward() needs a scalar root");
  }
  if (!r.needs_grad) return;
  ensure_grad(r);
  r.grad(0, 0) += T(1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.value, n.grad);
    if (n.parameter != nullptr) n.parameter->grad_matrix() += n.grad;
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace xt2c
