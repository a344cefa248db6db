#include "handda/nn/tape.hpp"

#include <stdexcept>

namespace handda::nn {

void zero_grad(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& param) {
  Node node;
  node.value = param.value;
  node.param = &param;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backward backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape_ != this) throw std::invalid_argument("tape: operand recorded on a different tape");
    node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Matrix& Tape::grad_buffer(Var v) {
  Node& node = nodes_[v.id_];
  if (!node.has_grad) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& node = nodes_[v.id_];
  if (!node.requires_grad) return;
  if (g.rows() != node.value.rows() || g.cols() != node.value.cols()) {
    throw std::logic_error("tape: gradient shape mismatch");
  }
  if (!node.has_grad) {
    node.grad = g;
    node.has_grad = true;
  } else {
    node.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.tape_ != this) throw std::invalid_argument("tape: root belongs to another tape");
  if (value(root).size() != 1) throw std::invalid_argument("tape: backward root must be a scalar");
  if (!nodes_[root.id_].requires_grad) return;
  accumulate(root, Matrix::Ones(1, 1));
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad) continue;
    if (node.param != nullptr) {
      node.param->grad += node.grad;
    } else if (node.backward) {
      node.backward(*this, node.grad);
    }
  }
}

}  // namespace handda::nn
