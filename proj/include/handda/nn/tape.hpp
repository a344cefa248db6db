#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace handda::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// A named trainable array. Gradients accumulate across backward passes
/// until zero_grad() is called.
struct Parameter {
  Parameter() = default;
  Parameter(std::string param_name, Index rows, Index cols)
      : name(std::move(param_name)),
        value(Matrix::Zero(rows, cols)),
        grad(Matrix::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }

  std::string name;
  Matrix value;
  Matrix grad;
};

using ParameterList = std::vector<Parameter*>;

void zero_grad(const ParameterList& params);

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }
  [[nodiscard]] Tape& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode differentiation tape. Nodes are appended in evaluation order;
/// backward() walks them in reverse and pushes gradients into parents and,
/// finally, into the Parameter objects that were bound with parameter().
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var parameter(Parameter& param);

  /// Records an operation result. `backward` is only invoked when at least
  /// one parent requires a gradient.
  Var record(Matrix value, std::span<const Var> parents, Backward backward);
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(backward));
  }

  [[nodiscard]] const Matrix& value(Var v) const { return nodes_[v.id_].value; }
  [[nodiscard]] bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Matrix& g);
  /// Zero-initialized gradient buffer for in-place scatter updates.
  Matrix& grad_buffer(Var v);

  /// Seeds d(root)/d(root) = 1 and back-propagates into every parameter.
  void backward(Var root);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Parameter* param = nullptr;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

}  // namespace handda::nn
