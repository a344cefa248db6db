#include <cmath>
#include <stdexcept>

#include "handda/nn/layers.hpp"
#include "handda/nn/optim.hpp"

namespace handda::nn {

void round_to_f32(Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

void init_uniform(Parameter& p, Rng& rng, double bound) {
  for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.uniform(-bound, bound);
  round_to_f32(p.value);
  p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
}

void Linear::init(Rng& rng) {
  init_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(weight.value.rows())));
  bias.value.setZero();
  bias.grad.setZero();
}

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer kind: " + text);
}

void Optimizer::step(const ParameterList& params, double learning_rate) {
  ++steps_;
  for (Parameter* p : params) {
    Matrix g = p->grad;
    if (settings_.weight_decay != 0.0) g += settings_.weight_decay * p->value;
    if (settings_.kind == OptimizerKind::sgd) {
      auto [it, fresh] = first_moment_.try_emplace(p->name, Matrix::Zero(g.rows(), g.cols()));
      Matrix& v = it->second;
      v = settings_.momentum * v + g;
      p->value -= learning_rate * v;
    } else {
      auto [mi, m_fresh] = first_moment_.try_emplace(p->name, Matrix::Zero(g.rows(), g.cols()));
      auto [vi, v_fresh] = second_moment_.try_emplace(p->name, Matrix::Zero(g.rows(), g.cols()));
      Matrix& m = mi->second;
      Matrix& v = vi->second;
      m = settings_.beta1 * m + (1.0 - settings_.beta1) * g;
      v = settings_.beta2 * v + (1.0 - settings_.beta2) * g.cwiseProduct(g);
      const double t = static_cast<double>(steps_);
      const double c1 = 1.0 - std::pow(settings_.beta1, t);
      const double c2 = 1.0 - std::pow(settings_.beta2, t);
      p->value.array() -= learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + settings_.epsilon);
    }
    round_to_f32(p->value);
  }
}

double step_decay_lr(double initial_lr, double factor, int interval, int epoch) {
  if (interval <= 0) return initial_lr;
  return initial_lr * std::pow(factor, epoch / interval);
}

}  // namespace handda::nn
