#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "handda/nn/tape.hpp"

namespace handda::nn {

enum class OptimizerKind { sgd, adam };

const char* to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// SGD with momentum (v = m·v + g + wd·w; w -= lr·v) or Adam with L2 decay
/// folded into the gradient. State is keyed by parameter name. After every
/// update, parameter values are rounded to binary32.
class Optimizer {
 public:
  explicit Optimizer(OptimizerSettings settings) : settings_(settings) {}

  void step(const ParameterList& params, double learning_rate);
  [[nodiscard]] std::uint64_t steps() const { return steps_; }
  [[nodiscard]] const OptimizerSettings& settings() const { return settings_; }

 private:
  OptimizerSettings settings_;
  std::map<std::string, Matrix> first_moment_;
  std::map<std::string, Matrix> second_moment_;
  std::uint64_t steps_ = 0;
};

/// lr0 · factor^floor(epoch / interval); epoch counts from 0.
double step_decay_lr(double initial_lr, double factor, int interval, int epoch);

}  // namespace handda::nn
