#pragma once

#include <string>

#include "handda/nn/ops.hpp"
#include "handda/random.hpp"

namespace handda::nn {

/// Rounds every entry to the nearest binary32 value. Parameters are kept
/// binary32-representable so checkpoints (stored as f32) round-trip exactly.
void round_to_f32(Matrix& m);

/// Uniform(-bound, bound) initialization, rounded to binary32.
void init_uniform(Parameter& p, Rng& rng, double bound);

/// Fully connected layer y = x·W + b, W stored in×out.
struct Linear {
  Linear() = default;
  Linear(const std::string& name, Index in, Index out)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {}

  /// Weights ~ U(-1/sqrt(in), 1/sqrt(in)); bias zero.
  void init(Rng& rng);
  Var operator()(Tape& tape, Var x) { return affine(x, tape.parameter(weight), tape.parameter(bias)); }
  void collect(ParameterList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
  [[nodiscard]] Index in_dim() const { return weight.value.rows(); }
  [[nodiscard]] Index out_dim() const { return weight.value.cols(); }

  Parameter weight;
  Parameter bias;
};

/// Two affine layers with a ReLU in between.
struct Mlp2 {
  Mlp2() = default;
  Mlp2(const std::string& name, Index in, Index hidden, Index out)
      : first(name + ".fc1", in, hidden), second(name + ".fc2", hidden, out) {}

  void init(Rng& rng) {
    first.init(rng);
    second.init(rng);
  }
  Var operator()(Tape& tape, Var x) { return second(tape, relu(first(tape, x))); }
  void collect(ParameterList& out) {
    first.collect(out);
    second.collect(out);
  }

  Linear first;
  Linear second;
};

}  // namespace handda::nn
