#pragma once

#include <span>
#include <vector>

#include "handda/nn/tape.hpp"

namespace handda::nn {

// Dense algebra.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // element-wise
Var scale(Var x, double factor);
/// Adds a 1×C row to every row of x.
Var add_row(Var x, Var row);
/// x·W + b with b a 1×out row.
Var affine(Var x, Var weight, Var bias);

// Nonlinearities.
Var relu(Var x);
Var log_softmax(Var logits);  // row-wise
Var softmax(Var logits);      // row-wise

/// Identity forward; multiplies the incoming gradient by -lambda.
Var gradient_reversal(Var x, double lambda);
/// Copies the value onto the tape as a constant (no gradient flows back).
Var detach(Var x);

// Shape manipulation.
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, Index start, Index count);
Var slice_cols(Var x, Index start, Index count);
Var broadcast_rows(Var row, Index count);
/// Output row r is the concatenation of x rows idx[r*width .. r*width+width).
Var gather_concat(Var x, std::span<const Index> idx, Index width);
/// Averages consecutive groups of `block` rows.
Var block_mean(Var x, Index block);

// Reductions.
Var sum_all(Var x);
Var mean_all(Var x);
Var mean_rows(Var x);  // 1×C column means
Var row_sum(Var x);    // R×1

// Losses.
/// Mean over rows of -log_probs(i, labels[i]).
Var nll_mean(Var log_probs, std::span<const int> labels);
/// Mean binary cross-entropy of sigmoid(logits) against targets in {0,1}.
Var bce_with_logits_mean(Var logits, const Matrix& targets);
/// Sum of |pred - target| over rows with mask=true, divided by (#masked rows × cols).
/// Zero when no row is masked.
Var masked_l1_mean(Var pred, const Matrix& target, const std::vector<bool>& mask);

/// Geometry of a square-kernel convolution over an H×W grid stored as an
/// (H·W)×C matrix in row-major cell order.
struct ConvGeometry {
  Index in_h = 0;
  Index in_w = 0;
  Index kernel = 3;
  Index stride = 1;
  Index pad = 1;

  [[nodiscard]] Index out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  [[nodiscard]] Index out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

/// Unfolds receptive fields: (out_h·out_w) × (kernel²·C). Out-of-grid taps are zero.
Var im2col(Var x, const ConvGeometry& geom);

}  // namespace handda::nn
