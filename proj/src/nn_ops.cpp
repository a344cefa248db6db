#include "handda/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace handda::nn {
namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("nn: ") + what);
}

void require_same_shape(Var a, Var b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op);
}

Tape& common_tape(std::span<const Var> parts) {
  require(!parts.empty(), "empty operand list");
  return parts.front().tape();
}

Matrix row_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    double z = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) {
      out(r, c) = std::exp(logits(r, c) - m);
      z += out(r, c);
    }
    out.row(r) /= z;
  }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul shape mismatch");
  Matrix value = a.value() * b.value();
  return a.tape().record(std::move(value), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add shape mismatch");
  Matrix value = a.value() + b.value();
  return a.tape().record(std::move(value), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub shape mismatch");
  Matrix value = a.value() - b.value();
  return a.tape().record(std::move(value), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul shape mismatch");
  Matrix value = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(value), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
  });
}

Var scale(Var x, double factor) {
  Matrix value = x.value() * factor;
  return x.tape().record(std::move(value), {x},
                         [x, factor](Tape& t, const Matrix& g) { t.accumulate(x, g * factor); });
}

Var add_row(Var x, Var row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row expects a 1xC row");
  Matrix value = x.value().rowwise() + row.value().row(0);
  return x.tape().record(std::move(value), {x, row}, [x, row](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var affine(Var x, Var weight, Var bias) { return add_row(matmul(x, weight), bias); }

Var relu(Var x) {
  Matrix value = x.value().cwiseMax(0.0);
  return x.tape().record(std::move(value), {x}, [x](Tape& t, const Matrix& g) {
    const Matrix& in = t.value(x);
    Matrix out = g;
    for (Index i = 0; i < out.size(); ++i) {
      if (in.data()[i] <= 0.0) out.data()[i] = 0.0;
    }
    t.accumulate(x, out);
  });
}

Var log_softmax(Var logits) {
  const Matrix probs = row_softmax(logits.value());
  Matrix value(probs.rows(), probs.cols());
  for (Index r = 0; r < value.rows(); ++r) {
    const double m = logits.value().row(r).maxCoeff();
    const double lse = m + std::log((logits.value().row(r).array() - m).exp().sum());
    value.row(r) = logits.value().row(r).array() - lse;
  }
  return logits.tape().record(std::move(value), {logits},
                              [logits, probs](Tape& t, const Matrix& g) {
                                Matrix out = g;
                                for (Index r = 0; r < g.rows(); ++r) {
                                  out.row(r) -= probs.row(r) * g.row(r).sum();
                                }
                                t.accumulate(logits, out);
                              });
}

Var softmax(Var logits) {
  Matrix value = row_softmax(logits.value());
  const Matrix probs = value;
  return logits.tape().record(std::move(value), {logits},
                              [logits, probs](Tape& t, const Matrix& g) {
                                Matrix out(g.rows(), g.cols());
                                for (Index r = 0; r < g.rows(); ++r) {
                                  const double dot = g.row(r).dot(probs.row(r));
                                  out.row(r) = probs.row(r).array() * (g.row(r).array() - dot);
                                }
                                t.accumulate(logits, out);
                              });
}

Var gradient_reversal(Var x, double lambda) {
  require(lambda >= 0.0 && std::isfinite(lambda), "gradient reversal strength must be >= 0");
  return x.tape().record(x.value(), {x},
                         [x, lambda](Tape& t, const Matrix& g) { t.accumulate(x, g * -lambda); });
}

Var detach(Var x) { return x.tape().constant(x.value()); }

Var concat_cols(std::span<const Var> parts) {
  Tape& tape = common_tape(parts);
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols row mismatch");
    cols += p.cols();
  }
  Matrix value(rows, cols);
  Index offset = 0;
  for (const Var& p : parts) {
    value.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return tape.record(std::move(value), parts, [owned](Tape& t, const Matrix& g) {
    Index off = 0;
    for (const Var& p : owned) {
      const Index c = t.value(p).cols();
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(off, c));
      off += c;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  Tape& tape = common_tape(parts);
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    require(p.cols() == cols, "concat_rows column mismatch");
    rows += p.rows();
  }
  Matrix value(rows, cols);
  Index offset = 0;
  for (const Var& p : parts) {
    value.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return tape.record(std::move(value), parts, [owned](Tape& t, const Matrix& g) {
    Index off = 0;
    for (const Var& p : owned) {
      const Index r = t.value(p).rows();
      if (t.requires_grad(p)) t.accumulate(p, g.middleRows(off, r));
      off += r;
    }
  });
}

Var slice_rows(Var x, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.rows(), "slice_rows out of range");
  Matrix value = x.value().middleRows(start, count);
  return x.tape().record(std::move(value), {x}, [x, start, count](Tape& t, const Matrix& g) {
    t.grad_buffer(x).middleRows(start, count) += g;
  });
}

Var slice_cols(Var x, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols out of range");
  Matrix value = x.value().middleCols(start, count);
  return x.tape().record(std::move(value), {x}, [x, start, count](Tape& t, const Matrix& g) {
    t.grad_buffer(x).middleCols(start, count) += g;
  });
}

Var broadcast_rows(Var row, Index count) {
  require(row.rows() == 1, "broadcast_rows expects a single row");
  Matrix value = row.value().replicate(count, 1);
  return row.tape().record(std::move(value), {row}, [row](Tape& t, const Matrix& g) {
    t.accumulate(row, g.colwise().sum());
  });
}

Var gather_concat(Var x, std::span<const Index> idx, Index width) {
  require(width > 0 && idx.size() % static_cast<std::size_t>(width) == 0,
          "gather_concat index count must be a multiple of width");
  const Index cols = x.cols();
  const Index out_rows = static_cast<Index>(idx.size()) / width;
  Matrix value(out_rows, cols * width);
  for (Index r = 0; r < out_rows; ++r) {
    for (Index k = 0; k < width; ++k) {
      const Index src = idx[static_cast<std::size_t>(r * width + k)];
      require(src >= 0 && src < x.rows(), "gather_concat index out of range");
      value.block(r, k * cols, 1, cols) = x.value().row(src);
    }
  }
  std::vector<Index> owned(idx.begin(), idx.end());
  return x.tape().record(std::move(value), {x},
                         [x, owned = std::move(owned), width, cols](Tape& t, const Matrix& g) {
                           Matrix& buf = t.grad_buffer(x);
                           const Index n = g.rows();
                           for (Index r = 0; r < n; ++r) {
                             for (Index k = 0; k < width; ++k) {
                               buf.row(owned[static_cast<std::size_t>(r * width + k)]) +=
                                   g.block(r, k * cols, 1, cols);
                             }
                           }
                         });
}

Var block_mean(Var x, Index block) {
  require(block > 0 && x.rows() % block == 0, "block_mean: rows must divide into blocks");
  const Index groups = x.rows() / block;
  Matrix value = Matrix::Zero(groups, x.cols());
  for (Index gi = 0; gi < groups; ++gi) {
    value.row(gi) = x.value().middleRows(gi * block, block).colwise().sum() / static_cast<double>(block);
  }
  return x.tape().record(std::move(value), {x}, [x, block, groups](Tape& t, const Matrix& g) {
    Matrix& buf = t.grad_buffer(x);
    for (Index gi = 0; gi < groups; ++gi) {
      const auto share = g.row(gi) / static_cast<double>(block);
      for (Index r = 0; r < block; ++r) buf.row(gi * block + r) += share;
    }
  });
}

Var sum_all(Var x) {
  Matrix value(1, 1);
  value(0, 0) = x.value().sum();
  return x.tape().record(std::move(value), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, Matrix::Constant(t.value(x).rows(), t.value(x).cols(), g(0, 0)));
  });
}

Var mean_all(Var x) {
  require(x.value().size() > 0, "mean of empty matrix");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size()));
}

Var mean_rows(Var x) {
  require(x.rows() > 0, "mean_rows of empty matrix");
  return block_mean(x, x.rows());
}

Var row_sum(Var x) {
  Matrix value = x.value().rowwise().sum();
  return x.tape().record(std::move(value), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, g.replicate(1, t.value(x).cols()));
  });
}

Var nll_mean(Var log_probs, std::span<const int> labels) {
  require(static_cast<Index>(labels.size()) == log_probs.rows(), "nll label count mismatch");
  require(!labels.empty(), "nll of empty batch");
  const Index n = log_probs.rows();
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < log_probs.cols(), "nll label out of range");
    total -= log_probs.value()(r, y);
  }
  Matrix value(1, 1);
  value(0, 0) = total / static_cast<double>(n);
  std::vector<int> owned(labels.begin(), labels.end());
  return log_probs.tape().record(std::move(value), {log_probs},
                                 [log_probs, owned = std::move(owned)](Tape& t, const Matrix& g) {
                                   Matrix& buf = t.grad_buffer(log_probs);
                                   const double share = g(0, 0) / static_cast<double>(owned.size());
                                   for (std::size_t r = 0; r < owned.size(); ++r) {
                                     buf(static_cast<Index>(r), owned[r]) -= share;
                                   }
                                 });
}

Var bce_with_logits_mean(Var logits, const Matrix& targets) {
  require(logits.rows() == targets.rows() && logits.cols() == targets.cols(),
          "bce target shape mismatch");
  require(logits.value().size() > 0, "bce of empty batch");
  const Matrix& z = logits.value();
  double total = 0.0;
  for (Index i = 0; i < z.size(); ++i) {
    const double x = z.data()[i];
    const double y = targets.data()[i];
    // max(x,0) - x*y + log(1 + exp(-|x|))
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  const double count = static_cast<double>(z.size());
  Matrix value(1, 1);
  value(0, 0) = total / count;
  return logits.tape().record(std::move(value), {logits},
                              [logits, targets, count](Tape& t, const Matrix& g) {
                                const Matrix& zz = t.value(logits);
                                Matrix out(zz.rows(), zz.cols());
                                for (Index i = 0; i < zz.size(); ++i) {
                                  const double s = 1.0 / (1.0 + std::exp(-zz.data()[i]));
                                  out.data()[i] = (s - targets.data()[i]) * g(0, 0) / count;
                                }
                                t.accumulate(logits, out);
                              });
}

Var masked_l1_mean(Var pred, const Matrix& target, const std::vector<bool>& mask) {
  require(pred.rows() == target.rows() && pred.cols() == target.cols(), "l1 target shape mismatch");
  require(static_cast<Index>(mask.size()) == pred.rows(), "l1 mask size mismatch");
  Index active = 0;
  double total = 0.0;
  for (Index r = 0; r < pred.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    ++active;
    total += (pred.value().row(r) - target.row(r)).cwiseAbs().sum();
  }
  const double denom = static_cast<double>(active * pred.cols());
  Matrix value = Matrix::Zero(1, 1);
  if (active > 0) value(0, 0) = total / denom;
  return pred.tape().record(std::move(value), {pred},
                            [pred, target, mask, active, denom](Tape& t, const Matrix& g) {
                              if (active == 0) return;
                              const Matrix& p = t.value(pred);
                              Matrix out = Matrix::Zero(p.rows(), p.cols());
                              for (Index r = 0; r < p.rows(); ++r) {
                                if (!mask[static_cast<std::size_t>(r)]) continue;
                                for (Index c = 0; c < p.cols(); ++c) {
                                  const double d = p(r, c) - target(r, c);
                                  out(r, c) = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * g(0, 0) / denom;
                                }
                              }
                              t.accumulate(pred, out);
                            });
}

Var im2col(Var x, const ConvGeometry& geom) {
  require(x.rows() == geom.in_h * geom.in_w, "im2col: input rows must equal H*W");
  require(geom.kernel > 0 && geom.stride > 0 && geom.pad >= 0, "im2col: invalid geometry");
  const Index oh = geom.out_h();
  const Index ow = geom.out_w();
  require(oh > 0 && ow > 0, "im2col: empty output");
  const Index c = x.cols();
  const Index k = geom.kernel;
  // source cell per (output cell, tap); -1 when the tap falls off the grid
  std::vector<Index> src(static_cast<std::size_t>(oh * ow * k * k), -1);
  for (Index oy = 0; oy < oh; ++oy) {
    for (Index ox = 0; ox < ow; ++ox) {
      for (Index ky = 0; ky < k; ++ky) {
        for (Index kx = 0; kx < k; ++kx) {
          const Index iy = oy * geom.stride - geom.pad + ky;
          const Index ix = ox * geom.stride - geom.pad + kx;
          if (iy < 0 || iy >= geom.in_h || ix < 0 || ix >= geom.in_w) continue;
          src[static_cast<std::size_t>(((oy * ow + ox) * k + ky) * k + kx)] = iy * geom.in_w + ix;
        }
      }
    }
  }
  Matrix value = Matrix::Zero(oh * ow, k * k * c);
  for (Index r = 0; r < oh * ow; ++r) {
    for (Index tap = 0; tap < k * k; ++tap) {
      const Index s = src[static_cast<std::size_t>(r * k * k + tap)];
      if (s >= 0) value.block(r, tap * c, 1, c) = x.value().row(s);
    }
  }
  return x.tape().record(std::move(value), {x},
                         [x, src = std::move(src), k, c](Tape& t, const Matrix& g) {
                           Matrix& buf = t.grad_buffer(x);
                           for (Index r = 0; r < g.rows(); ++r) {
                             for (Index tap = 0; tap < k * k; ++tap) {
                               const Index s = src[static_cast<std::size_t>(r * k * k + tap)];
                               if (s >= 0) buf.row(s) += g.block(r, tap * c, 1, c);
                             }
                           }
                         });
}

}  // namespace handda::nn
