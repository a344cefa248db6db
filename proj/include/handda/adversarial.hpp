#pragma once

#include <span>
#include <string>
#include <vector>

#include "handda/nn/ops.hpp"

namespace handda::adversarial {

enum class GrlSchedule { constant, ramp };

const char* to_string(GrlSchedule s);
GrlSchedule parse_grl_schedule(const std::string& text);

/// Gradient reversal strength. The ramp schedule follows the usual sigmoid
/// warm-up: lambda · (2 / (1 + exp(-steepness · progress)) - 1).
struct GrlConfig {
  double lambda_value = 1.0;
  GrlSchedule schedule = GrlSchedule::constant;
  double ramp_steepness = 10.0;

  void validate() const;
  /// Effective strength at training progress in [0, 1].
  [[nodiscard]] double lambda_at(double progress) const;
};

/// Identity forward; backward multiplies incoming gradients by -lambda_at(progress).
nn::Var grl_apply(nn::Var x, const GrlConfig& cfg, double progress);

/// Probability vector: K >= 1 non-negative entries summing to 1 (within 1e-6).
class Distribution {
 public:
  explicit Distribution(std::vector<double> probs);

  [[nodiscard]] const std::vector<double>& probs() const { return probs_; }
  [[nodiscard]] std::size_t size() const { return probs_.size(); }
  [[nodiscard]] double operator[](std::size_t k) const { return probs_[k]; }

 private:
  std::vector<double> probs_;
};

enum class DomainLabel : int { source = 0, target = 1 };

/// Shannon entropy in nats, with 0·ln 0 = 0.
double entropy(const Distribution& p);

/// Mean over the batch of -ln d_hat[d].
double domain_bce_loss(std::span<const Distribution> d_hat, std::span<const DomainLabel> d);

/// Mean over the batch of (1 + H(d_hat_i)) · H(y_hat_i).
double attentive_entropy(std::span<const Distribution> y_hat, std::span<const Distribution> d_hat);

// Differentiable forms used inside training graphs.

/// Mean cross-entropy of 2-way domain logits against domain labels.
nn::Var domain_loss(nn::Var domain_logits, std::span<const DomainLabel> labels);

/// Attentive entropy of class logits; `domain_probs` (B×2) enters as a fixed
/// per-sample weight 1 + H(d_hat), so no gradient reaches the discriminator.
nn::Var attentive_entropy_loss(nn::Var class_logits, const nn::Matrix& domain_probs);

/// Row-wise entropy (nats) of a matrix of probability rows, as a column.
nn::Matrix row_entropy(const nn::Matrix& probs);

}  // namespace handda::adversarial
