#include "handda/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace handda::adversarial {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("adversarial: " + what);
}

double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

}  // namespace

const char* to_string(GrlSchedule s) { return s == GrlSchedule::constant ? "constant" : "ramp"; }

GrlSchedule parse_grl_schedule(const std::string& text) {
  if (text == "constant") return GrlSchedule::constant;
  if (text == "ramp") return GrlSchedule::ramp;
  throw std::invalid_argument("unknown GRL schedule: " + text);
}

void GrlConfig::validate() const {
  require(std::isfinite(lambda_value) && lambda_value >= 0.0, "GRL lambda must be >= 0");
  require(std::isfinite(ramp_steepness) && ramp_steepness > 0.0, "GRL ramp steepness must be > 0");
}

double GrlConfig::lambda_at(double progress) const {
  if (schedule == GrlSchedule::constant) return lambda_value;
  const double p = std::clamp(progress, 0.0, 1.0);
  return lambda_value * (2.0 / (1.0 + std::exp(-ramp_steepness * p)) - 1.0);
}

nn::Var grl_apply(nn::Var x, const GrlConfig& cfg, double progress) {
  cfg.validate();
  return nn::gradient_reversal(x, cfg.lambda_at(progress));
}

Distribution::Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
  require(!probs_.empty(), "distribution needs at least one entry");
  double total = 0.0;
  for (double p : probs_) {
    require(std::isfinite(p) && p >= 0.0, "distribution entries must be non-negative");
    total += p;
  }
  require(std::abs(total - 1.0) <= 1e-6, "distribution must sum to 1");
}

double entropy(const Distribution& p) {
  double h = 0.0;
  for (double v : p.probs()) h -= plogp(v);
  return h;
}

double domain_bce_loss(std::span<const Distribution> d_hat, std::span<const DomainLabel> d) {
  require(!d_hat.empty(), "empty batch");
  require(d_hat.size() == d.size(), "prediction and label counts differ");
  double total = 0.0;
  for (std::size_t i = 0; i < d_hat.size(); ++i) {
    require(d_hat[i].size() == 2, "domain predictions must be 2-way");
    total -= std::log(d_hat[i][static_cast<std::size_t>(d[i])]);
  }
  return total / static_cast<double>(d_hat.size());
}

double attentive_entropy(std::span<const Distribution> y_hat, std::span<const Distribution> d_hat) {
  require(!y_hat.empty(), "empty batch");
  require(y_hat.size() == d_hat.size(), "class and domain prediction counts differ");
  double total = 0.0;
  for (std::size_t i = 0; i < y_hat.size(); ++i) {
    total += (1.0 + entropy(d_hat[i])) * entropy(y_hat[i]);
  }
  return total / static_cast<double>(y_hat.size());
}

nn::Var domain_loss(nn::Var domain_logits, std::span<const DomainLabel> labels) {
  require(domain_logits.cols() == 2, "domain logits must have 2 columns");
  std::vector<int> ids(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) ids[i] = static_cast<int>(labels[i]);
  return nn::nll_mean(nn::log_softmax(domain_logits), ids);
}

nn::Matrix row_entropy(const nn::Matrix& probs) {
  nn::Matrix h(probs.rows(), 1);
  for (nn::Index r = 0; r < probs.rows(); ++r) {
    double acc = 0.0;
    for (nn::Index c = 0; c < probs.cols(); ++c) acc -= plogp(probs(r, c));
    h(r, 0) = acc;
  }
  return h;
}

nn::Var attentive_entropy_loss(nn::Var class_logits, const nn::Matrix& domain_probs) {
  require(class_logits.rows() > 0, "empty batch");
  require(domain_probs.rows() == class_logits.rows(), "domain probability rows differ from batch");
  nn::Tape& tape = class_logits.tape();
  const nn::Matrix weights = (row_entropy(domain_probs).array() + 1.0).matrix();
  const nn::Var p = nn::softmax(class_logits);
  const nn::Var logp = nn::log_softmax(class_logits);
  const nn::Var neg_h = nn::row_sum(nn::mul(p, logp));
  return nn::scale(nn::mean_all(nn::mul(neg_h, tape.constant(weights))), -1.0);
}

}  // namespace handda::adversarial
