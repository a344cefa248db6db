// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Usage: acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "handda/adversarial.hpp"
#include "handda/handfeat.hpp"
#include "handda/nn/layers.hpp"
#include "handda/nn/ops.hpp"
#include "handda/pipeline.hpp"
#include "handda/ta3n.hpp"
#include "oracles.hpp"

using namespace handda;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, double budget_seconds, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome r{false, ""};
  try {
    r = body();
  } catch (const std::exception& e) {
    r = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_seconds > 0 && secs > budget_seconds) {
    r.pass = false;
    r.detail += " over time budget";
  }
  if (!r.pass) ++failures;
  char t[32];
  std::snprintf(t, sizeof t, "%.2f", secs);
  std::cout << (r.pass ? "PASS " : "FAIL ") << name << ": " << r.detail << " [" << t << " s]" << std::endl;
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(6);
  o << v;
  return o.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

Outcome roi_align_oracle() {
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 4 + static_cast<int>(rng.index(9)), w = 4 + static_cast<int>(rng.index(9));
    const auto map = oracle::random_map(rng, 1 + static_cast<int>(rng.index(3)), h, w);
    const double x1 = rng.uniform(-1.0, w - 1.0), y1 = rng.uniform(-1.0, h - 1.0);
    const handfeat::BoundingBox roi(x1, y1, x1 + rng.uniform(0.2, w * 0.8), y1 + rng.uniform(0.2, h * 0.8),
                                    handfeat::Frame::feature);
    const int oh = 1 + static_cast<int>(rng.index(7)), ow = 1 + static_cast<int>(rng.index(7));
    const int s = 1 + static_cast<int>(rng.index(4));
    const auto got = handfeat::roi_align(map, roi, oh, ow, s);
    worst = std::max(worst, oracle::max_abs_diff(got, oracle::dense_roi(map, roi, oh, ow, s)));
  }
  return {worst <= 1e-3, "50 cases, max |diff| = " + fmt(worst)};
}

Outcome grl_gradient_check() {
  Rng rng(102);
  nn::Linear first("first", 4, 6), second("second", 6, 2);
  first.init(rng);
  second.init(rng);
  nn::Matrix input(7, 4);
  for (nn::Index i = 0; i < input.size(); ++i) input.data()[i] = rng.normal();
  auto loss = [&](nn::Tape& tape, double lambda) {
    const nn::Var h = nn::relu(first(tape, tape.constant(input)));
    const nn::Var out = second(tape, nn::gradient_reversal(h, lambda));
    return nn::mean_all(nn::mul(out, out));
  };
  auto plain = [&] {
    nn::Tape tape;
    return loss(tape, 1.0).scalar();
  };
  const nn::Matrix fd_w1 = oracle::finite_difference(first.weight, plain);
  const nn::Matrix fd_b1 = oracle::finite_difference(first.bias, plain);
  double worst = 0.0;
  for (double lambda : {0.0, 0.5, 1.0}) {
    for (auto* p : {&first.weight, &first.bias, &second.weight, &second.bias}) p->zero_grad();
    nn::Tape tape;
    tape.backward(loss(tape, lambda));
    worst = std::max(worst, oracle::relative_error(first.weight.grad, -lambda * fd_w1));
    worst = std::max(worst, oracle::relative_error(first.bias.grad, -lambda * fd_b1));
  }
  return {worst <= 1e-4, "lambda in {0, 0.5, 1}, max relative error = " + fmt(worst)};
}

Outcome entropy_identities() {
  bool ok = true;
  std::string detail;
  for (std::size_t k : {2u, 5u, 12u, 97u}) {
    for (std::size_t hot = 0; hot < k; hot += k / 2 + 1) {
      std::vector<double> p(k, 0.0);
      p[hot] = 1.0;
      ok = ok && adversarial::entropy(adversarial::Distribution(p)) == 0.0;
    }
    const adversarial::Distribution uniform(std::vector<double>(k, 1.0 / static_cast<double>(k)));
    const double lnk = std::log(static_cast<double>(k));
    const double h = adversarial::entropy(uniform);
    const std::vector<adversarial::Distribution> y{uniform, uniform}, d(2, adversarial::Distribution({0.5, 0.5}));
    const double ae = adversarial::attentive_entropy(y, d);
    const double e1 = std::abs(h - lnk), e2 = std::abs(ae - (1.0 + std::log(2.0)) * lnk);
    ok = ok && e1 <= 1e-9 && e2 <= 1e-9;
    detail += "K=" + std::to_string(k) + " |H-lnK|=" + fmt(e1) + " |AE-(1+ln2)lnK|=" + fmt(e2) + "; ";
  }
  return {ok, "one-hot exact 0; " + detail};
}

/// Explicit nested-loop enumeration of increasing n-tuples, stacked and
/// pushed through the scale's relation network, then averaged.
nn::Matrix enumerated_relation(ta3n::Model& model, const nn::Matrix& enc, int n) {
  const int t = static_cast<int>(enc.rows());
  std::vector<std::vector<int>> tuples;
  for (int a = 0; a < t; ++a) {
    for (int b = a + 1; b < t; ++b) {
      if (n == 2) {
        tuples.push_back({a, b});
        continue;
      }
      for (int c = b + 1; c < t; ++c) tuples.push_back({a, b, c});
    }
  }
  nn::Matrix stacked(static_cast<nn::Index>(tuples.size()), enc.cols() * n);
  for (std::size_t r = 0; r < tuples.size(); ++r) {
    for (int k = 0; k < n; ++k) {
      stacked.block(static_cast<nn::Index>(r), k * enc.cols(), 1, enc.cols()) = enc.row(tuples[r][static_cast<std::size_t>(k)]);
    }
  }
  nn::Tape tape;
  const nn::Matrix out = model.relation[model.scale_slot(n)](tape, tape.constant(stacked)).value();
  return out.colwise().sum() / static_cast<double>(tuples.size());
}

nn::Matrix relation_of(ta3n::Model& model, const ta3n::ClipFeatures& clip, int n, Rng& sampler) {
  nn::Tape tape;
  const nn::Var enc = ta3n::encode_frames(tape, model, tape.constant(clip.frames));
  return ta3n::relation_features(tape, model, enc, 1, n, sampler).value();
}

Outcome relation_oracle() {
  ta3n::TA3NConfig cfg;
  cfg.num_seg = 5;
  cfg.input_dim = 10;
  cfg.feat_dim = 12;
  cfg.relation_scales = {2, 3};
  ta3n::TA3NConfig sampled_cfg = cfg;
  sampled_cfg.tuples_per_scale = 200;
  Rng rng(103);
  bool exact = true;
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    ta3n::Model model(cfg, 200 + static_cast<std::uint64_t>(trial));
    ta3n::Model sampled(sampled_cfg, 200 + static_cast<std::uint64_t>(trial));
    ta3n::ClipFeatures clip{"clip" + std::to_string(trial), nn::Matrix(5, 10), ta3n::DomainLabel::source, {}};
    for (nn::Index i = 0; i < clip.frames.size(); ++i) clip.frames.data()[i] = rng.normal();
    const nn::Matrix enc = ta3n::encode_frames(model, clip);
    for (int n : {2, 3}) {
      Rng s1(trial), s2(trial + 1000);
      const nn::Matrix ex = relation_of(model, clip, n, s1);
      exact = exact && ex == enumerated_relation(model, enc, n);
      const nn::Matrix sm = relation_of(sampled, clip, n, s2);
      const double scale = ex.cwiseAbs().maxCoeff();
      worst = std::max(worst, (sm - ex).cwiseAbs().maxCoeff() / std::max(scale, 1e-12));
    }
  }
  return {exact && worst <= 0.02, std::string("exhaustive ") + (exact ? "bit-identical" : "MISMATCH") +
                                      " to enumeration; sampled(200) max relative deviation = " + fmt(worst)};
}

Outcome metric_oracle() {
  Rng rng(104);
  bool match = true, invariants = true;
  for (int set = 0; set < 20; ++set) {
    std::vector<pipeline::PredictionRecord> preds;
    std::map<std::string, ta3n::ActionLabel> truth;
    for (int i = 0; i < 100; ++i) {
      const std::string id = "s" + std::to_string(set) + "-" + std::to_string(i);
      preds.push_back({id, adversarial::Distribution(oracle::random_simplex(rng, 8, 3.0)),
                       adversarial::Distribution(oracle::random_simplex(rng, 12, 3.0))});
      truth[id] = {static_cast<int>(rng.index(8)), static_cast<int>(rng.index(12))};
    }
    const auto m = pipeline::evaluate(preds, truth);
    match = match && m == oracle::brute_metrics(preds, truth);
    invariants = invariants && m.verb_top5 >= m.verb_top1 && m.noun_top5 >= m.noun_top1 &&
                 m.action_top5 >= m.action_top1 && m.action_top1 <= std::min(m.verb_top1, m.noun_top1) &&
                 m.action_top5 <= std::min(m.verb_top5, m.noun_top5);
  }
  return {match && invariants, std::string("20 sets: oracle ") + (match ? "exact" : "MISMATCH") + ", invariants " +
                                   (invariants ? "hold" : "VIOLATED")};
}

pipeline::ExperimentReport main_report;
double main_seconds = 0.0;

Outcome gain(const std::string& better, const std::string& worse) {
  const double a = main_report.means.at(better).action_top1, b = main_report.means.at(worse).action_top1;
  return {a - b >= 5.0, better + " " + fmt(a) + " vs " + worse + " " + fmt(b) + " target action@1, gain " +
                            fmt(a - b) + " (3 seeds, experiment " + fmt(main_seconds) + " s)"};
}

Outcome detector_gain(const pipeline::PipelineConfig& base) {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  const auto cmp = pipeline::compare_detectors(base, seeds, &std::cerr);
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    a += cmp.adapted[i] / 3.0;
    b += cmp.source_only[i] / 3.0;
  }
  return {a - b >= 0.05, "adapted " + fmt(a) + " vs source-only " + fmt(b) + " mean IoU, gain " + fmt(a - b)};
}

Outcome detector_gradient_identity(const pipeline::PipelineConfig& base) {
  const auto data = synth::gen_detector_dataset(base.synth);
  std::vector<const synth::SynthImageRecord*> src, tgt;
  for (const auto& r : data.records) {
    if (r.split != "train") continue;
    (r.domain == synth::DomainLabel::source ? src : tgt).push_back(&r);
  }
  // 5 steps: batch 8 over 2 pairs per source image.
  src.resize(20);
  auto cfg = base.detector;
  cfg.mu = 0.0;
  cfg.grl.lambda_value = 0.0;
  auto sched = base.detector_train;
  sched.epochs = 1;
  sched.batch_size = 8;
  std::vector<std::vector<nn::Matrix>> with, without;
  auto recorder = [](std::vector<std::vector<nn::Matrix>>& sink) {
    return [&sink](std::uint64_t, const nn::ParameterList& params) {
      std::vector<nn::Matrix> g;
      for (const auto* p : params) g.push_back(p->grad);
      sink.push_back(std::move(g));
    };
  };
  pipeline::train_hand_detector(src, tgt, cfg, sched, 5, {}, recorder(with));
  pipeline::train_hand_detector(src, {}, cfg, sched, 5, {}, recorder(without));
  if (with.size() != 5 || without.size() != 5) return {false, "expected 5 steps, got " + std::to_string(with.size())};
  double worst = 0.0;
  for (std::size_t s = 0; s < with.size(); ++s) {
    for (std::size_t i = 0; i < with[s].size(); ++i) {
      worst = std::max(worst, (with[s][i] - without[s][i]).cwiseAbs().maxCoeff());
    }
  }
  return {worst <= 1e-6, "mu = 0, lambda = 0, 5 steps, max |grad diff| = " + fmt(worst)};
}

Outcome determinism(const pipeline::PipelineConfig& base, const fs::path& work) {
  const std::vector<std::string> presets{"full_da"};
  const std::vector<std::uint64_t> seeds{1};
  const fs::path a = work / "determinism-a", b = work / "determinism-b";
  fs::remove_all(a);
  fs::remove_all(b);
  pipeline::run_experiment(base, presets, seeds, a, &std::cerr);
  pipeline::run_experiment(base, presets, seeds, b, &std::cerr);
  bool same = true;
  std::string checked;
  for (const char* rel : {"report.txt", "seed-1/full_da/metrics.txt", "seed-1/full_da/predictions.txt",
                          "seed-1/full_da/ta3n.ckpt"}) {
    const bool eq = slurp(a / rel) == slurp(b / rel);
    same = same && eq;
    checked += std::string(rel) + (eq ? " identical; " : " DIFFERS; ");
  }
  return {same, checked};
}

Outcome ensemble_idempotence(const fs::path& run) {
  const fs::path ckpt = run / "seed-1/full_da/ta3n.ckpt";
  const auto cache = pipeline::read_feature_cache(run / "seed-1/features/hand_centric-detector");
  std::vector<ta3n::ClipFeatures> test;
  for (const auto& c : cache.clips) {
    if (cache.splits.at(c.id) == "test") test.push_back(c);
  }
  auto loaded = ta3n::load_model(ckpt);
  const auto single = pipeline::predict_all(loaded.model, test, 7);
  const std::vector<fs::path> copies{ckpt, ckpt, ckpt};
  const auto ens = pipeline::ensemble_predict(copies, test, 7);
  bool same = ens.size() == single.size() && !single.empty();
  for (std::size_t i = 0; same && i < ens.size(); ++i) {
    same = ens[i].id == single[i].id && ens[i].verb.probs() == single[i].verb.probs() &&
           ens[i].noun.probs() == single[i].noun.probs();
  }
  return {same, "M = 3 copies over " + std::to_string(test.size()) + " target test clips: " +
                    (same ? "bit-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "handda_acceptance";
  fs::create_directories(work);
  const pipeline::PipelineConfig base = pipeline::preset_config("desk-scale");

  criterion("roi_align_oracle", 10.0, roi_align_oracle);
  criterion("grl_gradient_check", 5.0, grl_gradient_check);
  criterion("entropy_identities", 0.0, entropy_identities);
  criterion("relation_exhaustive_oracle", 0.0, relation_oracle);
  criterion("metric_oracle", 0.0, metric_oracle);

  bool ran = false;
  {
    const auto start = std::chrono::steady_clock::now();
    try {
      const auto presets = pipeline::experiment_preset_names();
      const std::vector<std::uint64_t> seeds{1, 2, 3};
      main_report = pipeline::run_experiment(base, presets, seeds, std::nullopt, &std::cerr);
      ran = true;
    } catch (const std::exception& e) {
      std::cerr << "experiment failed: " << e.what() << '\n';
    }
    main_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  const double ten_minutes = 600.0;
  criterion("adversarial_alignment_gain", 0.0, [&]() -> Outcome {
    if (!ran) return {false, "experiment did not complete"};
    auto r = gain("full_da", "source_only");
    if (main_seconds > ten_minutes) r = {false, r.detail + " over time budget"};
    return r;
  });
  criterion("hand_centric_gain", 0.0, [&]() -> Outcome {
    if (!ran) return {false, "experiment did not complete"};
    auto r = gain("full_da", "raw_features");
    if (main_seconds > ten_minutes) r = {false, r.detail + " over time budget"};
    return r;
  });
  criterion("detector_adaptation_gain", 0.0, [&] { return detector_gain(base); });
  criterion("detector_gradient_identity", 0.0, [&] { return detector_gradient_identity(base); });
  criterion("determinism", 0.0, [&] { return determinism(base, work); });
  criterion("ensemble_idempotence", 0.0, [&] { return ensemble_idempotence(work / "determinism-a"); });

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
