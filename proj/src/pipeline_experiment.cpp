#include <algorithm>
#include <array>
#include <memory>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "handda/pipeline.hpp"
#include "handda/text.hpp"

namespace handda::pipeline {
namespace {

template <typename Record>
std::vector<const Record*> select(const std::vector<Record>& records, synth::DomainLabel domain,
                                  const std::string& split) {
  std::vector<const Record*> out;
  for (const auto& r : records) {
    if (r.domain == domain && r.split == split) out.push_back(&r);
  }
  return out;
}

PipelineConfig reseeded(PipelineConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.synth.seed = seed;
  return cfg;
}

struct StageOne {
  synth::ActionDataset actions;
  synth::DetectorDataset images;
  std::optional<Extractor> extractor;
  std::optional<handdet::DetectorModel> detector;
};

void say(std::ostream* progress, const std::string& msg) {
  if (progress) *progress << msg << std::endl;
}

MetricsReport mean_report(const std::vector<MetricsReport>& reports) {
  MetricsReport m;
  for (const auto& r : reports) {
    m.verb_top1 += r.verb_top1;
    m.verb_top5 += r.verb_top5;
    m.noun_top1 += r.noun_top1;
    m.noun_top5 += r.noun_top5;
    m.action_top1 += r.action_top1;
    m.action_top5 += r.action_top5;
    m.clips += r.clips;
  }
  const double n = static_cast<double>(reports.size());
  m.verb_top1 /= n;
  m.verb_top5 /= n;
  m.noun_top1 /= n;
  m.noun_top5 /= n;
  m.action_top1 /= n;
  m.action_top5 /= n;
  return m;
}

LogSink file_log(const std::optional<std::filesystem::path>& path) {
  if (!path) return {};
  std::filesystem::create_directories(path->parent_path());
  auto stream = std::make_shared<std::ofstream>(*path);
  return [stream](const EpochLog& e) { write_log_line(*stream, e); };
}

}  // namespace

std::vector<std::string> experiment_preset_names() { return {"full_da", "source_only", "raw_features"}; }

PipelineConfig apply_experiment_preset(PipelineConfig cfg, const std::string& preset) {
  if (preset == "full_da") {
    cfg.features.mode = FeatureMode::hand_centric;
  } else if (preset == "source_only") {
    cfg.features.mode = FeatureMode::hand_centric;
    cfg.ta3n.lambda_spatial = 0.0;
    cfg.ta3n.lambda_relation = 0.0;
    cfg.ta3n.lambda_temporal = 0.0;
    cfg.ta3n.gamma = 0.0;
  } else if (preset == "raw_features") {
    cfg.features.mode = FeatureMode::raw;
  } else {
    throw std::invalid_argument("unknown experiment preset: " + preset);
  }
  return cfg;
}

ExperimentReport run_experiment(const PipelineConfig& base, std::span<const std::string> presets,
                                std::span<const std::uint64_t> seeds, const std::optional<std::filesystem::path>& out,
                                std::ostream* progress) {
  if (presets.empty() || seeds.empty()) throw std::invalid_argument("run_experiment: presets and seeds are required");
  for (const auto& p : presets) apply_experiment_preset(base, p).validate();
  ExperimentReport report;
  std::map<std::string, std::vector<MetricsReport>> per_preset;
  for (std::uint64_t seed : seeds) {
    const PipelineConfig cfg = reseeded(base, seed);
    cfg.validate();
    const std::optional<std::filesystem::path> dir =
        out ? std::optional(*out / ("seed-" + std::to_string(seed))) : std::nullopt;
    auto path = [&](const std::string& name) {
      return dir ? std::optional(*dir / name) : std::optional<std::filesystem::path>();
    };
    if (dir) write_config(*dir / "config.txt", cfg);

    say(progress, "[seed " + std::to_string(seed) + "] generating data");
    StageOne s1{synth::gen_action_dataset(cfg.synth), synth::gen_detector_dataset(cfg.synth), {}, {}};
    if (dir) {
      synth::write_action_dataset(*dir / "clips", s1.actions);
      synth::write_detector_dataset(*dir / "images", s1.images);
    }
    const auto src_train = select(s1.actions.records, synth::DomainLabel::source, "train");
    const auto tgt_train = select(s1.actions.records, synth::DomainLabel::target, "train");
    const auto tgt_test = select(s1.actions.records, synth::DomainLabel::target, "test");

    say(progress, "[seed " + std::to_string(seed) + "] training feature extractor");
    s1.extractor.emplace(train_feature_extractor(src_train, cfg.extractor, cfg.extractor_train, cfg.synth.num_verbs,
                                                 cfg.synth.num_nouns, cfg.synth.image_stride, derive_seed(seed, {1}),
                                                 file_log(path("logs/extractor.log"))));
    if (dir) save_extractor(*dir / "extractor.ckpt", *s1.extractor, 0);

    const bool needs_detector = std::any_of(presets.begin(), presets.end(), [&](const std::string& p) {
      const auto c = apply_experiment_preset(cfg, p);
      return c.features.mode == FeatureMode::hand_centric && c.features.boxes == BoxSource::detector;
    });
    if (needs_detector) {
      say(progress, "[seed " + std::to_string(seed) + "] training hand detector");
      const auto img_src = select(s1.images.records, synth::DomainLabel::source, "train");
      const auto img_tgt = select(s1.images.records, synth::DomainLabel::target, "train");
      s1.detector.emplace(train_hand_detector(img_src, img_tgt, cfg.detector, cfg.detector_train,
                                              derive_seed(seed, {2}), file_log(path("logs/detector.log"))));
      if (dir) handdet::save_detector(*dir / "detector.ckpt", *s1.detector, 0);
    }

    std::map<std::string, std::array<std::vector<ClipFeatures>, 3>> feature_sets;
    for (const auto& preset : presets) {
      const PipelineConfig pc = apply_experiment_preset(cfg, preset);
      const std::string fkey = std::string(to_string(pc.features.mode)) + "-" + to_string(pc.features.boxes);
      if (!feature_sets.contains(fkey)) {
        say(progress, "[seed " + std::to_string(seed) + "] extracting " + fkey + " features");
        handdet::DetectorModel* det = s1.detector ? &*s1.detector : nullptr;
        const int stride = cfg.synth.image_stride;
        auto& fs = feature_sets[fkey];
        fs[0] = extract_features(src_train, *s1.extractor, det, pc.features, stride);
        fs[1] = extract_features(tgt_train, *s1.extractor, det, pc.features, stride);
        fs[2] = extract_features(tgt_test, *s1.extractor, det, pc.features, stride);
        if (dir) {
          std::vector<ClipFeatures> all;
          std::map<std::string, std::string> splits;
          for (int k = 0; k < 3; ++k) {
            for (const auto& c : fs[static_cast<std::size_t>(k)]) {
              all.push_back(c);
              splits[c.id] = k == 0 ? "train" : (k == 1 ? "train" : "test");
            }
          }
          write_feature_cache(*dir / "features" / fkey, all, splits);
        }
      }
      const auto& fs = feature_sets.at(fkey);

      say(progress, "[seed " + std::to_string(seed) + "] training action model (" + preset + ")");
      auto trained = train_da_model(fs[0], fs[1], pc.ta3n, pc.ta3n_train, derive_seed(seed, {3}),
                                    file_log(path("logs/" + preset + ".log")));
      const auto predictions = predict_all(trained.model, fs[2], cfg.eval_seed);
      const MetricsReport metrics = evaluate(predictions, s1.actions.sidecar);
      if (dir) {
        ta3n::save_model(*dir / preset / "ta3n.ckpt", trained.model, trained.step);
        write_predictions(*dir / preset / "predictions.txt", predictions);
        write_metrics(*dir / preset / "metrics.txt", metrics);
      }
      say(progress, "[seed " + std::to_string(seed) + "] " + preset +
                        " target action@1 = " + text::format_double(metrics.action_top1));
      report.rows.push_back({preset, seed, metrics});
      per_preset[preset].push_back(metrics);
    }
  }
  for (const auto& [preset, reports] : per_preset) report.means[preset] = mean_report(reports);
  if (out) write_experiment_report(*out, report);
  return report;
}

std::string render_experiment_table(const ExperimentReport& report) {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (const auto& r : report.rows) rows.emplace_back(r.preset + " seed=" + std::to_string(r.seed), r.target_test);
  for (const auto& [preset, m] : report.means) rows.emplace_back(preset + " mean", m);
  return render_metrics_table(rows);
}

void write_experiment_report(const std::filesystem::path& dir, const ExperimentReport& report) {
  io::KeyValues kv;
  auto put = [&](const std::string& prefix, const MetricsReport& m) {
    kv[prefix + ".verb_top1"] = text::format_double(m.verb_top1);
    kv[prefix + ".verb_top5"] = text::format_double(m.verb_top5);
    kv[prefix + ".noun_top1"] = text::format_double(m.noun_top1);
    kv[prefix + ".noun_top5"] = text::format_double(m.noun_top5);
    kv[prefix + ".action_top1"] = text::format_double(m.action_top1);
    kv[prefix + ".action_top5"] = text::format_double(m.action_top5);
  };
  for (const auto& r : report.rows) put(r.preset + ".seed" + std::to_string(r.seed), r.target_test);
  for (const auto& [preset, m] : report.means) put(preset + ".mean", m);
  io::atomic_write(dir / "report.txt", [&](std::ostream& out) { out << io::format_key_values(kv); });
  io::atomic_write(dir / "report_table.txt", [&](std::ostream& out) { out << render_experiment_table(report); });
}

DetectorComparison compare_detectors(const PipelineConfig& base, std::span<const std::uint64_t> seeds,
                                     std::ostream* progress) {
  DetectorComparison out;
  for (std::uint64_t seed : seeds) {
    const PipelineConfig cfg = reseeded(base, seed);
    cfg.validate();
    const auto data = synth::gen_detector_dataset(cfg.synth);
    const auto src = select(data.records, synth::DomainLabel::source, "train");
    const auto tgt = select(data.records, synth::DomainLabel::target, "train");
    const auto test = select(data.records, synth::DomainLabel::target, "test");
    const double thr = cfg.features.confidence_threshold;
    const auto max_det = static_cast<std::size_t>(cfg.features.max_detections);

    say(progress, "[seed " + std::to_string(seed) + "] adapted detector");
    auto adapted = train_hand_detector(src, tgt, cfg.detector, cfg.detector_train, derive_seed(seed, {2}));
    out.adapted.push_back(detector_mean_iou(adapted, test, data.sidecar, thr, max_det));

    say(progress, "[seed " + std::to_string(seed) + "] source-only detector");
    handdet::DetectorConfig plain = cfg.detector;
    plain.mu = 0.0;
    auto source_only = train_hand_detector(src, {}, plain, cfg.detector_train, derive_seed(seed, {2}));
    out.source_only.push_back(detector_mean_iou(source_only, test, data.sidecar, thr, max_det));
    say(progress, "[seed " + std::to_string(seed) + "] mean IoU adapted=" + text::format_double(out.adapted.back()) +
                      " source_only=" + text::format_double(out.source_only.back()));
  }
  return out;
}

}  // namespace handda::pipeline
