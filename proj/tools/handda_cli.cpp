#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "handda/pipeline.hpp"

namespace fs = std::filesystem;
using namespace handda;

namespace {

struct Globals {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::string out = "handda_out";
  std::string preset = "desk-scale";

  [[nodiscard]] pipeline::PipelineConfig load() const {
    return pipeline::load_config(preset, config ? std::optional<fs::path>(*config) : std::nullopt, seed);
  }
};

template <typename Record>
std::vector<const Record*> pick(const std::vector<Record>& records, std::optional<synth::DomainLabel> domain,
                                const std::string& split) {
  std::vector<const Record*> out;
  for (const auto& r : records) {
    if ((!domain || r.domain == *domain) && (split.empty() || r.split == split)) out.push_back(&r);
  }
  return out;
}

pipeline::LogSink stream_log(std::ostream& out) {
  return [&out](const pipeline::EpochLog& e) { pipeline::write_log_line(out, e); };
}

std::map<std::string, ta3n::ActionLabel> read_label_sidecar(const fs::path& path) {
  std::map<std::string, ta3n::ActionLabel> out;
  for (const auto& e : synth::read_manifest(path)) {
    if (auto l = synth::parse_action_label(e.label)) out[e.id] = *l;
  }
  return out;
}

std::vector<ta3n::ClipFeatures> cache_split(const pipeline::FeatureCache& cache, synth::DomainLabel domain,
                                            const std::string& split) {
  std::vector<ta3n::ClipFeatures> out;
  for (const auto& c : cache.clips) {
    if (c.domain == domain && (split.empty() || cache.splits.at(c.id) == split)) out.push_back(c);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hand-centric domain-adaptive action recognition on a synthetic benchmark"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key=value config file applied on top of the preset");
  app.add_option("--seed", g.seed, "seed override (also reseeds the synthetic data)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--preset", g.preset, "config preset: desk-scale or paper-scale")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic clip and detector datasets");

  auto* train_ext = app.add_subcommand("train-extractor", "stage 1: train the feature extractor on source clips");
  std::string clips_dir;
  train_ext->add_option("--data", clips_dir, "clip dataset directory")->required();

  auto* train_det = app.add_subcommand("train-detector", "stage 1: train the domain-adaptive hand detector");
  std::string images_dir;
  bool source_only_detector = false;
  train_det->add_option("--data", images_dir, "detector image dataset directory")->required();
  train_det->add_flag("--source-only", source_only_detector, "train without target images (mu = 0)");

  auto* extract = app.add_subcommand("extract-features", "compute the per-frame feature cache");
  std::string extractor_ckpt, detector_ckpt, feature_mode, box_source;
  extract->add_option("--data", clips_dir, "clip dataset directory")->required();
  extract->add_option("--extractor", extractor_ckpt, "extractor checkpoint")->required();
  extract->add_option("--detector", detector_ckpt, "detector checkpoint");
  extract->add_option("--mode", feature_mode, "hand_centric or raw");
  extract->add_option("--boxes", box_source, "detector, ground_truth or none");

  auto* train_da = app.add_subcommand("train-da", "stage 2: train the domain-adaptive action model");
  std::string features_dir, resume_ckpt, experiment_preset;
  train_da->add_option("--features", features_dir, "feature cache directory")->required();
  train_da->add_option("--resume", resume_ckpt, "continue from this checkpoint");
  train_da->add_option("--experiment", experiment_preset, "full_da, source_only or raw_features");

  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on the target test split");
  std::vector<std::string> checkpoints;
  std::string sidecar, predictions_file;
  eval->add_option("--features", features_dir, "feature cache directory");
  eval->add_option("--checkpoint", checkpoints, "action model checkpoint");
  eval->add_option("--predictions", predictions_file, "score an existing prediction file instead");
  eval->add_option("--labels", sidecar, "evaluation sidecar of the clip dataset")->required();

  auto* ens = app.add_subcommand("ensemble", "average the predictions of several checkpoints");
  ens->add_option("--features", features_dir, "feature cache directory")->required();
  ens->add_option("--checkpoint", checkpoints, "action model checkpoints")->required();
  ens->add_option("--labels", sidecar, "evaluation sidecar; when given, metrics are written too");

  auto* exp = app.add_subcommand("run-experiment", "end-to-end comparison over presets and seeds");
  std::vector<std::string> presets = pipeline::experiment_preset_names();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  exp->add_option("--experiments", presets, "experiment presets")->capture_default_str();
  exp->add_option("--seeds", seeds, "seeds")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const pipeline::PipelineConfig cfg = g.load();
    const fs::path out = g.out;
    fs::create_directories(out);

    if (*gen) {
      pipeline::write_config(out / "config.txt", cfg);
      synth::write_action_dataset(out / "clips", synth::gen_action_dataset(cfg.synth));
      synth::write_detector_dataset(out / "images", synth::gen_detector_dataset(cfg.synth));
      std::cout << "wrote " << (out / "clips").string() << " and " << (out / "images").string() << '\n';
    } else if (*train_ext) {
      const auto data = synth::read_action_dataset(clips_dir);
      const auto clips = pick(data.records, synth::DomainLabel::source, "train");
      auto model = pipeline::train_feature_extractor(clips, cfg.extractor, cfg.extractor_train, cfg.synth.num_verbs,
                                                     cfg.synth.num_nouns, cfg.synth.image_stride, cfg.seed,
                                                     stream_log(std::cout));
      pipeline::save_extractor(out / "extractor.ckpt", model, static_cast<std::uint64_t>(cfg.extractor_train.epochs));
    } else if (*train_det) {
      const auto data = synth::read_detector_dataset(images_dir);
      const auto src = pick(data.records, synth::DomainLabel::source, "train");
      const auto tgt = source_only_detector ? std::vector<const synth::SynthImageRecord*>{}
                                            : pick(data.records, synth::DomainLabel::target, "train");
      auto det_cfg = cfg.detector;
      if (source_only_detector) det_cfg.mu = 0.0;
      auto model = pipeline::train_hand_detector(src, tgt, det_cfg, cfg.detector_train, cfg.seed, stream_log(std::cout));
      handdet::save_detector(out / "detector.ckpt", model, static_cast<std::uint64_t>(cfg.detector_train.epochs));
      const auto test = pick(data.records, synth::DomainLabel::target, "test");
      if (!test.empty()) {
        std::cout << "target test mean IoU = "
                  << pipeline::detector_mean_iou(model, test, data.sidecar, cfg.features.confidence_threshold,
                                                 static_cast<std::size_t>(cfg.features.max_detections))
                  << '\n';
      }
    } else if (*extract) {
      auto settings = cfg.features;
      if (!feature_mode.empty()) settings.mode = pipeline::parse_feature_mode(feature_mode);
      if (!box_source.empty()) settings.boxes = pipeline::parse_box_source(box_source);
      const auto data = synth::read_action_dataset(clips_dir);
      auto extractor = pipeline::load_extractor(extractor_ckpt);
      std::optional<handdet::DetectorModel> detector;
      if (!detector_ckpt.empty()) detector.emplace(handdet::load_detector(detector_ckpt));
      const auto clips = pick(data.records, std::nullopt, "");
      const auto features = pipeline::extract_features(clips, extractor, detector ? &*detector : nullptr, settings,
                                                       cfg.synth.image_stride);
      std::map<std::string, std::string> splits;
      for (const auto* c : clips) splits[c->id] = c->split;
      pipeline::write_feature_cache(out / "features", features, splits);
      if (detector && settings.boxes == pipeline::BoxSource::detector) {
        handdet::DetectionTable table;
        for (const auto* c : clips) {
          for (std::size_t t = 0; t < c->frames.size(); ++t) {
            table[c->id + "/" + std::to_string(t)] =
                handdet::detect(*detector, c->frames[t], settings.confidence_threshold,
                                static_cast<std::size_t>(settings.max_detections));
          }
        }
        handdet::write_detections(out / "detections.txt", table);
      }
      std::cout << "cached " << features.size() << " clips in " << (out / "features").string() << '\n';
    } else if (*train_da) {
      const auto run_cfg = experiment_preset.empty() ? cfg : pipeline::apply_experiment_preset(cfg, experiment_preset);
      const auto cache = pipeline::read_feature_cache(features_dir);
      const auto source = cache_split(cache, synth::DomainLabel::source, "train");
      const auto target = pipeline::strip_labels(cache_split(cache, synth::DomainLabel::target, "train"));
      std::optional<ta3n::LoadedModel> resumed;
      if (!resume_ckpt.empty()) resumed.emplace(ta3n::load_model(resume_ckpt));
      std::optional<pipeline::DaResume> resume;
      if (resumed) resume = pipeline::DaResume{&resumed->model, resumed->step};
      auto result = pipeline::train_da_model(source, target, run_cfg.ta3n, run_cfg.ta3n_train, run_cfg.seed,
                                             stream_log(std::cout), resume);
      ta3n::save_model(out / "ta3n.ckpt", result.model, result.step);
      std::cout << "saved " << (out / "ta3n.ckpt").string() << " at step " << result.step << '\n';
    } else if (*eval || *ens) {
      std::vector<pipeline::PredictionRecord> predictions;
      if (!predictions_file.empty()) {
        predictions = pipeline::read_predictions(predictions_file);
      } else {
        if (features_dir.empty() || checkpoints.empty()) {
          throw std::invalid_argument("--features and --checkpoint are required without --predictions");
        }
        const auto cache = pipeline::read_feature_cache(features_dir);
        const auto test = cache_split(cache, synth::DomainLabel::target, "test");
        std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
        predictions = pipeline::ensemble_predict(paths, test, cfg.eval_seed);
        pipeline::write_predictions(out / "predictions.txt", predictions);
      }
      if (!sidecar.empty()) {
        const auto report = pipeline::evaluate(predictions, read_label_sidecar(sidecar));
        pipeline::write_metrics(out / "metrics.txt", report);
        std::cout << pipeline::render_metrics_table({{"target test", report}});
      }
    } else if (*exp) {
      const auto report = pipeline::run_experiment(cfg, presets, seeds, out, &std::cerr);
      std::cout << pipeline::render_experiment_table(report);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
