#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "handda/handdet.hpp"
#include "handda/nn/optim.hpp"
#include "handda/handfeat.hpp"
#include "handda/synthbench.hpp"
#include "handda/ta3n.hpp"

namespace handda::pipeline {

using adversarial::Distribution;
using ta3n::ActionLabel;
using ta3n::ClipFeatures;

// ---------------------------------------------------------------------------
// Configuration

struct TrainSchedule {
  nn::OptimizerKind optimizer = nn::OptimizerKind::sgd;
  double learning_rate = 0.01;
  double decay_factor = 0.1;
  int decay_interval = 20;  // epochs
  int epochs = 60;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 16;

  void validate() const;
  [[nodiscard]] double rate_at(int epoch) const;
  [[nodiscard]] nn::OptimizerSettings optimizer_settings() const;
  [[nodiscard]] io::KeyValues to_key_values() const;
  static TrainSchedule from_key_values(const io::KeyValues& kv);
};

struct ExtractorConfig {
  int feature_channels = 16;  // per modality
  /// Train through context + mean over the annotated hand cells rather than
  /// context alone.
  bool hand_pooling = true;

  void validate() const;
};

enum class FeatureMode { hand_centric, raw };
enum class BoxSource { detector, ground_truth, none };

const char* to_string(FeatureMode m);
FeatureMode parse_feature_mode(const std::string& text);
const char* to_string(BoxSource b);
BoxSource parse_box_source(const std::string& text);

struct FeatureSettings {
  FeatureMode mode = FeatureMode::hand_centric;
  BoxSource boxes = BoxSource::detector;
  double confidence_threshold = 0.5;
  int max_detections = 4;
  int roi_size = 7;
  int roi_samples = 2;

  void validate() const;
};

/// Everything an end-to-end run needs. The file form is flat key=value with
/// section prefixes: synth.*, extractor.*, extractor_train.*, detector.*,
/// detector_train.*, features.*, ta3n.*, ta3n_train.*, plus seed and
/// eval_seed.
struct PipelineConfig {
  std::uint64_t seed = 1;
  std::uint64_t eval_seed = 7;
  synth::SynthConfig synth;
  ExtractorConfig extractor;
  TrainSchedule extractor_train;
  handdet::DetectorConfig detector;
  TrainSchedule detector_train;
  FeatureSettings features;
  ta3n::TA3NConfig ta3n;
  TrainSchedule ta3n_train;

  void validate() const;
  [[nodiscard]] io::KeyValues to_key_values() const;
  /// Applies the keys present in `kv` on top of this config. Unknown keys
  /// are rejected.
  void apply(const io::KeyValues& kv);
};

/// "desk-scale" (default) or "paper-scale".
PipelineConfig preset_config(const std::string& name);
std::vector<std::string> config_preset_names();

/// Preset values, then the file (if any), then the seed override (which
/// also reseeds the synthetic data).
PipelineConfig load_config(const std::string& preset, const std::optional<std::filesystem::path>& file,
                           std::optional<std::uint64_t> seed);
void write_config(const std::filesystem::path& path, const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// Stage 1: feature extractor

/// Per-modality 1×1 convolution + ReLU applied to synthetic feature maps,
/// trained through pooling and linear verb/noun heads.
class Extractor {
 public:
  Extractor(int in_channels, const ExtractorConfig& cfg, int num_verbs, int num_nouns, std::uint64_t init_seed);

  [[nodiscard]] nn::ParameterList parameters();
  [[nodiscard]] int in_channels() const { return in_channels_; }
  [[nodiscard]] int feature_channels() const { return cfg_.feature_channels; }
  [[nodiscard]] int num_verbs() const { return num_verbs_; }
  [[nodiscard]] int num_nouns() const { return num_nouns_; }

  /// Cells of all maps stacked as rows ((N·H·W)×C) → relu(x·W + b).
  nn::Var project(nn::Tape& tape, bool flow, nn::Var cells);
  handfeat::FeatureMap project(bool flow, const handfeat::FeatureMap& map);

  nn::Linear rgb;
  nn::Linear flow;
  nn::Linear verb_head;
  nn::Linear noun_head;

 private:
  ExtractorConfig cfg_;
  int in_channels_, num_verbs_, num_nouns_;
};

void save_extractor(const std::filesystem::path& path, Extractor& model, std::uint64_t step);
Extractor load_extractor(const std::filesystem::path& path);

struct EpochLog {
  int epoch = 0;
  double learning_rate = 0.0;
  std::map<std::string, double> losses;
};
using LogSink = std::function<void(const EpochLog&)>;

/// Writes "epoch=<e> lr=<lr> <name>=<value>..." lines.
void write_log_line(std::ostream& out, const EpochLog& log);

Extractor train_feature_extractor(std::span<const synth::SynthClipRecord* const> clips,
                                  const ExtractorConfig& cfg, const TrainSchedule& schedule, int num_verbs,
                                  int num_nouns, int image_stride, std::uint64_t seed, const LogSink& log = {});

// ---------------------------------------------------------------------------
// Stage 1: hand detector

struct ImagePair {
  const synth::SynthImageRecord* source;
  const synth::SynthImageRecord* target;  // null for source-only training
};

/// Every source image is paired with `reuse` target images drawn in a
/// seeded round-robin over a shuffled target list.
std::vector<ImagePair> make_image_pairs(std::span<const synth::SynthImageRecord* const> source,
                                        std::span<const synth::SynthImageRecord* const> target, int reuse,
                                        std::uint64_t seed);

/// Called after each optimizer step with the step index and parameters
/// holding that step's gradients (before the update).
using GradientProbe = std::function<void(std::uint64_t step, const nn::ParameterList& params)>;

handdet::DetectorModel train_hand_detector(std::span<const synth::SynthImageRecord* const> source,
                                           std::span<const synth::SynthImageRecord* const> target,
                                           const handdet::DetectorConfig& cfg, const TrainSchedule& schedule,
                                           std::uint64_t seed, const LogSink& log = {},
                                           const GradientProbe& probe = {}, int pair_reuse = 2);

/// Mean pixel-mask IoU of detections against ground truth.
double detector_mean_iou(handdet::DetectorModel& model, std::span<const synth::SynthImageRecord* const> images,
                         const std::map<std::string, std::vector<handfeat::BoundingBox>>& truth,
                         double confidence_threshold, std::size_t max_detections);

// ---------------------------------------------------------------------------
// Feature extraction and cache

/// Per-frame feature vector: hand-centric (or raw global) RGB followed by flow.
/// Values are rounded to binary32 so the cache round-trips exactly.
ClipFeatures extract_clip(const synth::SynthClipRecord& clip, Extractor& extractor,
                          handdet::DetectorModel* detector, const FeatureSettings& settings, int image_stride);

std::vector<ClipFeatures> extract_features(std::span<const synth::SynthClipRecord* const> clips,
                                           Extractor& extractor, handdet::DetectorModel* detector,
                                           const FeatureSettings& settings, int image_stride);

/// Cache layout mirrors the dataset manifest: <dir>/manifest.txt plus one
/// T×D array per clip under <dir>/payload/.
void write_feature_cache(const std::filesystem::path& dir, std::span<const ClipFeatures> clips,
                         const std::map<std::string, std::string>& splits);
struct FeatureCache {
  std::vector<ClipFeatures> clips;
  std::map<std::string, std::string> splits;
};
FeatureCache read_feature_cache(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Stage 2: domain-adaptive action model

struct DaTrainResult {
  ta3n::Model model;
  std::uint64_t step;
};

struct DaResume {
  const ta3n::Model* model;
  std::uint64_t step;
};

/// Trains on labelled source clips and unlabelled target clips. Steps per
/// epoch = ceil(|source| / batch); the target side cycles through its own
/// shuffled order. With `resume`, training continues from the given step
/// until schedule.epochs complete.
DaTrainResult train_da_model(std::span<const ClipFeatures> source, std::span<const ClipFeatures> target,
                             const ta3n::TA3NConfig& cfg, const TrainSchedule& schedule, std::uint64_t seed,
                             const LogSink& log = {}, std::optional<DaResume> resume = std::nullopt,
                             const GradientProbe& probe = {});

/// Drops every label from the given clips.
std::vector<ClipFeatures> strip_labels(std::span<const ClipFeatures> clips);

// ---------------------------------------------------------------------------
// Predictions and metrics

struct PredictionRecord {
  std::string id;
  Distribution verb;
  Distribution noun;
};

std::vector<PredictionRecord> predict_all(ta3n::Model& model, std::span<const ClipFeatures> clips,
                                          std::uint64_t eval_seed);

/// Per clip, the arithmetic mean over models of the verb and of the noun
/// distributions, evaluated as p_0 + Σ_m (p_m − p_0)/M so identical inputs
/// reproduce p_0 exactly.
std::vector<PredictionRecord> ensemble_mean(std::span<const std::vector<PredictionRecord>> per_model);
std::vector<PredictionRecord> ensemble_predict(std::span<const std::filesystem::path> checkpoints,
                                               std::span<const ClipFeatures> clips, std::uint64_t eval_seed);

// Prediction file: one line per clip, "<id>\t<p_verb,...>\t<p_noun,...>".
void write_predictions(const std::filesystem::path& path, std::span<const PredictionRecord> records);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

struct MetricsReport {
  double verb_top1 = 0.0;
  double verb_top5 = 0.0;
  double noun_top1 = 0.0;
  double noun_top5 = 0.0;
  double action_top1 = 0.0;
  double action_top5 = 0.0;
  std::size_t clips = 0;

  bool operator==(const MetricsReport&) const = default;
};

/// True when class `truth` is among the k highest entries of `probs`, ties
/// broken by ascending index.
bool in_top_k(std::span<const double> probs, int truth, int k);
/// Same, for the pair (verb, noun) under joint score p_v·p_n; pairs are
/// ordered by v·K_n + n for ties.
bool action_in_top_k(const Distribution& verb, const Distribution& noun, ActionLabel truth, int k);

MetricsReport evaluate(std::span<const PredictionRecord> predictions, const std::map<std::string, ActionLabel>& truth);

void write_metrics(const std::filesystem::path& path, const MetricsReport& report);
MetricsReport read_metrics(const std::filesystem::path& path);
std::string render_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows);

// ---------------------------------------------------------------------------
// End-to-end runs

struct ExperimentRow {
  std::string preset;
  std::uint64_t seed = 0;
  MetricsReport target_test;
};

struct ExperimentReport {
  std::vector<ExperimentRow> rows;
  /// Per preset, the mean of every metric across seeds.
  std::map<std::string, MetricsReport> means;
};

/// Experiment presets: "full_da", "source_only", "raw_features".
std::vector<std::string> experiment_preset_names();
/// Applies an experiment preset to a pipeline config.
PipelineConfig apply_experiment_preset(PipelineConfig cfg, const std::string& preset);

/// For every seed: generate data, train the extractor and detector, extract
/// features, train the action model per preset and evaluate on the target
/// test split. Stage-1 artifacts are shared across presets of a seed.
/// When `out` is set, every artifact and report is written below it.
ExperimentReport run_experiment(const PipelineConfig& base, std::span<const std::string> presets,
                                std::span<const std::uint64_t> seeds,
                                const std::optional<std::filesystem::path>& out = std::nullopt,
                                std::ostream* progress = nullptr);

void write_experiment_report(const std::filesystem::path& dir, const ExperimentReport& report);
std::string render_experiment_table(const ExperimentReport& report);

struct DetectorComparison {
  std::vector<double> adapted;      // per seed, mean IoU on target test images
  std::vector<double> source_only;  // per seed, mu = 0
};

/// Trains the detector with the configured mu and with mu = 0 for each seed
/// and scores both on the target test split.
DetectorComparison compare_detectors(const PipelineConfig& base, std::span<const std::uint64_t> seeds,
                                     std::ostream* progress = nullptr);

}  // namespace handda::pipeline
