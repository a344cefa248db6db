#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "handda/pipeline.hpp"
#include "handda/text.hpp"

namespace handda::pipeline {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("config: " + what);
}

io::KeyValues extractor_kv(const ExtractorConfig& c) {
  return {{"feature_channels", std::to_string(c.feature_channels)}, {"hand_pooling", c.hand_pooling ? "true" : "false"}};
}

ExtractorConfig extractor_from_kv(const io::KeyValues& kv) {
  ExtractorConfig c;
  text::get(kv, "feature_channels", c.feature_channels);
  text::get(kv, "hand_pooling", c.hand_pooling);
  return c;
}

io::KeyValues features_kv(const FeatureSettings& f) {
  return {
      {"mode", to_string(f.mode)},
      {"boxes", to_string(f.boxes)},
      {"confidence_threshold", text::format_double(f.confidence_threshold)},
      {"max_detections", std::to_string(f.max_detections)},
      {"roi_size", std::to_string(f.roi_size)},
      {"roi_samples", std::to_string(f.roi_samples)},
  };
}

FeatureSettings features_from_kv(const io::KeyValues& kv) {
  FeatureSettings f;
  std::string s;
  if (text::get(kv, "mode", s)) f.mode = parse_feature_mode(s);
  if (text::get(kv, "boxes", s)) f.boxes = parse_box_source(s);
  text::get(kv, "confidence_threshold", f.confidence_threshold);
  text::get(kv, "max_detections", f.max_detections);
  text::get(kv, "roi_size", f.roi_size);
  text::get(kv, "roi_samples", f.roi_samples);
  return f;
}

void put_section(io::KeyValues& out, const std::string& prefix, const io::KeyValues& section) {
  for (const auto& [k, v] : section) out[prefix + "." + k] = v;
}

/// Overlays `updates` on `current`, rejecting keys `current` does not have.
io::KeyValues overlay(const std::string& prefix, io::KeyValues current, const io::KeyValues& updates) {
  for (const auto& [k, v] : updates) {
    if (!current.contains(k)) throw std::invalid_argument("config: unknown key '" + prefix + "." + k + "'");
    current[k] = v;
  }
  return current;
}

}  // namespace

void TrainSchedule::validate() const {
  require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning rate must be positive");
  require(std::isfinite(decay_factor) && decay_factor > 0.0, "decay factor must be positive");
  require(decay_interval >= 1, "decay interval must be positive");
  require(epochs >= 1, "epochs must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  require(weight_decay >= 0.0, "weight decay must be non-negative");
  require(batch_size >= 1, "batch size must be positive");
}

double TrainSchedule::rate_at(int epoch) const {
  return nn::step_decay_lr(learning_rate, decay_factor, decay_interval, epoch);
}

nn::OptimizerSettings TrainSchedule::optimizer_settings() const {
  nn::OptimizerSettings s;
  s.kind = optimizer;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

io::KeyValues TrainSchedule::to_key_values() const {
  using text::format_double;
  return {
      {"optimizer", nn::to_string(optimizer)},
      {"learning_rate", format_double(learning_rate)},
      {"decay_factor", format_double(decay_factor)},
      {"decay_interval", std::to_string(decay_interval)},
      {"epochs", std::to_string(epochs)},
      {"momentum", format_double(momentum)},
      {"weight_decay", format_double(weight_decay)},
      {"batch_size", std::to_string(batch_size)},
  };
}

TrainSchedule TrainSchedule::from_key_values(const io::KeyValues& kv) {
  TrainSchedule s;
  std::string kind;
  if (text::get(kv, "optimizer", kind)) s.optimizer = nn::parse_optimizer_kind(kind);
  text::get(kv, "learning_rate", s.learning_rate);
  text::get(kv, "decay_factor", s.decay_factor);
  text::get(kv, "decay_interval", s.decay_interval);
  text::get(kv, "epochs", s.epochs);
  text::get(kv, "momentum", s.momentum);
  text::get(kv, "weight_decay", s.weight_decay);
  text::get(kv, "batch_size", s.batch_size);
  return s;
}

void ExtractorConfig::validate() const { require(feature_channels >= 1, "feature_channels must be positive"); }

const char* to_string(FeatureMode m) { return m == FeatureMode::raw ? "raw" : "hand_centric"; }

FeatureMode parse_feature_mode(const std::string& text) {
  if (text == "hand_centric") return FeatureMode::hand_centric;
  if (text == "raw") return FeatureMode::raw;
  throw std::invalid_argument("unknown feature mode: " + text);
}

const char* to_string(BoxSource b) {
  switch (b) {
    case BoxSource::detector:
      return "detector";
    case BoxSource::ground_truth:
      return "ground_truth";
    case BoxSource::none:
      return "none";
  }
  return "?";
}

BoxSource parse_box_source(const std::string& text) {
  if (text == "detector") return BoxSource::detector;
  if (text == "ground_truth") return BoxSource::ground_truth;
  if (text == "none") return BoxSource::none;
  throw std::invalid_argument("unknown box source: " + text);
}

void FeatureSettings::validate() const {
  require(confidence_threshold >= 0.0 && confidence_threshold <= 1.0, "confidence threshold must lie in [0,1]");
  require(max_detections >= 1, "max_detections must be positive");
  require(roi_size >= 1 && roi_samples >= 1, "RoI size and sampling must be positive");
}

void PipelineConfig::validate() const {
  synth.validate();
  extractor.validate();
  extractor_train.validate();
  detector.validate();
  detector_train.validate();
  features.validate();
  ta3n.validate();
  ta3n_train.validate();
  require(ta3n.input_dim == 2 * extractor.feature_channels,
          "ta3n.input_dim must equal 2 x extractor.feature_channels");
  require(ta3n.num_verbs == synth.num_verbs && ta3n.num_nouns == synth.num_nouns,
          "ta3n class counts must match synth class counts");
  require(ta3n.num_seg <= synth.frames, "ta3n.num_seg exceeds synth.frames");
  require(detector.image_size == synth.image_size(), "detector.image_size must equal synth map_size x image_stride");
}

io::KeyValues PipelineConfig::to_key_values() const {
  io::KeyValues kv{{"seed", std::to_string(seed)}, {"eval_seed", std::to_string(eval_seed)}};
  put_section(kv, "synth", synth.to_key_values());
  put_section(kv, "extractor", extractor_kv(extractor));
  put_section(kv, "extractor_train", extractor_train.to_key_values());
  put_section(kv, "detector", detector.to_key_values());
  put_section(kv, "detector_train", detector_train.to_key_values());
  put_section(kv, "features", features_kv(features));
  put_section(kv, "ta3n", ta3n.to_key_values());
  put_section(kv, "ta3n_train", ta3n_train.to_key_values());
  return kv;
}

void PipelineConfig::apply(const io::KeyValues& kv) {
  std::map<std::string, io::KeyValues> sections;
  for (const auto& [key, value] : kv) {
    if (key == "seed") {
      seed = text::parse_u64(key, value);
      continue;
    }
    if (key == "eval_seed") {
      eval_seed = text::parse_u64(key, value);
      continue;
    }
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw std::invalid_argument("config: unknown key '" + key + "'");
    sections[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }
  for (const auto& [name, updates] : sections) {
    if (name == "synth") {
      synth = synth::SynthConfig::from_key_values(overlay(name, synth.to_key_values(), updates));
    } else if (name == "extractor") {
      extractor = extractor_from_kv(overlay(name, extractor_kv(extractor), updates));
    } else if (name == "extractor_train") {
      extractor_train = TrainSchedule::from_key_values(overlay(name, extractor_train.to_key_values(), updates));
    } else if (name == "detector") {
      detector = handdet::DetectorConfig::from_key_values(overlay(name, detector.to_key_values(), updates));
    } else if (name == "detector_train") {
      detector_train = TrainSchedule::from_key_values(overlay(name, detector_train.to_key_values(), updates));
    } else if (name == "features") {
      features = features_from_kv(overlay(name, features_kv(features), updates));
    } else if (name == "ta3n") {
      ta3n = ta3n::TA3NConfig::from_key_values(overlay(name, ta3n.to_key_values(), updates));
    } else if (name == "ta3n_train") {
      ta3n_train = TrainSchedule::from_key_values(overlay(name, ta3n_train.to_key_values(), updates));
    } else {
      throw std::invalid_argument("config: unknown section '" + name + "'");
    }
  }
}

std::vector<std::string> config_preset_names() { return {"desk-scale", "paper-scale"}; }

PipelineConfig preset_config(const std::string& name) {
  PipelineConfig c;
  if (name == "desk-scale") {
    c.extractor.feature_channels = 16;
    c.extractor_train = {nn::OptimizerKind::sgd, 0.05, 0.1, 20, 12, 0.9, 5e-4, 16};
    c.detector_train = {nn::OptimizerKind::adam, 1e-3, 0.1, 40, 60, 0.9, 0.0, 8};
    c.ta3n.num_seg = 8;
    c.ta3n.feat_dim = 64;
    c.ta3n.input_dim = 32;
    c.ta3n_train = {nn::OptimizerKind::sgd, 0.01, 0.1, 10, 30, 0.9, 5e-4, 16};
  } else if (name == "paper-scale") {
    c.synth.frames = 20;
    c.extractor.feature_channels = 64;
    c.extractor_train = {nn::OptimizerKind::sgd, 0.01, 0.1, 20, 60, 0.9, 5e-4, 16};
    c.detector_train = {nn::OptimizerKind::adam, 1e-3, 0.1, 4, 10, 0.9, 0.0, 8};
    c.ta3n.num_seg = 20;
    c.ta3n.feat_dim = 1024;
    c.ta3n.input_dim = 128;
    c.ta3n.tuples_per_scale = 64;
    c.ta3n_train = {nn::OptimizerKind::sgd, 3e-3, 0.1, 10, 30, 0.9, 5e-4, 16};
  } else {
    throw std::invalid_argument("unknown config preset: " + name);
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::string& preset, const std::optional<std::filesystem::path>& file,
                           std::optional<std::uint64_t> seed) {
  PipelineConfig c = preset_config(preset);
  if (file) c.apply(io::read_key_values(*file));
  if (seed) {
    c.seed = *seed;
    c.synth.seed = *seed;
  }
  c.validate();
  return c;
}

void write_config(const std::filesystem::path& path, const PipelineConfig& cfg) {
  io::atomic_write(path, [&](std::ostream& out) { out << io::format_key_values(cfg.to_key_values()); });
}

}  // namespace handda::pipeline
