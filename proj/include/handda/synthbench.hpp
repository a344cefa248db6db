#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "handda/handfeat.hpp"
#include "handda/image.hpp"
#include "handda/io.hpp"
#include "handda/random.hpp"
#include "handda/ta3n.hpp"

namespace handda::synth {

using adversarial::DomainLabel;
using handfeat::BoundingBox;
using handfeat::FeatureMap;
using ta3n::ActionLabel;

const char* to_string(DomainLabel d);
DomainLabel parse_domain(const std::string& text);

struct SynthConfig {
  std::uint64_t seed = 1;
  int num_verbs = 4;
  int num_nouns = 5;
  int clips_per_domain = 240;
  int frames = 8;
  int channels = 8;  // per modality
  int map_size = 8;  // H = W of the feature maps
  int image_stride = 4;
  double hand_box_min = 8.0;  // pixels
  double hand_box_max = 12.0;
  int clip_distractors = 3;
  double distractor_box_min = 8.0;
  double distractor_box_max = 14.0;
  double noise = 0.2;  // sigma of the feature-map noise
  double signal = 1.0;
  bool shift_enabled = true;
  double shift_scale_min = 0.8;
  double shift_scale_max = 1.2;
  double shift_offset = 1.0;
  bool shift_permute = false;
  int detector_images_per_domain = 120;
  int detector_distractors = 2;
  double image_noise = 0.03;
  double target_brightness = 0.3;
  double target_contrast = 0.7;
  double target_texture = 0.08;
  std::array<double, 3> split_fractions{0.5, 0.1, 0.4};

  [[nodiscard]] int image_size() const { return map_size * image_stride; }
  void validate() const;
  [[nodiscard]] io::KeyValues to_key_values() const;
  static SynthConfig from_key_values(const io::KeyValues& kv);
};

/// Per-class signal vectors: one appearance prototype per noun and a
/// start/end direction pair per verb (the verb's motion runs linearly from
/// start to end over the clip).
struct ClassBank {
  std::vector<std::vector<double>> noun_prototypes;
  std::vector<std::vector<double>> verb_start;
  std::vector<std::vector<double>> verb_end;
};

/// Verb motion vector at frame t of a T-frame clip.
std::vector<double> verb_motion(const ClassBank& bank, int verb, int t, int frames);

/// Per-modality affine feature shift applied to target maps:
/// x'_c = scale_c · x_{perm(c)} + offset_c.
struct FeatureShift {
  std::vector<double> scale;
  std::vector<double> offset;
  std::vector<int> permutation;

  void apply(FeatureMap& map) const;
};

struct DomainShift {
  bool enabled = false;
  FeatureShift rgb;
  FeatureShift flow;
};

ClassBank make_class_bank(const SynthConfig& cfg);
DomainShift make_domain_shift(const SynthConfig& cfg);

struct SynthClipRecord {
  std::string id;
  DomainLabel domain = DomainLabel::source;
  std::string split = "train";
  std::optional<ActionLabel> label;
  std::vector<FeatureMap> rgb;   // one per frame, RGB role
  std::vector<FeatureMap> flow;  // one per frame, flow role
  std::vector<BoundingBox> hand_boxes;  // image frame, one per frame
  std::vector<Image> frames;     // rendered detector view of every frame
};

/// Clips plus the sealed evaluation sidecar (labels of every record).
struct ActionDataset {
  std::vector<SynthClipRecord> records;
  std::map<std::string, ActionLabel> sidecar;
};

/// Builds one clip from an explicit substream seed. Clips built from the same
/// (label, stream_seed) differ across domains only through the domain style.
SynthClipRecord make_clip(const SynthConfig& cfg, const ClassBank& bank, const DomainShift& shift,
                          DomainLabel domain, std::string id, ActionLabel label, std::uint64_t stream_seed);

/// clips_per_domain clips per domain, labels cycling through every (verb,
/// noun) pair, split by split_fractions. Target records carry no label; the
/// sidecar holds all labels.
ActionDataset gen_action_dataset(const SynthConfig& cfg);

struct SynthImageRecord {
  std::string id;
  DomainLabel domain = DomainLabel::source;
  std::string split = "train";
  Image image;
  std::optional<std::vector<BoundingBox>> boxes;  // source only
};

struct DetectorDataset {
  std::vector<SynthImageRecord> records;
  std::map<std::string, std::vector<BoundingBox>> sidecar;
};

/// Renders one grayscale scene: textured hand blobs and flat distractor
/// blobs on a smooth background, in the style of `domain`.
Image render_scene(const SynthConfig& cfg, DomainLabel domain, std::span<const BoundingBox> hands,
                   std::span<const BoundingBox> distractors, Rng& rng);

/// 1-2 hands plus detector_distractors distractors per image.
DetectorDataset gen_detector_dataset(const SynthConfig& cfg);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// Partitions record indices by fractions (train, validation, test),
/// stratified by `strata` (records sharing a key are split together, with
/// per-stratum counts from largest-remainder rounding). Deterministic in seed.
Split split_dataset(std::span<const std::string> strata, std::array<double, 3> fractions, std::uint64_t seed);

// On-disk layout: <dir>/manifest.txt, <dir>/eval_sidecar.txt, <dir>/payload/<id>.bin
// Manifest lines: id \t domain \t split \t label-or-"-" \t payload-path

struct ManifestEntry {
  std::string id;
  DomainLabel domain = DomainLabel::source;
  std::string split;
  std::string label;  // "-" when absent
  std::string payload;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

std::string format_action_label(const std::optional<ActionLabel>& label);
std::optional<ActionLabel> parse_action_label(const std::string& text);
std::string format_boxes(const std::optional<std::vector<BoundingBox>>& boxes);
std::optional<std::vector<BoundingBox>> parse_boxes(const std::string& text);

void write_action_dataset(const std::filesystem::path& dir, const ActionDataset& data);
ActionDataset read_action_dataset(const std::filesystem::path& dir);
void write_detector_dataset(const std::filesystem::path& dir, const DetectorDataset& data);
DetectorDataset read_detector_dataset(const std::filesystem::path& dir);

/// Construction check: fraction of the label-aligned energy (squared
/// projection of every cell onto the clip's noun prototype for RGB, and onto
/// the verb motion for flow) located inside the hand box.
double signal_locality(const SynthClipRecord& clip, const ClassBank& bank, const SynthConfig& cfg,
                       ActionLabel label);

}  // namespace handda::synth
