#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "handda/adversarial.hpp"
#include "handda/handfeat.hpp"
#include "handda/image.hpp"
#include "handda/io.hpp"
#include "handda/nn/layers.hpp"

namespace handda::handdet {

using handfeat::BoundingBox;

enum class UncertaintyMode {
  attention_on_certain,    // attention = 1 - u
  attention_on_uncertain,  // attention = u
  off,                     // attention = 1
};

const char* to_string(UncertaintyMode m);
UncertaintyMode parse_uncertainty_mode(const std::string& text);

struct DetectorConfig {
  int image_size = 32;
  /// Output channels of each stride-2 backbone level.
  std::vector<int> level_channels{8, 16, 16};
  /// Backbone level feeding the box head; the anchor grid stride follows from it.
  int head_level = 1;
  int head_channels = 16;
  int context_width = 4;  // per-level projection width
  int disc_hidden = 16;
  double anchor_size = 10.0;
  UncertaintyMode uncertainty = UncertaintyMode::attention_on_certain;
  adversarial::GrlConfig grl;
  double mu = 0.5;  // weight of the mean level domain loss

  [[nodiscard]] int num_levels() const { return static_cast<int>(level_channels.size()); }
  /// Spatial size of level i (stride-2 halving from the image).
  [[nodiscard]] int level_size(int level) const;
  [[nodiscard]] int anchor_stride() const { return image_size / level_size(head_level); }

  void validate() const;
  [[nodiscard]] io::KeyValues to_key_values() const;
  static DetectorConfig from_key_values(const io::KeyValues& kv);
};

/// Level feature extractors F_i, per-cell level domain classifiers D_i,
/// per-level context projections and the dense box head.
class DetectorModel {
 public:
  DetectorModel(const DetectorConfig& cfg, std::uint64_t init_seed);

  [[nodiscard]] const DetectorConfig& config() const { return cfg_; }
  [[nodiscard]] nn::ParameterList parameters();

  std::vector<nn::Linear> levels;         // conv kernels as (9·C_in)×C_out
  std::vector<nn::Mlp2> domain_classifiers;
  std::vector<nn::Linear> context_projections;
  nn::Linear head_conv;                   // 3×3 conv over head level + context
  nn::Linear head_out;                    // 1×1: objectness logit + 4 offsets

 private:
  DetectorConfig cfg_;
};

/// One level map as an (H·W)×C matrix in row-major cell order.
std::vector<nn::Var> backbone_forward(nn::Tape& tape, DetectorModel& model, const Image& image);
std::vector<handfeat::FeatureMap> backbone_forward(DetectorModel& model, const Image& image);

/// Per-level outputs of the domain classifiers for one image.
struct LevelDomainOutput {
  std::vector<nn::Var> logits;     // per level, cells × 2
  std::vector<double> uncertainty; // per level, mean cell entropy / ln 2
};

/// Runs every D_i on its level (through the GRL at `progress`).
LevelDomainOutput level_domain_outputs(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> maps,
                                       double progress);

/// L_i = mean cross-entropy over the cells of both images of a pair.
struct LevelLosses {
  std::vector<nn::Var> losses;
  std::vector<double> source_uncertainty;
  std::vector<double> target_uncertainty;
};

LevelLosses level_domain_losses(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> source_maps,
                                std::span<const nn::Var> target_maps, double progress);

/// Mean entropy of per-cell 2-way distributions divided by ln 2.
double cell_uncertainty(const nn::Matrix& cell_probs);

std::vector<double> uncertainty_attention(std::span<const double> u, UncertaintyMode mode);

/// Concatenation over levels of attention_i · (GAP(map_i)·P_i + b_i); 1 × (L·context_width).
nn::Var context_vectors(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> maps,
                        std::span<const double> attention);

/// Raw head output: cells × 5 (objectness logit, dx, dy, dw, dh).
nn::Var head_forward(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> maps, nn::Var context);

struct BoxPrediction {
  BoundingBox box;
  double confidence;
};

/// Anchor of grid cell `cell` (row-major) in image coordinates.
BoundingBox anchor_box(const DetectorConfig& cfg, int cell);
/// cx = ax + dx·a, cy = ay + dy·a, w = a·exp(dw), h = a·exp(dh), clipped to
/// the image; std::nullopt when the clipped box is empty.
std::optional<BoundingBox> decode_box(const DetectorConfig& cfg, int cell, double dx, double dy, double dw,
                                      double dh);

/// Greedy suppression of boxes with IoU > iou_threshold against an already
/// kept, higher-confidence box. Returns survivors sorted by confidence
/// descending (ties by input order), at most max_keep of them.
std::vector<BoxPrediction> suppress(std::vector<BoxPrediction> candidates, double iou_threshold,
                                    std::size_t max_keep);

std::vector<BoxPrediction> detect(DetectorModel& model, const Image& image, double confidence_threshold,
                                  std::size_t max_detections);

/// Per-cell training targets on the head grid.
struct HeadTargets {
  nn::Matrix objectness;     // cells × 1, 1 for positive cells
  nn::Matrix offsets;        // cells × 4
  std::vector<bool> positive;
};

/// A cell is positive when its anchor centre lies inside a ground-truth box;
/// among several such boxes the one with the nearest centre is regressed.
HeadTargets head_targets(const DetectorConfig& cfg, std::span<const BoundingBox> boxes);

struct StepLosses {
  nn::Var objectness;
  nn::Var regression;
  nn::Var detection;             // objectness + regression
  std::vector<nn::Var> level;    // empty without a target image
  nn::Var total;                 // detection + mu · mean_i L_i
};

/// Loss graph for one image pair. Without a target image the total is the
/// supervised detection loss alone.
StepLosses detector_step_losses(nn::Tape& tape, DetectorModel& model, const Image& source,
                                std::span<const BoundingBox> source_boxes, const Image* target, double progress);

/// Pixel-mask IoU between the union of predicted boxes and the union of
/// ground-truth boxes (pixel centres); 1 when both are empty.
double mask_iou(std::span<const BoundingBox> predicted, std::span<const BoundingBox> truth, int image_size);

/// Checkpoint container with kind "handdet".
void save_detector(const std::filesystem::path& path, DetectorModel& model, std::uint64_t step);
DetectorModel load_detector(const std::filesystem::path& path);

// Detection file: one line per image,
//   <id> [<x1> <y1> <x2> <y2> <confidence>]...
// whitespace separated; '#' lines are comments.
using DetectionTable = std::map<std::string, std::vector<BoxPrediction>>;
void write_detections(const std::filesystem::path& path, const DetectionTable& table);
DetectionTable read_detections(const std::filesystem::path& path);

}  // namespace handda::handdet
