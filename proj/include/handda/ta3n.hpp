#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "handda/adversarial.hpp"
#include "handda/io.hpp"
#include "handda/nn/layers.hpp"
#include "handda/random.hpp"

namespace handda::ta3n {

using adversarial::DomainLabel;
using adversarial::Distribution;

struct ActionLabel {
  int verb = 0;
  int noun = 0;
  bool operator==(const ActionLabel&) const = default;
};

/// Shape and loss-weight configuration of the domain-adaptive action model.
struct TA3NConfig {
  int num_seg = 8;     // frames per clip
  int feat_dim = 64;   // shared feature width
  int input_dim = 32;  // concatenated RGB + flow width
  int num_verbs = 4;
  int num_nouns = 5;
  std::vector<int> relation_scales{2, 3, 4};
  /// Tuples drawn per scale; std::nullopt enumerates all C(T, n).
  std::optional<int> tuples_per_scale;
  double lambda_spatial = 0.5;
  double lambda_relation = 0.5;
  double lambda_temporal = 0.5;
  double gamma = 0.01;  // attentive entropy weight
  int disc_hidden = 32;
  adversarial::GrlConfig grl;

  void validate() const;
  [[nodiscard]] io::KeyValues to_key_values() const;
  /// Reads keys without prefix ("num_seg", "feat_dim", ...); missing keys keep defaults.
  static TA3NConfig from_key_values(const io::KeyValues& kv);
};

/// Per-clip sequence of T frame vectors.
struct ClipFeatures {
  std::string id;
  nn::Matrix frames;  // T × input_dim
  DomainLabel domain = DomainLabel::source;
  std::optional<ActionLabel> label;
};

/// Named scalar losses of one batch.
struct LossBundle {
  double verb = 0.0;       // L_y^v
  double noun = 0.0;       // L_y^n
  double spatial = 0.0;    // L_sd
  double temporal = 0.0;   // L_td
  double ae_verb = 0.0;    // L_ae^v
  double ae_noun = 0.0;    // L_ae^n
  std::map<int, double> relation;  // scale -> L_rd^n

  bool operator==(const LossBundle&) const = default;
};

/// L_y^v + L_y^n + gamma (L_ae^v + L_ae^n) + lambda_s L_sd + lambda_r mean_n L_rd^n + lambda_t L_td.
double total_objective(const LossBundle& bundle, const TA3NConfig& cfg);

class Model {
 public:
  Model(const TA3NConfig& cfg, std::uint64_t init_seed);

  [[nodiscard]] const TA3NConfig& config() const { return cfg_; }
  [[nodiscard]] nn::ParameterList parameters();
  [[nodiscard]] nn::ParameterList discriminator_parameters();
  [[nodiscard]] nn::ParameterList feature_parameters();  // encoder + relation networks

  nn::Linear encoder;
  std::vector<nn::Mlp2> relation;  // aligned with config().relation_scales
  nn::Linear verb_head;
  nn::Linear noun_head;
  nn::Mlp2 spatial_disc;
  std::vector<nn::Mlp2> relation_disc;  // aligned with config().relation_scales
  nn::Mlp2 temporal_disc;

  /// Index of `scale` in relation_scales; throws if not configured.
  [[nodiscard]] std::size_t scale_slot(int scale) const;

 private:
  TA3NConfig cfg_;
};

/// Strictly increasing index n-tuples over T frames. With `count` unset every
/// C(T, n) tuple is returned in lexicographic order. Otherwise `count` tuples
/// are drawn uniformly: without replacement from a shuffled enumeration
/// (reshuffled when exhausted) when C(T, n) is small, and as independent
/// uniform n-subsets otherwise.
std::vector<std::vector<int>> draw_tuples(int num_frames, int n, std::optional<int> count, Rng& rng);

/// Frame indices for sampling `num_seg` frames from a clip of `clip_len`
/// frames: one per uniform segment, segment centre at evaluation, uniform
/// within the segment during training.
std::vector<int> segment_indices(int clip_len, int num_seg, bool training, Rng* rng);

/// Per-frame projection relu(x·W + b); rows are frames.
nn::Var encode_frames(nn::Tape& tape, Model& model, nn::Var frames);
nn::Matrix encode_frames(Model& model, const ClipFeatures& clip);

/// Mean over tuples of the scale-n relation network applied to the
/// concatenated tuple frames. `encoded` stacks `clips` clips of T rows each;
/// the result has one row per clip.
nn::Var relation_features(nn::Tape& tape, Model& model, nn::Var encoded, int clips, int scale, Rng& sampler);

/// Element-wise sum over scales.
nn::Var aggregate_video(std::span<const nn::Var> per_scale);
nn::Matrix aggregate_video(std::span<const nn::Matrix> per_scale);

struct HeadLogits {
  nn::Var verb;
  nn::Var noun;
};

HeadLogits classify_logits(nn::Tape& tape, Model& model, nn::Var video);
std::pair<Distribution, Distribution> classify(Model& model, std::span<const double> video_feature);

/// Recorded loss graph for one (source, target) batch.
struct LossGraph {
  LossBundle bundle;
  nn::Var verb, noun, spatial, temporal, ae_verb, ae_noun;
  std::map<int, nn::Var> relation;
  nn::Var total;
};

using ClipBatch = std::span<const ClipFeatures* const>;

/// Builds every loss of the batch on `tape`. `progress` in [0,1] drives the
/// GRL schedule; `sampler` supplies relation tuples.
LossGraph forward_losses(nn::Tape& tape, Model& model, ClipBatch source, ClipBatch target, double progress,
                         Rng& sampler);

/// Evaluation-mode class distributions for one clip. Tuple sampling (when not
/// exhaustive) is seeded from `eval_seed` and the clip id.
std::pair<Distribution, Distribution> predict(Model& model, const ClipFeatures& clip, std::uint64_t eval_seed);

/// Checkpoint container with kind "ta3n".
void save_model(const std::filesystem::path& path, Model& model, std::uint64_t step);
struct LoadedModel {
  Model model;
  std::uint64_t step;
};
LoadedModel load_model(const std::filesystem::path& path);

/// FNV-1a hash, used to key per-clip substreams.
std::uint64_t stable_hash(const std::string& text);

}  // namespace handda::ta3n
