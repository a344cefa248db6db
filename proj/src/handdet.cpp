#include "handda/handdet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "handda/text.hpp"

namespace handda::handdet {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("handdet: " + what);
}

nn::Matrix image_matrix(const Image& image) {
  nn::Matrix m(static_cast<nn::Index>(image.pixels.size()), 1);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) m(static_cast<nn::Index>(i), 0) = image.pixels[i];
  return m;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const char* to_string(UncertaintyMode m) {
  switch (m) {
    case UncertaintyMode::attention_on_certain:
      return "attention_on_certain";
    case UncertaintyMode::attention_on_uncertain:
      return "attention_on_uncertain";
    case UncertaintyMode::off:
      return "off";
  }
  return "?";
}

UncertaintyMode parse_uncertainty_mode(const std::string& text) {
  if (text == "attention_on_certain") return UncertaintyMode::attention_on_certain;
  if (text == "attention_on_uncertain") return UncertaintyMode::attention_on_uncertain;
  if (text == "off") return UncertaintyMode::off;
  throw std::invalid_argument("unknown uncertainty mode: " + text);
}

int DetectorConfig::level_size(int level) const {
  int size = image_size;
  for (int l = 0; l <= level; ++l) size = (size - 1) / 2 + 1;
  return size;
}

void DetectorConfig::validate() const {
  require(image_size >= 4, "image_size must be at least 4");
  require(num_levels() >= 2, "at least two backbone levels are required");
  int prev = image_size;
  for (int l = 0; l < num_levels(); ++l) {
    require(level_channels[static_cast<std::size_t>(l)] >= 1, "level channels must be positive");
    const int s = level_size(l);
    require(s < prev, "level resolution must strictly decrease");
    prev = s;
  }
  require(head_level >= 0 && head_level < num_levels(), "head_level out of range");
  require(head_channels >= 1 && context_width >= 1 && disc_hidden >= 1, "widths must be positive");
  require(std::isfinite(anchor_size) && anchor_size > 0.0, "anchor_size must be positive");
  require(std::isfinite(mu) && mu >= 0.0, "mu must be non-negative");
  grl.validate();
}

io::KeyValues DetectorConfig::to_key_values() const {
  using text::format_double;
  return {
      {"image_size", std::to_string(image_size)},
      {"level_channels", text::join_ints(level_channels)},
      {"head_level", std::to_string(head_level)},
      {"head_channels", std::to_string(head_channels)},
      {"context_width", std::to_string(context_width)},
      {"disc_hidden", std::to_string(disc_hidden)},
      {"anchor_size", format_double(anchor_size)},
      {"uncertainty", to_string(uncertainty)},
      {"grl_lambda", format_double(grl.lambda_value)},
      {"grl_schedule", adversarial::to_string(grl.schedule)},
      {"grl_steepness", format_double(grl.ramp_steepness)},
      {"mu", format_double(mu)},
  };
}

DetectorConfig DetectorConfig::from_key_values(const io::KeyValues& kv) {
  DetectorConfig c;
  text::get(kv, "image_size", c.image_size);
  text::get(kv, "level_channels", c.level_channels);
  text::get(kv, "head_level", c.head_level);
  text::get(kv, "head_channels", c.head_channels);
  text::get(kv, "context_width", c.context_width);
  text::get(kv, "disc_hidden", c.disc_hidden);
  text::get(kv, "anchor_size", c.anchor_size);
  std::string s;
  if (text::get(kv, "uncertainty", s)) c.uncertainty = parse_uncertainty_mode(s);
  text::get(kv, "grl_lambda", c.grl.lambda_value);
  if (text::get(kv, "grl_schedule", s)) c.grl.schedule = adversarial::parse_grl_schedule(s);
  text::get(kv, "grl_steepness", c.grl.ramp_steepness);
  text::get(kv, "mu", c.mu);
  return c;
}

DetectorModel::DetectorModel(const DetectorConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  int in = 1;
  for (int l = 0; l < cfg_.num_levels(); ++l) {
    const int c = cfg_.level_channels[static_cast<std::size_t>(l)];
    const std::string tag = std::to_string(l);
    levels.emplace_back("det.level." + tag, 9 * in, c);
    domain_classifiers.emplace_back("det.disc." + tag, c, cfg_.disc_hidden, 2);
    context_projections.emplace_back("det.context." + tag, c, cfg_.context_width);
    in = c;
  }
  const int head_in = cfg_.level_channels[static_cast<std::size_t>(cfg_.head_level)] +
                      cfg_.num_levels() * cfg_.context_width;
  head_conv = nn::Linear("det.head.conv", 9 * head_in, cfg_.head_channels);
  head_out = nn::Linear("det.head.out", cfg_.head_channels, 5);
  for (auto& l : levels) l.init(rng);
  for (auto& d : domain_classifiers) d.init(rng);
  for (auto& p : context_projections) p.init(rng);
  head_conv.init(rng);
  head_out.init(rng);
}

nn::ParameterList DetectorModel::parameters() {
  nn::ParameterList out;
  for (auto& l : levels) l.collect(out);
  for (auto& d : domain_classifiers) d.collect(out);
  for (auto& p : context_projections) p.collect(out);
  head_conv.collect(out);
  head_out.collect(out);
  return out;
}

std::vector<nn::Var> backbone_forward(nn::Tape& tape, DetectorModel& model, const Image& image) {
  const auto& cfg = model.config();
  if (image.height != cfg.image_size || image.width != cfg.image_size) {
    throw std::invalid_argument("handdet: image is " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + ", detector expects " +
                                std::to_string(cfg.image_size));
  }
  std::vector<nn::Var> maps;
  nn::Var x = tape.constant(image_matrix(image));
  int size = cfg.image_size;
  for (int l = 0; l < cfg.num_levels(); ++l) {
    const nn::ConvGeometry geom{size, size, 3, 2, 1};
    x = nn::relu(model.levels[static_cast<std::size_t>(l)](tape, nn::im2col(x, geom)));
    size = static_cast<int>(geom.out_h());
    maps.push_back(x);
  }
  return maps;
}

std::vector<handfeat::FeatureMap> backbone_forward(DetectorModel& model, const Image& image) {
  nn::Tape tape;
  const auto maps = backbone_forward(tape, model, image);
  std::vector<handfeat::FeatureMap> out;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const nn::Matrix& m = maps[l].value();
    const int size = model.config().level_size(static_cast<int>(l));
    handfeat::FeatureMap fm(static_cast<int>(m.cols()), size, size);
    for (int c = 0; c < fm.channels(); ++c) {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) fm.at(c, y, x) = m(y * size + x, c);
      }
    }
    out.push_back(std::move(fm));
  }
  return out;
}

double cell_uncertainty(const nn::Matrix& cell_probs) {
  const nn::Matrix h = adversarial::row_entropy(cell_probs);
  return std::clamp(h.mean() / std::numbers::ln2, 0.0, 1.0);
}

LevelDomainOutput level_domain_outputs(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> maps,
                                       double progress) {
  const auto& cfg = model.config();
  require(static_cast<int>(maps.size()) == cfg.num_levels(), "one map per level is required");
  LevelDomainOutput out;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const nn::Var logits = model.domain_classifiers[l](tape, adversarial::grl_apply(maps[l], cfg.grl, progress));
    out.logits.push_back(logits);
    out.uncertainty.push_back(cell_uncertainty(nn::softmax(nn::detach(logits)).value()));
  }
  return out;
}

namespace {

std::vector<nn::Var> pair_losses(const LevelDomainOutput& source, const LevelDomainOutput& target) {
  std::vector<nn::Var> losses;
  for (std::size_t l = 0; l < source.logits.size(); ++l) {
    const nn::Var both[] = {source.logits[l], target.logits[l]};
    std::vector<adversarial::DomainLabel> labels(static_cast<std::size_t>(source.logits[l].rows()),
                                                 adversarial::DomainLabel::source);
    labels.resize(labels.size() + static_cast<std::size_t>(target.logits[l].rows()),
                  adversarial::DomainLabel::target);
    losses.push_back(adversarial::domain_loss(nn::concat_rows(both), labels));
  }
  return losses;
}

}  // namespace

LevelLosses level_domain_losses(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> source_maps,
                                std::span<const nn::Var> target_maps, double progress) {
  const auto src = level_domain_outputs(tape, model, source_maps, progress);
  const auto tgt = level_domain_outputs(tape, model, target_maps, progress);
  return {pair_losses(src, tgt), src.uncertainty, tgt.uncertainty};
}

std::vector<double> uncertainty_attention(std::span<const double> u, UncertaintyMode mode) {
  std::vector<double> out;
  for (double v : u) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("handdet: uncertainty must lie in [0,1]");
    switch (mode) {
      case UncertaintyMode::attention_on_certain:
        out.push_back(1.0 - v);
        break;
      case UncertaintyMode::attention_on_uncertain:
        out.push_back(v);
        break;
      case UncertaintyMode::off:
        out.push_back(1.0);
        break;
    }
  }
  return out;
}

nn::Var context_vectors(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> maps,
                        std::span<const double> attention) {
  require(maps.size() == attention.size(), "one attention weight per level is required");
  require(maps.size() <= model.context_projections.size(), "more maps than levels");
  std::vector<nn::Var> parts;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    auto& proj = model.context_projections[l];
    require(maps[l].cols() == proj.in_dim(), "context width mismatch at level " + std::to_string(l));
    parts.push_back(nn::scale(proj(tape, nn::mean_rows(maps[l])), attention[l]));
  }
  return nn::concat_cols(parts);
}

nn::Var head_forward(nn::Tape& tape, DetectorModel& model, std::span<const nn::Var> maps, nn::Var context) {
  const auto& cfg = model.config();
  const nn::Var base = maps[static_cast<std::size_t>(cfg.head_level)];
  const int size = cfg.level_size(cfg.head_level);
  const nn::Var parts[] = {base, nn::broadcast_rows(context, base.rows())};
  const nn::Var joined = nn::concat_cols(parts);
  const nn::ConvGeometry geom{size, size, 3, 1, 1};
  const nn::Var hidden = nn::relu(model.head_conv(tape, nn::im2col(joined, geom)));
  return model.head_out(tape, hidden);
}

BoundingBox anchor_box(const DetectorConfig& cfg, int cell) {
  const int size = cfg.level_size(cfg.head_level);
  const double stride = static_cast<double>(cfg.image_size) / size;
  const double cx = (cell % size + 0.5) * stride, cy = (cell / size + 0.5) * stride;
  const double h = cfg.anchor_size / 2.0;
  return BoundingBox(cx - h, cy - h, cx + h, cy + h);
}

std::optional<BoundingBox> decode_box(const DetectorConfig& cfg, int cell, double dx, double dy, double dw,
                                      double dh) {
  const BoundingBox a = anchor_box(cfg, cell);
  const double ax = (a.x1() + a.x2()) / 2.0, ay = (a.y1() + a.y2()) / 2.0;
  const double s = cfg.anchor_size;
  const double cx = ax + dx * s, cy = ay + dy * s;
  const double w = s * std::exp(std::clamp(dw, -10.0, 10.0)), h = s * std::exp(std::clamp(dh, -10.0, 10.0));
  const double lim = cfg.image_size;
  const double x1 = std::clamp(cx - w / 2.0, 0.0, lim), x2 = std::clamp(cx + w / 2.0, 0.0, lim);
  const double y1 = std::clamp(cy - h / 2.0, 0.0, lim), y2 = std::clamp(cy + h / 2.0, 0.0, lim);
  if (!(x1 < x2 && y1 < y2)) return std::nullopt;
  return BoundingBox(x1, y1, x2, y2);
}

std::vector<BoxPrediction> suppress(std::vector<BoxPrediction> candidates, double iou_threshold,
                                    std::size_t max_keep) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const BoxPrediction& a, const BoxPrediction& b) { return a.confidence > b.confidence; });
  std::vector<BoxPrediction> kept;
  for (const auto& c : candidates) {
    if (kept.size() >= max_keep) break;
    const bool overlaps = std::any_of(kept.begin(), kept.end(),
                                      [&](const BoxPrediction& k) { return handfeat::iou(k.box, c.box) > iou_threshold; });
    if (!overlaps) kept.push_back(c);
  }
  return kept;
}

std::vector<BoxPrediction> detect(DetectorModel& model, const Image& image, double confidence_threshold,
                                  std::size_t max_detections) {
  const auto& cfg = model.config();
  nn::Tape tape;
  const auto maps = backbone_forward(tape, model, image);
  const auto dom = level_domain_outputs(tape, model, maps, 1.0);
  const auto attention = uncertainty_attention(dom.uncertainty, cfg.uncertainty);
  const nn::Matrix out = head_forward(tape, model, maps, context_vectors(tape, model, maps, attention)).value();
  std::vector<BoxPrediction> candidates;
  for (nn::Index cell = 0; cell < out.rows(); ++cell) {
    const double conf = sigmoid(out(cell, 0));
    if (conf < confidence_threshold) continue;
    const auto box = decode_box(cfg, static_cast<int>(cell), out(cell, 1), out(cell, 2), out(cell, 3), out(cell, 4));
    if (box) candidates.push_back({*box, conf});
  }
  return suppress(std::move(candidates), 0.5, max_detections);
}

HeadTargets head_targets(const DetectorConfig& cfg, std::span<const BoundingBox> boxes) {
  const int size = cfg.level_size(cfg.head_level);
  const int cells = size * size;
  HeadTargets t{nn::Matrix::Zero(cells, 1), nn::Matrix::Zero(cells, 4), std::vector<bool>(cells, false)};
  const double s = cfg.anchor_size;
  for (int cell = 0; cell < cells; ++cell) {
    const BoundingBox a = anchor_box(cfg, cell);
    const double ax = (a.x1() + a.x2()) / 2.0, ay = (a.y1() + a.y2()) / 2.0;
    const BoundingBox* best = nullptr;
    double best_d = 0.0;
    for (const auto& b : boxes) {
      if (!b.contains_point(ax, ay)) continue;
      const double d = std::hypot((b.x1() + b.x2()) / 2.0 - ax, (b.y1() + b.y2()) / 2.0 - ay);
      if (!best || d < best_d) {
        best = &b;
        best_d = d;
      }
    }
    if (!best) continue;
    t.positive[static_cast<std::size_t>(cell)] = true;
    t.objectness(cell, 0) = 1.0;
    t.offsets(cell, 0) = ((best->x1() + best->x2()) / 2.0 - ax) / s;
    t.offsets(cell, 1) = ((best->y1() + best->y2()) / 2.0 - ay) / s;
    t.offsets(cell, 2) = std::log(best->width() / s);
    t.offsets(cell, 3) = std::log(best->height() / s);
  }
  return t;
}

StepLosses detector_step_losses(nn::Tape& tape, DetectorModel& model, const Image& source,
                                std::span<const BoundingBox> source_boxes, const Image* target, double progress) {
  const auto& cfg = model.config();
  StepLosses out;
  const auto src_maps = backbone_forward(tape, model, source);
  const auto src_dom = level_domain_outputs(tape, model, src_maps, progress);
  const auto attention = uncertainty_attention(src_dom.uncertainty, cfg.uncertainty);
  const nn::Var head = head_forward(tape, model, src_maps, context_vectors(tape, model, src_maps, attention));
  const HeadTargets targets = head_targets(cfg, source_boxes);
  out.objectness = nn::bce_with_logits_mean(nn::slice_cols(head, 0, 1), targets.objectness);
  out.regression = nn::masked_l1_mean(nn::slice_cols(head, 1, 4), targets.offsets, targets.positive);
  out.detection = nn::add(out.objectness, out.regression);
  out.total = out.detection;
  if (target) {
    const auto tgt_maps = backbone_forward(tape, model, *target);
    const auto tgt_dom = level_domain_outputs(tape, model, tgt_maps, progress);
    out.level = pair_losses(src_dom, tgt_dom);
    nn::Var sum = out.level.front();
    for (std::size_t l = 1; l < out.level.size(); ++l) sum = nn::add(sum, out.level[l]);
    out.total = nn::add(out.detection, nn::scale(sum, cfg.mu / static_cast<double>(out.level.size())));
  }
  return out;
}

double mask_iou(std::span<const BoundingBox> predicted, std::span<const BoundingBox> truth, int image_size) {
  auto covered = [](std::span<const BoundingBox> boxes, double x, double y) {
    return std::any_of(boxes.begin(), boxes.end(), [&](const BoundingBox& b) { return b.contains_point(x, y); });
  };
  long inter = 0, uni = 0;
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const bool p = covered(predicted, x + 0.5, y + 0.5);
      const bool t = covered(truth, x + 0.5, y + 0.5);
      inter += (p && t) ? 1 : 0;
      uni += (p || t) ? 1 : 0;
    }
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void save_detector(const std::filesystem::path& path, DetectorModel& model, std::uint64_t step) {
  io::Checkpoint ckpt;
  ckpt.kind = "handdet";
  ckpt.config = model.config().to_key_values();
  ckpt.step = step;
  io::store_parameters(ckpt, model.parameters());
  io::save_checkpoint(path, ckpt);
}

DetectorModel load_detector(const std::filesystem::path& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "handdet") throw std::runtime_error("checkpoint " + path.string() + " is not a hand detector");
  DetectorModel model(DetectorConfig::from_key_values(ckpt.config), 0);
  io::restore_parameters(ckpt, model.parameters());
  return model;
}

void write_detections(const std::filesystem::path& path, const DetectionTable& table) {
  io::atomic_write(path, [&](std::ostream& out) {
    out << "# id [x1 y1 x2 y2 confidence]...\n";
    for (const auto& [id, dets] : table) {
      out << id;
      for (const auto& d : dets) {
        for (double v : {d.box.x1(), d.box.y1(), d.box.x2(), d.box.y2(), d.confidence}) {
          out << ' ' << text::format_double(v);
        }
      }
      out << '\n';
    }
  });
}

DetectionTable read_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open detections " + path.string());
  DetectionTable table;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    std::istringstream fields(line);
    std::string id;
    fields >> id;
    std::vector<std::string> values;
    for (std::string v; fields >> v;) values.push_back(v);
    if (values.size() % 5 != 0) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected groups of 5 values");
    }
    auto& dets = table[id];
    for (std::size_t i = 0; i < values.size(); i += 5) {
      double v[5];
      for (std::size_t k = 0; k < 5; ++k) v[k] = text::parse_double("detection", values[i + k]);
      dets.push_back({BoundingBox(v[0], v[1], v[2], v[3]), v[4]});
    }
  }
  return table;
}

}  // namespace handda::handdet
