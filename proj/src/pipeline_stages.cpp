#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "handda/nn/optim.hpp"
#include "handda/pipeline.hpp"
#include "handda/text.hpp"

namespace handda::pipeline {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

enum StreamKey : std::uint64_t {
  kInitKey = 0x1417,
  kEpochKey = 0xE90C,
  kTargetKey = 0x7A6E,
  kTupleKey = 0x70B1,
  kSegmentKey = 0x5E65,
  kPairKey = 0xBA12,
};

/// (H·W)×C cell matrix of one map; rows in row-major cell order.
void append_cells(nn::Matrix& out, nn::Index row, const handfeat::FeatureMap& map) {
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x, ++row) {
      for (int c = 0; c < map.channels(); ++c) out(row, c) = map.at(c, y, x);
    }
  }
}

nn::Matrix stack_cells(std::span<const synth::SynthClipRecord* const> clips, bool flow) {
  const auto& m0 = clips.front()->rgb.front();
  const nn::Index per_map = static_cast<nn::Index>(m0.height()) * m0.width();
  nn::Index rows = 0;
  for (const auto* c : clips) rows += static_cast<nn::Index>(c->rgb.size()) * per_map;
  nn::Matrix out(rows, m0.channels());
  nn::Index row = 0;
  for (const auto* c : clips) {
    for (const auto& m : flow ? c->flow : c->rgb) {
      append_cells(out, row, m);
      row += per_map;
    }
  }
  return out;
}

/// Rows: clips; columns: stacked cells. Each row averages the clip's cells
/// (context) and, with hand pooling, adds the mean over cells whose centre
/// lies in that frame's hand box (the context again when none does).
nn::Matrix pooling_matrix(std::span<const synth::SynthClipRecord* const> clips, bool hand, int stride) {
  const auto& m0 = clips.front()->rgb.front();
  const int h = m0.height(), w = m0.width();
  const nn::Index per_map = static_cast<nn::Index>(h) * w;
  nn::Index cols = 0;
  for (const auto* c : clips) cols += static_cast<nn::Index>(c->rgb.size()) * per_map;
  nn::Matrix p = nn::Matrix::Zero(static_cast<nn::Index>(clips.size()), cols);
  nn::Index col = 0;
  for (std::size_t b = 0; b < clips.size(); ++b) {
    const auto frames = static_cast<double>(clips[b]->rgb.size());
    for (std::size_t t = 0; t < clips[b]->rgb.size(); ++t, col += per_map) {
      std::vector<nn::Index> inside;
      if (hand) {
        const auto& box = clips[b]->hand_boxes.at(t);
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) {
            if (box.contains_point((j + 0.5) * stride, (i + 0.5) * stride)) inside.push_back(i * w + j);
          }
        }
      }
      const auto row = static_cast<nn::Index>(b);
      const double ctx = 1.0 / (frames * static_cast<double>(per_map));
      for (nn::Index k = 0; k < per_map; ++k) p(row, col + k) += (hand && inside.empty()) ? 2.0 * ctx : ctx;
      for (nn::Index k : inside) p(row, col + k) += 1.0 / (frames * static_cast<double>(inside.size()));
    }
  }
  return p;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Frames of `clip` at the given segment indices.
ClipFeatures select_frames(const ClipFeatures& clip, const std::vector<int>& idx) {
  ClipFeatures out{clip.id, nn::Matrix(static_cast<nn::Index>(idx.size()), clip.frames.cols()), clip.domain,
                   clip.label};
  for (std::size_t i = 0; i < idx.size(); ++i) out.frames.row(static_cast<nn::Index>(i)) = clip.frames.row(idx[i]);
  return out;
}

}  // namespace

Extractor::Extractor(int in_channels, const ExtractorConfig& cfg, int num_verbs, int num_nouns,
                     std::uint64_t init_seed)
    : rgb("extractor.rgb", in_channels, cfg.feature_channels),
      flow("extractor.flow", in_channels, cfg.feature_channels),
      verb_head("extractor.verb", 2 * cfg.feature_channels, num_verbs),
      noun_head("extractor.noun", 2 * cfg.feature_channels, num_nouns),
      cfg_(cfg),
      in_channels_(in_channels),
      num_verbs_(num_verbs),
      num_nouns_(num_nouns) {
  cfg_.validate();
  require(in_channels >= 1 && num_verbs >= 1 && num_nouns >= 1, "extractor: sizes must be positive");
  Rng rng(init_seed);
  rgb.init(rng);
  flow.init(rng);
  verb_head.init(rng);
  noun_head.init(rng);
}

nn::ParameterList Extractor::parameters() {
  nn::ParameterList out;
  rgb.collect(out);
  flow.collect(out);
  verb_head.collect(out);
  noun_head.collect(out);
  return out;
}

nn::Var Extractor::project(nn::Tape& tape, bool use_flow, nn::Var cells) {
  return nn::relu((use_flow ? flow : rgb)(tape, cells));
}

handfeat::FeatureMap Extractor::project(bool use_flow, const handfeat::FeatureMap& map) {
  require(map.channels() == in_channels_, "extractor: map has " + std::to_string(map.channels()) +
                                              " channels, extractor expects " + std::to_string(in_channels_));
  nn::Matrix cells(static_cast<nn::Index>(map.height()) * map.width(), map.channels());
  append_cells(cells, 0, map);
  nn::Tape tape;
  const nn::Matrix out = project(tape, use_flow, tape.constant(std::move(cells))).value();
  handfeat::FeatureMap fm(static_cast<int>(out.cols()), map.height(), map.width());
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) {
      for (int c = 0; c < fm.channels(); ++c) fm.at(c, y, x) = out(y * map.width() + x, c);
    }
  }
  return fm;
}

void save_extractor(const std::filesystem::path& path, Extractor& model, std::uint64_t step) {
  io::Checkpoint ckpt;
  ckpt.kind = "extractor";
  ckpt.step = step;
  ckpt.config = {{"in_channels", std::to_string(model.in_channels())},
                 {"feature_channels", std::to_string(model.feature_channels())},
                 {"num_verbs", std::to_string(model.num_verbs())},
                 {"num_nouns", std::to_string(model.num_nouns())}};
  io::store_parameters(ckpt, model.parameters());
  io::save_checkpoint(path, ckpt);
}

Extractor load_extractor(const std::filesystem::path& path) {
  const io::Checkpoint ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "extractor") throw std::runtime_error("checkpoint " + path.string() + " is not an extractor");
  int in = 0, verbs = 0, nouns = 0;
  ExtractorConfig cfg;
  text::get(ckpt.config, "in_channels", in);
  text::get(ckpt.config, "feature_channels", cfg.feature_channels);
  text::get(ckpt.config, "num_verbs", verbs);
  text::get(ckpt.config, "num_nouns", nouns);
  Extractor model(in, cfg, verbs, nouns, 0);
  io::restore_parameters(ckpt, model.parameters());
  return model;
}

void write_log_line(std::ostream& out, const EpochLog& log) {
  out << "epoch=" << log.epoch << " lr=" << text::format_double(log.learning_rate);
  for (const auto& [name, value] : log.losses) out << ' ' << name << '=' << text::format_double(value);
  out << '\n';
}

Extractor train_feature_extractor(std::span<const synth::SynthClipRecord* const> clips,
                                  const ExtractorConfig& cfg, const TrainSchedule& schedule, int num_verbs,
                                  int num_nouns, int image_stride, std::uint64_t seed, const LogSink& log) {
  schedule.validate();
  require(!clips.empty(), "train_feature_extractor: no training clips");
  for (const auto* c : clips) {
    require(c->label.has_value(), "train_feature_extractor: clip " + c->id + " is unlabelled");
    require(!c->rgb.empty(), "train_feature_extractor: clip " + c->id + " has no frames");
  }
  Extractor model(clips.front()->rgb.front().channels(), cfg, num_verbs, num_nouns, derive_seed(seed, {kInitKey}));
  nn::Optimizer opt(schedule.optimizer_settings());
  const auto params = model.parameters();
  const std::size_t n = clips.size();
  const auto batch = static_cast<std::size_t>(schedule.batch_size);
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, {kEpochKey, static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order);
    const double lr = schedule.rate_at(epoch);
    std::vector<double> verb_losses, noun_losses;
    for (std::size_t start = 0; start < n; start += batch) {
      std::vector<const synth::SynthClipRecord*> part;
      std::vector<int> verbs, nouns;
      for (std::size_t i = start; i < std::min(n, start + batch); ++i) {
        part.push_back(clips[order[i]]);
        verbs.push_back(clips[order[i]]->label->verb);
        nouns.push_back(clips[order[i]]->label->noun);
      }
      nn::Tape tape;
      const nn::Var pool = tape.constant(pooling_matrix(part, cfg.hand_pooling, image_stride));
      const nn::Var pooled[] = {nn::matmul(pool, model.project(tape, false, tape.constant(stack_cells(part, false)))),
                                nn::matmul(pool, model.project(tape, true, tape.constant(stack_cells(part, true))))};
      const nn::Var joint = nn::concat_cols(pooled);
      const nn::Var lv = nn::nll_mean(nn::log_softmax(model.verb_head(tape, joint)), verbs);
      const nn::Var ln = nn::nll_mean(nn::log_softmax(model.noun_head(tape, joint)), nouns);
      nn::zero_grad(params);
      tape.backward(nn::add(lv, ln));
      opt.step(params, lr);
      verb_losses.push_back(lv.scalar());
      noun_losses.push_back(ln.scalar());
    }
    if (log) log({epoch, lr, {{"verb", mean_of(verb_losses)}, {"noun", mean_of(noun_losses)}}});
  }
  return model;
}

std::vector<ImagePair> make_image_pairs(std::span<const synth::SynthImageRecord* const> source,
                                        std::span<const synth::SynthImageRecord* const> target, int reuse,
                                        std::uint64_t seed) {
  require(reuse >= 1, "make_image_pairs: reuse must be positive");
  for (const auto* s : source) {
    require(s->boxes.has_value(), "make_image_pairs: source image " + s->id + " has no annotations");
  }
  std::vector<std::size_t> perm(target.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng(derive_seed(seed, {kPairKey}));
  rng.shuffle(perm);
  std::vector<ImagePair> pairs;
  std::size_t k = 0;
  for (int r = 0; r < reuse; ++r) {
    for (const auto* s : source) {
      const synth::SynthImageRecord* t = target.empty() ? nullptr : target[perm[k++ % perm.size()]];
      pairs.push_back({s, t});
    }
  }
  return pairs;
}

handdet::DetectorModel train_hand_detector(std::span<const synth::SynthImageRecord* const> source,
                                           std::span<const synth::SynthImageRecord* const> target,
                                           const handdet::DetectorConfig& cfg, const TrainSchedule& schedule,
                                           std::uint64_t seed, const LogSink& log, const GradientProbe& probe,
                                           int pair_reuse) {
  schedule.validate();
  require(!source.empty(), "train_hand_detector: no source images");
  handdet::DetectorModel model(cfg, derive_seed(seed, {kInitKey}));
  const auto pairs = make_image_pairs(source, target, pair_reuse, seed);
  nn::Optimizer opt(schedule.optimizer_settings());
  const auto params = model.parameters();
  const std::size_t batch = static_cast<std::size_t>(schedule.batch_size);
  const std::size_t steps_per_epoch = (pairs.size() + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * schedule.epochs;
  std::uint64_t step = 0;
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, {kEpochKey, static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order);
    const double lr = schedule.rate_at(epoch);
    std::vector<double> det_losses, dom_losses;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const double progress = static_cast<double>(step) / total_steps;
      nn::Tape tape;
      std::vector<nn::Var> totals;
      for (std::size_t i = start; i < end; ++i) {
        const ImagePair& p = pairs[order[i]];
        const auto losses = handdet::detector_step_losses(tape, model, p.source->image, *p.source->boxes,
                                                          p.target ? &p.target->image : nullptr, progress);
        totals.push_back(losses.total);
        det_losses.push_back(losses.detection.scalar());
        if (!losses.level.empty()) {
          double s = 0.0;
          for (const auto& l : losses.level) s += l.scalar();
          dom_losses.push_back(s / static_cast<double>(losses.level.size()));
        }
      }
      nn::zero_grad(params);
      tape.backward(nn::scale(nn::sum_all(nn::concat_rows(totals)), 1.0 / static_cast<double>(totals.size())));
      if (probe) probe(step, params);
      opt.step(params, lr);
      ++step;
    }
    if (log) {
      EpochLog entry{epoch, lr, {{"detection", mean_of(det_losses)}}};
      if (!dom_losses.empty()) entry.losses["domain"] = mean_of(dom_losses);
      log(entry);
    }
  }
  return model;
}

double detector_mean_iou(handdet::DetectorModel& model, std::span<const synth::SynthImageRecord* const> images,
                         const std::map<std::string, std::vector<handfeat::BoundingBox>>& truth,
                         double confidence_threshold, std::size_t max_detections) {
  require(!images.empty(), "detector_mean_iou: no images");
  double total = 0.0;
  for (const auto* im : images) {
    const auto it = truth.find(im->id);
    require(it != truth.end(), "detector_mean_iou: no ground truth for " + im->id);
    std::vector<handfeat::BoundingBox> boxes;
    for (const auto& d : handdet::detect(model, im->image, confidence_threshold, max_detections)) boxes.push_back(d.box);
    total += handdet::mask_iou(boxes, it->second, model.config().image_size);
  }
  return total / static_cast<double>(images.size());
}

ClipFeatures extract_clip(const synth::SynthClipRecord& clip, Extractor& extractor,
                          handdet::DetectorModel* detector, const FeatureSettings& settings, int image_stride) {
  settings.validate();
  require(!clip.rgb.empty() && clip.rgb.size() == clip.flow.size(), "extract: clip " + clip.id + " is malformed");
  require(settings.mode == FeatureMode::raw || settings.boxes != BoxSource::detector || detector != nullptr,
          "extract: detector boxes requested without a detector");
  const handfeat::RoiSettings roi{static_cast<double>(image_stride), settings.roi_size, settings.roi_samples};
  const auto frames = static_cast<nn::Index>(clip.rgb.size());
  nn::Matrix out(frames, 2 * extractor.feature_channels());
  for (nn::Index t = 0; t < frames; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const auto rgb = extractor.project(false, clip.rgb[ti]);
    const auto flow = extractor.project(true, clip.flow[ti]);
    handfeat::FeatureVector rv, fv;
    if (settings.mode == FeatureMode::raw) {
      rv = handfeat::global_avg_pool(rgb);
      fv = handfeat::global_avg_pool(flow);
    } else {
      std::vector<handfeat::BoundingBox> boxes;
      if (settings.boxes == BoxSource::ground_truth) {
        require(ti < clip.hand_boxes.size(), "extract: clip " + clip.id + " lacks ground-truth boxes");
        boxes.push_back(clip.hand_boxes[ti]);
      } else if (settings.boxes == BoxSource::detector) {
        require(ti < clip.frames.size(), "extract: clip " + clip.id + " lacks frame images");
        for (const auto& d : handdet::detect(*detector, clip.frames[ti], settings.confidence_threshold,
                                             static_cast<std::size_t>(settings.max_detections))) {
          boxes.push_back(d.box);
        }
      }
      rv = handfeat::generate_hand_centric(rgb, boxes, roi);
      fv = handfeat::generate_hand_centric(flow, boxes, roi);
    }
    const auto joint = handfeat::concat_modalities(rv, fv);
    for (std::size_t k = 0; k < joint.size(); ++k) {
      out(t, static_cast<nn::Index>(k)) = static_cast<double>(static_cast<float>(joint[k]));
    }
  }
  return {clip.id, std::move(out), clip.domain, clip.label};
}

std::vector<ClipFeatures> extract_features(std::span<const synth::SynthClipRecord* const> clips,
                                           Extractor& extractor, handdet::DetectorModel* detector,
                                           const FeatureSettings& settings, int image_stride) {
  std::vector<ClipFeatures> out;
  out.reserve(clips.size());
  for (const auto* c : clips) out.push_back(extract_clip(*c, extractor, detector, settings, image_stride));
  return out;
}

void write_feature_cache(const std::filesystem::path& dir, std::span<const ClipFeatures> clips,
                         const std::map<std::string, std::string>& splits) {
  std::vector<synth::ManifestEntry> manifest;
  for (const auto& c : clips) {
    const std::string payload = "payload/" + c.id + ".bin";
    io::atomic_write(dir / payload, [&](std::ostream& out) { io::write_array(out, io::to_array(c.frames)); });
    const auto it = splits.find(c.id);
    manifest.push_back({c.id, c.domain, it == splits.end() ? "train" : it->second,
                        synth::format_action_label(c.label), payload});
  }
  synth::write_manifest(dir / "manifest.txt", manifest);
}

FeatureCache read_feature_cache(const std::filesystem::path& dir) {
  FeatureCache cache;
  for (const auto& e : synth::read_manifest(dir / "manifest.txt")) {
    std::ifstream in(dir / e.payload, std::ios::binary);
    if (!in) throw std::runtime_error("missing feature payload " + (dir / e.payload).string());
    cache.clips.push_back({e.id, io::to_matrix(io::read_array(in)), e.domain, synth::parse_action_label(e.label)});
    cache.splits[e.id] = e.split;
  }
  return cache;
}

std::vector<ClipFeatures> strip_labels(std::span<const ClipFeatures> clips) {
  std::vector<ClipFeatures> out(clips.begin(), clips.end());
  for (auto& c : out) c.label.reset();
  return out;
}

DaTrainResult train_da_model(std::span<const ClipFeatures> source, std::span<const ClipFeatures> target,
                             const ta3n::TA3NConfig& cfg, const TrainSchedule& schedule, std::uint64_t seed,
                             const LogSink& log, std::optional<DaResume> resume, const GradientProbe& probe) {
  cfg.validate();
  schedule.validate();
  require(!source.empty(), "train_da_model: empty source domain");
  require(!target.empty(), "train_da_model: empty target domain");
  for (const auto* side : {&source, &target}) {
    for (const auto& c : *side) {
      require(c.frames.cols() == cfg.input_dim, "train_da_model: clip " + c.id + " has width " +
                                                    std::to_string(c.frames.cols()) + ", model expects " +
                                                    std::to_string(cfg.input_dim));
      require(c.frames.rows() >= cfg.num_seg, "train_da_model: clip " + c.id + " is shorter than num_seg");
    }
  }
  DaTrainResult result{resume ? *resume->model : ta3n::Model(cfg, derive_seed(seed, {kInitKey})),
                       resume ? resume->step : 0};
  ta3n::Model& model = result.model;
  nn::Optimizer opt(schedule.optimizer_settings());
  const auto params = model.parameters();
  const std::size_t batch = static_cast<std::size_t>(schedule.batch_size);
  const std::size_t ns = source.size(), nt = target.size();
  const std::uint64_t steps_per_epoch = (ns + batch - 1) / batch;
  const std::uint64_t total_steps = steps_per_epoch * static_cast<std::uint64_t>(schedule.epochs);

  auto permutation = [&](std::uint64_t key, std::uint64_t epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, {key, epoch}));
    rng.shuffle(order);
    return order;
  };

  std::map<std::string, std::vector<double>> epoch_losses;
  std::vector<std::size_t> src_order, tgt_order;
  std::uint64_t src_epoch = ~0ULL, tgt_epoch = ~0ULL;
  for (std::uint64_t step = result.step; step < total_steps; ++step) {
    const std::uint64_t epoch = step / steps_per_epoch;
    const std::uint64_t pos = step % steps_per_epoch;
    if (epoch != src_epoch) {
      src_order = permutation(kEpochKey, epoch, ns);
      src_epoch = epoch;
    }
    Rng segment_rng(derive_seed(seed, {kSegmentKey, step}));
    std::vector<ClipFeatures> src_batch, tgt_batch;
    for (std::size_t i = pos * batch; i < std::min(ns, (pos + 1) * batch); ++i) {
      const auto& c = source[src_order[i]];
      src_batch.push_back(select_frames(
          c, ta3n::segment_indices(static_cast<int>(c.frames.rows()), cfg.num_seg, true, &segment_rng)));
    }
    for (std::size_t j = 0; j < src_batch.size(); ++j) {
      const std::uint64_t k = step * batch + j;
      if (k / nt != tgt_epoch) {
        tgt_epoch = k / nt;
        tgt_order = permutation(kTargetKey, tgt_epoch, nt);
      }
      const auto& c = target[tgt_order[k % nt]];
      tgt_batch.push_back(select_frames(
          c, ta3n::segment_indices(static_cast<int>(c.frames.rows()), cfg.num_seg, true, &segment_rng)));
    }
    std::vector<const ClipFeatures*> sp, tp;
    for (const auto& c : src_batch) sp.push_back(&c);
    for (const auto& c : tgt_batch) tp.push_back(&c);

    Rng sampler(derive_seed(seed, {kTupleKey, step}));
    nn::Tape tape;
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    const auto graph = ta3n::forward_losses(tape, model, sp, tp, progress, sampler);
    nn::zero_grad(params);
    tape.backward(graph.total);
    if (probe) probe(step, params);
    opt.step(params, schedule.rate_at(static_cast<int>(epoch)));

    const auto& b = graph.bundle;
    epoch_losses["verb"].push_back(b.verb);
    epoch_losses["noun"].push_back(b.noun);
    epoch_losses["spatial"].push_back(b.spatial);
    epoch_losses["temporal"].push_back(b.temporal);
    epoch_losses["ae_verb"].push_back(b.ae_verb);
    epoch_losses["ae_noun"].push_back(b.ae_noun);
    for (const auto& [n, v] : b.relation) epoch_losses["relation_" + std::to_string(n)].push_back(v);
    epoch_losses["total"].push_back(ta3n::total_objective(b, cfg));
    result.step = step + 1;

    if (pos + 1 == steps_per_epoch) {
      if (log) {
        EpochLog entry{static_cast<int>(epoch), schedule.rate_at(static_cast<int>(epoch)), {}};
        for (const auto& [name, values] : epoch_losses) entry.losses[name] = mean_of(values);
        log(entry);
      }
      epoch_losses.clear();
    }
  }
  return result;
}

}  // namespace handda::pipeline
