#include "handda/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "handda/text.hpp"

namespace handda::synth {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("synthbench: " + what);
}

enum StreamKey : std::uint64_t {
  kBankKey = 0xB41C,
  kShiftKey = 0x5A1F,
  kClipKey = 0xC11B,
  kImageKey = 0x1A6E,
  kDetectorKey = 0xDE7E,
  kSplitKey = 0x5B17,
};

std::vector<std::vector<double>> orthonormal_basis(int dim, Rng& rng) {
  std::vector<std::vector<double>> basis;
  while (static_cast<int>(basis.size()) < dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (double& x : v) x = rng.normal();
    for (const auto& b : basis) {
      const double d = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= d * b[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

std::vector<double> unit_random(int dim, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (double& x : v) x = rng.normal();
  const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (double& x : v) x /= norm;
  return v;
}

std::vector<double> scaled(std::vector<double> v, double s) {
  for (double& x : v) x *= s;
  return v;
}

/// Integer-aligned box of size (w, h) whose top-left corner lies in the image.
BoundingBox place_box(double w, double h, double x, double y, int image_size) {
  const double x1 = std::clamp(std::round(x), 0.0, image_size - w);
  const double y1 = std::clamp(std::round(y), 0.0, image_size - h);
  return BoundingBox(x1, y1, x1 + w, y1 + h);
}

double pick_size(double lo, double hi, Rng& rng) { return std::round(rng.uniform(lo, hi)); }

int other_index(int exclude, int count, Rng& rng) {
  if (count <= 1) return 0;
  int k = static_cast<int>(rng.index(static_cast<std::size_t>(count - 1)));
  return k >= exclude ? k + 1 : k;
}

bool cell_inside(const BoundingBox& box, int i, int j, int stride) {
  return box.contains_point((j + 0.5) * stride, (i + 0.5) * stride);
}

std::string label_key(const ActionLabel& l) { return std::to_string(l.verb) + "," + std::to_string(l.noun); }

std::string pad_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%05d", prefix, i);
  return buf;
}

io::Array map_stack_array(const std::vector<FeatureMap>& maps) {
  io::Array a;
  const auto& m0 = maps.front();
  a.dims = {maps.size(), static_cast<std::uint64_t>(m0.channels()), static_cast<std::uint64_t>(m0.height()),
            static_cast<std::uint64_t>(m0.width())};
  for (const auto& m : maps) {
    for (double v : m.values()) a.values.push_back(static_cast<float>(v));
  }
  return a;
}

std::vector<FeatureMap> maps_from_array(const io::Array& a) {
  require(a.dims.size() == 4, "map stack must be rank 4");
  const int c = static_cast<int>(a.dims[1]), h = static_cast<int>(a.dims[2]), w = static_cast<int>(a.dims[3]);
  const std::size_t per = static_cast<std::size_t>(c) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<FeatureMap> out;
  for (std::uint64_t t = 0; t < a.dims[0]; ++t) {
    std::vector<double> v(a.values.begin() + static_cast<std::ptrdiff_t>(t * per),
                          a.values.begin() + static_cast<std::ptrdiff_t>((t + 1) * per));
    out.emplace_back(c, h, w, std::move(v));
  }
  return out;
}

io::Array image_stack_array(const std::vector<Image>& images) {
  io::Array a;
  a.dims = {images.size(), static_cast<std::uint64_t>(images.front().height),
            static_cast<std::uint64_t>(images.front().width)};
  for (const auto& im : images) {
    for (double v : im.pixels) a.values.push_back(static_cast<float>(v));
  }
  return a;
}

std::vector<Image> images_from_array(const io::Array& a) {
  require(a.dims.size() == 3, "image stack must be rank 3");
  const int h = static_cast<int>(a.dims[1]), w = static_cast<int>(a.dims[2]);
  std::vector<Image> out;
  std::size_t k = 0;
  for (std::uint64_t t = 0; t < a.dims[0]; ++t) {
    Image im(h, w);
    for (double& v : im.pixels) v = a.values[k++];
    out.push_back(std::move(im));
  }
  return out;
}

io::Array boxes_array(const std::vector<BoundingBox>& boxes) {
  io::Array a;
  a.dims = {boxes.size(), 4};
  for (const auto& b : boxes) {
    for (double v : {b.x1(), b.y1(), b.x2(), b.y2()}) a.values.push_back(static_cast<float>(v));
  }
  return a;
}

std::vector<BoundingBox> boxes_from_array(const io::Array& a) {
  require(a.dims.size() == 2 && a.dims[1] == 4, "box array must be N x 4");
  std::vector<BoundingBox> out;
  for (std::uint64_t i = 0; i < a.dims[0]; ++i) {
    const auto* v = &a.values[static_cast<std::size_t>(i * 4)];
    out.emplace_back(v[0], v[1], v[2], v[3]);
  }
  return out;
}

void write_sidecar(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  write_manifest(path, entries);
}

}  // namespace

const char* to_string(DomainLabel d) { return d == DomainLabel::source ? "source" : "target"; }

DomainLabel parse_domain(const std::string& text) {
  if (text == "source") return DomainLabel::source;
  if (text == "target") return DomainLabel::target;
  throw std::invalid_argument("unknown domain: " + text);
}

void SynthConfig::validate() const {
  require(num_verbs >= 1 && num_nouns >= 1, "class counts must be positive");
  require(clips_per_domain >= 1 && frames >= 1, "clip counts must be positive");
  require(channels >= 1 && map_size >= 1 && image_stride >= 1, "map geometry must be positive");
  require(noise >= 0.0 && image_noise >= 0.0, "noise levels must be non-negative");
  require(hand_box_min >= 1.0 && hand_box_min <= hand_box_max, "invalid hand box size range");
  require(hand_box_max <= image_size(), "infeasible hand box size: exceeds image size");
  require(distractor_box_min >= 1.0 && distractor_box_min <= distractor_box_max &&
              distractor_box_max <= image_size(),
          "infeasible distractor box size");
  require(clip_distractors >= 0 && detector_distractors >= 0, "distractor counts must be non-negative");
  require(detector_images_per_domain >= 1, "detector image count must be positive");
  require(shift_scale_min > 0.0 && shift_scale_min <= shift_scale_max, "invalid shift scale range");
  double total = 0.0;
  for (double f : split_fractions) {
    require(f >= 0.0, "split fractions must be non-negative");
    total += f;
  }
  require(std::abs(total - 1.0) < 1e-9, "split fractions must sum to 1");
}

io::KeyValues SynthConfig::to_key_values() const {
  using text::format_double;
  return {
      {"seed", std::to_string(seed)},
      {"num_verbs", std::to_string(num_verbs)},
      {"num_nouns", std::to_string(num_nouns)},
      {"clips_per_domain", std::to_string(clips_per_domain)},
      {"frames", std::to_string(frames)},
      {"channels", std::to_string(channels)},
      {"map_size", std::to_string(map_size)},
      {"image_stride", std::to_string(image_stride)},
      {"hand_box_min", format_double(hand_box_min)},
      {"hand_box_max", format_double(hand_box_max)},
      {"clip_distractors", std::to_string(clip_distractors)},
      {"distractor_box_min", format_double(distractor_box_min)},
      {"distractor_box_max", format_double(distractor_box_max)},
      {"noise", format_double(noise)},
      {"signal", format_double(signal)},
      {"shift_enabled", shift_enabled ? "true" : "false"},
      {"shift_scale_min", format_double(shift_scale_min)},
      {"shift_scale_max", format_double(shift_scale_max)},
      {"shift_offset", format_double(shift_offset)},
      {"shift_permute", shift_permute ? "true" : "false"},
      {"detector_images_per_domain", std::to_string(detector_images_per_domain)},
      {"detector_distractors", std::to_string(detector_distractors)},
      {"image_noise", format_double(image_noise)},
      {"target_brightness", format_double(target_brightness)},
      {"target_contrast", format_double(target_contrast)},
      {"target_texture", format_double(target_texture)},
      {"split_train", format_double(split_fractions[0])},
      {"split_val", format_double(split_fractions[1])},
      {"split_test", format_double(split_fractions[2])},
  };
}

SynthConfig SynthConfig::from_key_values(const io::KeyValues& kv) {
  SynthConfig c;
  text::get(kv, "seed", c.seed);
  text::get(kv, "num_verbs", c.num_verbs);
  text::get(kv, "num_nouns", c.num_nouns);
  text::get(kv, "clips_per_domain", c.clips_per_domain);
  text::get(kv, "frames", c.frames);
  text::get(kv, "channels", c.channels);
  text::get(kv, "map_size", c.map_size);
  text::get(kv, "image_stride", c.image_stride);
  text::get(kv, "hand_box_min", c.hand_box_min);
  text::get(kv, "hand_box_max", c.hand_box_max);
  text::get(kv, "clip_distractors", c.clip_distractors);
  text::get(kv, "distractor_box_min", c.distractor_box_min);
  text::get(kv, "distractor_box_max", c.distractor_box_max);
  text::get(kv, "noise", c.noise);
  text::get(kv, "signal", c.signal);
  text::get(kv, "shift_enabled", c.shift_enabled);
  text::get(kv, "shift_scale_min", c.shift_scale_min);
  text::get(kv, "shift_scale_max", c.shift_scale_max);
  text::get(kv, "shift_offset", c.shift_offset);
  text::get(kv, "shift_permute", c.shift_permute);
  text::get(kv, "detector_images_per_domain", c.detector_images_per_domain);
  text::get(kv, "detector_distractors", c.detector_distractors);
  text::get(kv, "image_noise", c.image_noise);
  text::get(kv, "target_brightness", c.target_brightness);
  text::get(kv, "target_contrast", c.target_contrast);
  text::get(kv, "target_texture", c.target_texture);
  text::get(kv, "split_train", c.split_fractions[0]);
  text::get(kv, "split_val", c.split_fractions[1]);
  text::get(kv, "split_test", c.split_fractions[2]);
  return c;
}

std::vector<double> verb_motion(const ClassBank& bank, int verb, int t, int frames) {
  const double s = frames > 1 ? static_cast<double>(t) / (frames - 1) : 0.0;
  const auto& a = bank.verb_start[static_cast<std::size_t>(verb)];
  const auto& b = bank.verb_end[static_cast<std::size_t>(verb)];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - s) * a[i] + s * b[i];
  return out;
}

void FeatureShift::apply(FeatureMap& map) const {
  const int c = map.channels();
  require(static_cast<int>(scale.size()) == c && static_cast<int>(offset.size()) == c &&
              static_cast<int>(permutation.size()) == c,
          "feature shift width does not match map");
  const FeatureMap src = map;
  for (int k = 0; k < c; ++k) {
    const int from = permutation[static_cast<std::size_t>(k)];
    for (int y = 0; y < map.height(); ++y) {
      for (int x = 0; x < map.width(); ++x) {
        map.at(k, y, x) = scale[static_cast<std::size_t>(k)] * src.at(from, y, x) + offset[static_cast<std::size_t>(k)];
      }
    }
  }
}

ClassBank make_class_bank(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {kBankKey}));
  const int c = cfg.channels;
  ClassBank bank;
  const auto appearance = orthonormal_basis(c, rng);
  for (int k = 0; k < cfg.num_nouns; ++k) {
    auto v = k < c ? appearance[static_cast<std::size_t>(k)] : unit_random(c, rng);
    bank.noun_prototypes.push_back(scaled(std::move(v), cfg.signal));
  }
  const auto motion = orthonormal_basis(c, rng);
  for (int v = 0; v < cfg.num_verbs; ++v) {
    const int a = 2 * v, b = 2 * v + 1;
    auto start = a < c ? motion[static_cast<std::size_t>(a)] : unit_random(c, rng);
    auto end = b < c ? motion[static_cast<std::size_t>(b)] : unit_random(c, rng);
    bank.verb_start.push_back(scaled(std::move(start), cfg.signal));
    bank.verb_end.push_back(scaled(std::move(end), cfg.signal));
  }
  return bank;
}

DomainShift make_domain_shift(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, {kShiftKey}));
  DomainShift shift;
  shift.enabled = cfg.shift_enabled;
  for (FeatureShift* fs : {&shift.rgb, &shift.flow}) {
    const auto c = static_cast<std::size_t>(cfg.channels);
    fs->scale.resize(c);
    fs->offset.resize(c);
    fs->permutation.resize(c);
    for (auto& s : fs->scale) s = rng.uniform(cfg.shift_scale_min, cfg.shift_scale_max);
    for (auto& o : fs->offset) o = cfg.shift_offset * rng.uniform(-1.0, 1.0);
    std::iota(fs->permutation.begin(), fs->permutation.end(), 0);
    if (cfg.shift_permute) rng.shuffle(fs->permutation);
  }
  return shift;
}

Image render_scene(const SynthConfig& cfg, DomainLabel domain, std::span<const BoundingBox> hands,
                   std::span<const BoundingBox> distractors, Rng& rng) {
  const int s = cfg.image_size();
  Image im(s, s);
  const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      im.at(y, x) = 0.3 + 0.05 * (gx * (x - s / 2.0) + gy * (y - s / 2.0)) / s;
    }
  }
  auto paint = [&](const BoundingBox& b, bool striped) {
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        if (!b.contains_point(x + 0.5, y + 0.5)) continue;
        im.at(y, x) = striped ? ((y % 2 == 0) ? 0.95 : 0.55) : 0.75;
      }
    }
  };
  for (const auto& d : distractors) paint(d, false);
  for (const auto& h : hands) paint(h, true);
  for (double& p : im.pixels) p += cfg.image_noise * rng.normal();
  if (domain == DomainLabel::target && cfg.shift_enabled) {
    for (double& p : im.pixels) {
      p = cfg.target_contrast * (p - 0.5) + 0.5 + cfg.target_brightness + cfg.target_texture * rng.uniform(-1.0, 1.0);
    }
  }
  return im;
}

SynthClipRecord make_clip(const SynthConfig& cfg, const ClassBank& bank, const DomainShift& shift,
                          DomainLabel domain, std::string id, ActionLabel label, std::uint64_t stream_seed) {
  require(label.verb >= 0 && label.verb < cfg.num_verbs && label.noun >= 0 && label.noun < cfg.num_nouns,
          "label out of range");
  Rng rng(derive_seed(stream_seed, {kClipKey}));
  Rng image_rng(derive_seed(stream_seed, {kImageKey}));
  const int size = cfg.image_size();
  const int stride = cfg.image_stride;
  const int c = cfg.channels;

  const double hw = pick_size(cfg.hand_box_min, cfg.hand_box_max, rng);
  const double hh = pick_size(cfg.hand_box_min, cfg.hand_box_max, rng);
  const double x0 = rng.uniform(0.0, size - hw), y0 = rng.uniform(0.0, size - hh);
  const double vx = rng.uniform(-1.5, 1.5), vy = rng.uniform(-1.5, 1.5);

  struct Distractor {
    BoundingBox box;
    int noun;
    int verb;
  };
  std::vector<Distractor> distractors;
  std::vector<BoundingBox> distractor_boxes;
  for (int k = 0; k < cfg.clip_distractors; ++k) {
    const double w = pick_size(cfg.distractor_box_min, cfg.distractor_box_max, rng);
    const double h = pick_size(cfg.distractor_box_min, cfg.distractor_box_max, rng);
    const BoundingBox b = place_box(w, h, rng.uniform(0.0, size - w), rng.uniform(0.0, size - h), size);
    const int noun = other_index(label.noun, cfg.num_nouns, rng);
    const int verb = other_index(label.verb, cfg.num_verbs, rng);
    distractors.push_back({b, noun, verb});
    distractor_boxes.push_back(b);
  }

  SynthClipRecord rec;
  rec.id = std::move(id);
  rec.domain = domain;
  rec.label = label;
  for (int t = 0; t < cfg.frames; ++t) {
    // reflect the hand trajectory at the image border
    auto reflect = [](double p, double limit) {
      if (limit <= 0.0) return 0.0;
      const double period = 2.0 * limit;
      double m = std::fmod(p, period);
      if (m < 0.0) m += period;
      return m <= limit ? m : period - m;
    };
    const BoundingBox hand = place_box(hw, hh, reflect(x0 + vx * t, size - hw), reflect(y0 + vy * t, size - hh), size);
    const auto motion = verb_motion(bank, label.verb, t, cfg.frames);

    FeatureMap rgb(c, cfg.map_size, cfg.map_size);
    FeatureMap flow(c, cfg.map_size, cfg.map_size);
    for (int i = 0; i < cfg.map_size; ++i) {
      for (int j = 0; j < cfg.map_size; ++j) {
        const std::vector<double>* app = nullptr;
        std::vector<double> mot;
        if (cell_inside(hand, i, j, stride)) {
          app = &bank.noun_prototypes[static_cast<std::size_t>(label.noun)];
          mot = motion;
        } else {
          for (const auto& d : distractors) {
            if (!cell_inside(d.box, i, j, stride)) continue;
            app = &bank.noun_prototypes[static_cast<std::size_t>(d.noun)];
            mot = verb_motion(bank, d.verb, t, cfg.frames);
            break;
          }
        }
        for (int k = 0; k < c; ++k) {
          const auto kk = static_cast<std::size_t>(k);
          rgb.at(k, i, j) = (app ? (*app)[kk] : 0.0) + cfg.noise * rng.normal();
          flow.at(k, i, j) = (mot.empty() ? 0.0 : mot[kk]) + cfg.noise * rng.normal();
        }
      }
    }
    if (domain == DomainLabel::target && shift.enabled) {
      shift.rgb.apply(rgb);
      shift.flow.apply(flow);
    }
    rec.rgb.push_back(std::move(rgb));
    rec.flow.push_back(std::move(flow));
    rec.hand_boxes.push_back(hand);
    const BoundingBox hands[] = {hand};
    rec.frames.push_back(render_scene(cfg, domain, hands, distractor_boxes, image_rng));
  }
  return rec;
}

ActionDataset gen_action_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const ClassBank bank = make_class_bank(cfg);
  const DomainShift shift = make_domain_shift(cfg);
  ActionDataset data;
  for (DomainLabel domain : {DomainLabel::source, DomainLabel::target}) {
    const auto dkey = static_cast<std::uint64_t>(domain);
    const char* prefix = domain == DomainLabel::source ? "src" : "tgt";
    const std::size_t first = data.records.size();
    std::vector<std::string> strata;
    for (int i = 0; i < cfg.clips_per_domain; ++i) {
      const ActionLabel label{i % cfg.num_verbs, (i / cfg.num_verbs) % cfg.num_nouns};
      data.records.push_back(make_clip(cfg, bank, shift, domain, pad_id(prefix, i), label,
                                       derive_seed(cfg.seed, {dkey, static_cast<std::uint64_t>(i)})));
      strata.push_back(label_key(label));
    }
    const Split split = split_dataset(strata, cfg.split_fractions, derive_seed(cfg.seed, {kSplitKey, dkey}));
    auto assign = [&](const std::vector<std::size_t>& idx, const char* name) {
      for (std::size_t i : idx) data.records[first + i].split = name;
    };
    assign(split.train, "train");
    assign(split.validation, "val");
    assign(split.test, "test");
  }
  for (auto& rec : data.records) {
    data.sidecar[rec.id] = *rec.label;
    if (rec.domain == DomainLabel::target) rec.label.reset();
  }
  return data;
}

DetectorDataset gen_detector_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const int size = cfg.image_size();
  DetectorDataset data;
  for (DomainLabel domain : {DomainLabel::source, DomainLabel::target}) {
    const auto dkey = static_cast<std::uint64_t>(domain);
    const char* prefix = domain == DomainLabel::source ? "simg" : "timg";
    const std::size_t first = data.records.size();
    for (int i = 0; i < cfg.detector_images_per_domain; ++i) {
      Rng rng(derive_seed(cfg.seed, {kDetectorKey, dkey, static_cast<std::uint64_t>(i)}));
      const int hands = 1 + (rng.uniform() < 0.5 ? 1 : 0);
      std::vector<BoundingBox> hand_boxes, distractor_boxes;
      for (int k = 0; k < hands; ++k) {
        const double w = pick_size(cfg.hand_box_min, cfg.hand_box_max, rng);
        const double h = pick_size(cfg.hand_box_min, cfg.hand_box_max, rng);
        hand_boxes.push_back(place_box(w, h, rng.uniform(0.0, size - w), rng.uniform(0.0, size - h), size));
      }
      for (int k = 0; k < cfg.detector_distractors; ++k) {
        const double w = pick_size(cfg.distractor_box_min, cfg.distractor_box_max, rng);
        const double h = pick_size(cfg.distractor_box_min, cfg.distractor_box_max, rng);
        distractor_boxes.push_back(place_box(w, h, rng.uniform(0.0, size - w), rng.uniform(0.0, size - h), size));
      }
      SynthImageRecord rec;
      rec.id = pad_id(prefix, i);
      rec.domain = domain;
      rec.image = render_scene(cfg, domain, hand_boxes, distractor_boxes, rng);
      rec.boxes = hand_boxes;
      data.records.push_back(std::move(rec));
    }
    std::vector<std::string> strata(static_cast<std::size_t>(cfg.detector_images_per_domain));
    const Split split = split_dataset(strata, cfg.split_fractions, derive_seed(cfg.seed, {kSplitKey, dkey, 1}));
    auto assign = [&](const std::vector<std::size_t>& idx, const char* name) {
      for (std::size_t i : idx) data.records[first + i].split = name;
    };
    assign(split.train, "train");
    assign(split.validation, "val");
    assign(split.test, "test");
  }
  for (auto& rec : data.records) {
    data.sidecar[rec.id] = *rec.boxes;
    if (rec.domain == DomainLabel::target) rec.boxes.reset();
  }
  return data;
}

Split split_dataset(std::span<const std::string> strata, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    require(std::isfinite(f) && f >= 0.0, "split fractions must be non-negative");
    total += f;
  }
  require(std::abs(total - 1.0) < 1e-9, "split fractions must sum to 1");

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < strata.size(); ++i) groups[strata[i]].push_back(i);

  Split out;
  std::array<std::vector<std::size_t>*, 3> parts{&out.train, &out.validation, &out.test};
  for (auto& [key, members] : groups) {
    Rng rng(derive_seed(seed, {ta3n::stable_hash(key)}));
    rng.shuffle(members);
    const double n = static_cast<double>(members.size());
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double exact = fractions[k] * n;
      counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      remainder[k] = exact - static_cast<double>(counts[k]);
      assigned += counts[k];
    }
    while (assigned < members.size()) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < 3; ++k) {
        if (remainder[k] > remainder[best]) best = k;
      }
      ++counts[best];
      remainder[best] = -1.0;
      ++assigned;
    }
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < counts[k]; ++c) parts[k]->push_back(members[pos++]);
    }
  }
  for (auto* p : parts) std::sort(p->begin(), p->end());
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    const auto f = text::split(line, '\t');
    if (f.size() != 5) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 5 tab-separated fields");
    }
    out.push_back({f[0], parse_domain(f[1]), f[2], f[3], f[4]});
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  io::atomic_write(path, [&](std::ostream& out) {
    out << "# id\tdomain\tsplit\tlabel\tpayload\n";
    for (const auto& e : entries) {
      out << e.id << '\t' << to_string(e.domain) << '\t' << e.split << '\t' << e.label << '\t' << e.payload << '\n';
    }
  });
}

std::string format_action_label(const std::optional<ActionLabel>& label) {
  return label ? label_key(*label) : "-";
}

std::optional<ActionLabel> parse_action_label(const std::string& text) {
  if (text == "-") return std::nullopt;
  const auto parts = text::split(text, ',');
  if (parts.size() != 2) throw std::runtime_error("malformed action label: " + text);
  return ActionLabel{static_cast<int>(text::parse_int("verb", parts[0])),
                     static_cast<int>(text::parse_int("noun", parts[1]))};
}

std::string format_boxes(const std::optional<std::vector<BoundingBox>>& boxes) {
  if (!boxes) return "-";
  std::string out;
  for (std::size_t i = 0; i < boxes->size(); ++i) {
    const auto& b = (*boxes)[i];
    if (i > 0) out += ";";
    out += text::format_double(b.x1()) + "," + text::format_double(b.y1()) + "," + text::format_double(b.x2()) +
           "," + text::format_double(b.y2());
  }
  return out;
}

std::optional<std::vector<BoundingBox>> parse_boxes(const std::string& text) {
  if (text == "-") return std::nullopt;
  std::vector<BoundingBox> out;
  if (text.empty()) return out;
  for (const auto& part : text::split(text, ';')) {
    const auto c = text::split(part, ',');
    if (c.size() != 4) throw std::runtime_error("malformed box: " + part);
    out.emplace_back(text::parse_double("x1", c[0]), text::parse_double("y1", c[1]), text::parse_double("x2", c[2]),
                     text::parse_double("y2", c[3]));
  }
  return out;
}

void write_action_dataset(const std::filesystem::path& dir, const ActionDataset& data) {
  std::vector<ManifestEntry> manifest, sidecar;
  for (const auto& rec : data.records) {
    const std::string payload = "payload/" + rec.id + ".bin";
    io::atomic_write(dir / payload, [&](std::ostream& out) {
      io::write_array(out, map_stack_array(rec.rgb));
      io::write_array(out, map_stack_array(rec.flow));
      io::write_array(out, boxes_array(rec.hand_boxes));
      io::write_array(out, image_stack_array(rec.frames));
    });
    manifest.push_back({rec.id, rec.domain, rec.split, format_action_label(rec.label), payload});
    const auto it = data.sidecar.find(rec.id);
    sidecar.push_back({rec.id, rec.domain, rec.split,
                       format_action_label(it == data.sidecar.end() ? std::nullopt : std::optional(it->second)),
                       payload});
  }
  write_manifest(dir / "manifest.txt", manifest);
  write_sidecar(dir / "eval_sidecar.txt", sidecar);
}

ActionDataset read_action_dataset(const std::filesystem::path& dir) {
  ActionDataset data;
  for (const auto& e : read_manifest(dir / "manifest.txt")) {
    std::ifstream in(dir / e.payload, std::ios::binary);
    if (!in) throw std::runtime_error("missing payload " + (dir / e.payload).string());
    SynthClipRecord rec;
    rec.id = e.id;
    rec.domain = e.domain;
    rec.split = e.split;
    rec.label = parse_action_label(e.label);
    rec.rgb = maps_from_array(io::read_array(in));
    rec.flow = maps_from_array(io::read_array(in));
    rec.hand_boxes = boxes_from_array(io::read_array(in));
    rec.frames = images_from_array(io::read_array(in));
    data.records.push_back(std::move(rec));
  }
  const auto sidecar_path = dir / "eval_sidecar.txt";
  if (std::filesystem::exists(sidecar_path)) {
    for (const auto& e : read_manifest(sidecar_path)) {
      if (auto l = parse_action_label(e.label)) data.sidecar[e.id] = *l;
    }
  }
  return data;
}

void write_detector_dataset(const std::filesystem::path& dir, const DetectorDataset& data) {
  std::vector<ManifestEntry> manifest, sidecar;
  for (const auto& rec : data.records) {
    const std::string payload = "payload/" + rec.id + ".bin";
    io::atomic_write(dir / payload, [&](std::ostream& out) {
      io::write_array(out, image_stack_array({rec.image}));
    });
    manifest.push_back({rec.id, rec.domain, rec.split, format_boxes(rec.boxes), payload});
    const auto it = data.sidecar.find(rec.id);
    sidecar.push_back({rec.id, rec.domain, rec.split,
                       format_boxes(it == data.sidecar.end() ? std::nullopt : std::optional(it->second)), payload});
  }
  write_manifest(dir / "manifest.txt", manifest);
  write_sidecar(dir / "eval_sidecar.txt", sidecar);
}

DetectorDataset read_detector_dataset(const std::filesystem::path& dir) {
  DetectorDataset data;
  for (const auto& e : read_manifest(dir / "manifest.txt")) {
    std::ifstream in(dir / e.payload, std::ios::binary);
    if (!in) throw std::runtime_error("missing payload " + (dir / e.payload).string());
    SynthImageRecord rec;
    rec.id = e.id;
    rec.domain = e.domain;
    rec.split = e.split;
    rec.boxes = parse_boxes(e.label);
    rec.image = images_from_array(io::read_array(in)).front();
    data.records.push_back(std::move(rec));
  }
  const auto sidecar_path = dir / "eval_sidecar.txt";
  if (std::filesystem::exists(sidecar_path)) {
    for (const auto& e : read_manifest(sidecar_path)) {
      if (auto b = parse_boxes(e.label)) data.sidecar[e.id] = *b;
    }
  }
  return data;
}

double signal_locality(const SynthClipRecord& clip, const ClassBank& bank, const SynthConfig& cfg,
                       ActionLabel label) {
  const auto& proto = bank.noun_prototypes[static_cast<std::size_t>(label.noun)];
  double inside = 0.0, total = 0.0;
  auto accumulate = [&](const FeatureMap& map, const std::vector<double>& dir, const BoundingBox& box) {
    const double norm2 = std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0);
    for (int i = 0; i < map.height(); ++i) {
      for (int j = 0; j < map.width(); ++j) {
        double dot = 0.0;
        for (int k = 0; k < map.channels(); ++k) dot += map.at(k, i, j) * dir[static_cast<std::size_t>(k)];
        const double e = dot * dot / norm2;
        total += e;
        if (cell_inside(box, i, j, cfg.image_stride)) inside += e;
      }
    }
  };
  for (std::size_t t = 0; t < clip.rgb.size(); ++t) {
    accumulate(clip.rgb[t], proto, clip.hand_boxes[t]);
    accumulate(clip.flow[t], verb_motion(bank, label.verb, static_cast<int>(t), cfg.frames), clip.hand_boxes[t]);
  }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace handda::synth
