#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "handda/synthbench.hpp"

using namespace handda;
using namespace handda::synth;

namespace {

SynthConfig small_config() {
  SynthConfig c;
  c.clips_per_domain = 40;
  c.detector_images_per_domain = 12;
  c.frames = 4;
  return c;
}

bool same_clip(const SynthClipRecord& a, const SynthClipRecord& b) {
  if (a.rgb.size() != b.rgb.size() || a.hand_boxes != b.hand_boxes) return false;
  for (std::size_t t = 0; t < a.rgb.size(); ++t) {
    if (a.rgb[t].values() != b.rgb[t].values() || a.flow[t].values() != b.flow[t].values()) return false;
    if (a.frames[t].pixels != b.frames[t].pixels) return false;
  }
  return true;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double ab = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  return ab / std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0) *
                        std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
}

bool inside_cell(const BoundingBox& b, int i, int j, int stride) {
  const double cx = (j + 0.5) * stride, cy = (i + 0.5) * stride;
  return cx >= b.x1() && cx <= b.x2() && cy >= b.y1() && cy <= b.y2();
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

TEST(SynthConfigTest, ValidationAndRoundTrip) {
  SynthConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.noise = 0.37;
  c.shift_permute = true;
  c.split_fractions = {0.6, 0.2, 0.2};
  EXPECT_EQ(SynthConfig::from_key_values(c.to_key_values()).to_key_values(), c.to_key_values());
  c = small_config();
  c.hand_box_max = 100.0;  // larger than the 32-pixel image
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(gen_action_dataset(c), std::invalid_argument);
  c = small_config();
  c.split_fractions = {0.5, 0.5, 0.5};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ActionDatasetTest, SameSeedIsBitIdentical) {
  const SynthConfig cfg = small_config();
  const ActionDataset a = gen_action_dataset(cfg), b = gen_action_dataset(cfg);
  ASSERT_EQ(a.records.size(), 80u);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].id, b.records[i].id);
    EXPECT_EQ(a.records[i].split, b.records[i].split);
    EXPECT_TRUE(same_clip(a.records[i], b.records[i]));
  }
  EXPECT_EQ(a.sidecar, b.sidecar);
  SynthConfig other = cfg;
  other.seed = 2;
  EXPECT_FALSE(same_clip(gen_action_dataset(other).records[0], a.records[0]));
}

TEST(ActionDatasetTest, NoNoiseNoShiftIsDomainInvariant) {
  SynthConfig cfg = small_config();
  cfg.noise = 0.0;
  cfg.image_noise = 0.0;
  cfg.shift_enabled = false;
  const ClassBank bank = make_class_bank(cfg);
  const DomainShift shift = make_domain_shift(cfg);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const ActionLabel l{static_cast<int>(s % 4), static_cast<int>(s % 5)};
    const auto a = make_clip(cfg, bank, shift, DomainLabel::source, "a", l, 100 + s);
    const auto b = make_clip(cfg, bank, shift, DomainLabel::target, "b", l, 100 + s);
    EXPECT_TRUE(same_clip(a, b));
  }
}

TEST(ActionDatasetTest, TargetShiftIsTheConfiguredAffineMap) {
  SynthConfig cfg = small_config();
  cfg.noise = 0.0;
  cfg.shift_permute = true;
  const ClassBank bank = make_class_bank(cfg);
  const DomainShift shift = make_domain_shift(cfg);
  const ActionLabel l{1, 2};
  const auto src = make_clip(cfg, bank, shift, DomainLabel::source, "a", l, 7);
  const auto tgt = make_clip(cfg, bank, shift, DomainLabel::target, "b", l, 7);
  for (std::size_t t = 0; t < src.rgb.size(); ++t) {
    for (int k = 0; k < cfg.channels; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      for (int i = 0; i < cfg.map_size; ++i) {
        for (int j = 0; j < cfg.map_size; ++j) {
          EXPECT_NEAR(tgt.rgb[t].at(k, i, j),
                      shift.rgb.scale[kk] * src.rgb[t].at(shift.rgb.permutation[kk], i, j) + shift.rgb.offset[kk], 1e-12);
          EXPECT_NEAR(tgt.flow[t].at(k, i, j),
                      shift.flow.scale[kk] * src.flow[t].at(shift.flow.permutation[kk], i, j) + shift.flow.offset[kk],
                      1e-12);
        }
      }
    }
  }
}

TEST(ActionDatasetTest, InsideMinusBackgroundRecoversNounPrototype) {
  SynthConfig cfg = small_config();
  cfg.noise = 0.0;
  const ClassBank bank = make_class_bank(cfg);
  const DomainShift shift = make_domain_shift(cfg);
  for (int noun = 0; noun < cfg.num_nouns; ++noun) {
    const ActionLabel l{noun % cfg.num_verbs, noun};
    const auto clip = make_clip(cfg, bank, shift, DomainLabel::source, "c", l, 50 + static_cast<std::uint64_t>(noun));
    const auto& m = clip.rgb[0];
    std::vector<double> in(static_cast<std::size_t>(cfg.channels), 0.0), out = in;
    int n_in = 0, n_out = 0;
    for (int i = 0; i < cfg.map_size; ++i) {
      for (int j = 0; j < cfg.map_size; ++j) {
        const bool inside = inside_cell(clip.hand_boxes[0], i, j, cfg.image_stride);
        (inside ? n_in : n_out)++;
        for (int k = 0; k < cfg.channels; ++k) (inside ? in : out)[static_cast<std::size_t>(k)] += m.at(k, i, j);
      }
    }
    ASSERT_GT(n_in, 0);
    std::vector<double> diff(in.size());
    for (std::size_t k = 0; k < in.size(); ++k) diff[k] = in[k] / n_in - out[k] / std::max(n_out, 1);
    EXPECT_GT(cosine(diff, bank.noun_prototypes[static_cast<std::size_t>(noun)]), 0.9) << "noun " << noun;
  }
}

TEST(ActionDatasetTest, SignalIsLocalToTheHandBox) {
  SynthConfig cfg = small_config();
  cfg.noise = 0.0;
  const ActionDataset data = gen_action_dataset(cfg);
  const ClassBank bank = make_class_bank(cfg);
  for (std::size_t i = 0; i < data.records.size(); i += 7) {
    const auto& r = data.records[i];
    if (r.domain != DomainLabel::source) continue;
    EXPECT_GE(signal_locality(r, bank, cfg, data.sidecar.at(r.id)), 0.9);
  }
}

TEST(ActionDatasetTest, BoxesWithinBoundsAndLabelsCycle) {
  const SynthConfig cfg = small_config();
  const ActionDataset data = gen_action_dataset(cfg);
  for (const auto& r : data.records) {
    ASSERT_EQ(r.hand_boxes.size(), static_cast<std::size_t>(cfg.frames));
    for (const auto& b : r.hand_boxes) {
      EXPECT_GE(b.x1(), 0.0);
      EXPECT_GE(b.y1(), 0.0);
      EXPECT_LE(b.x2(), cfg.image_size());
      EXPECT_LE(b.y2(), cfg.image_size());
      EXPECT_GE(b.width(), cfg.hand_box_min);
      EXPECT_LE(b.width(), cfg.hand_box_max);
    }
  }
  EXPECT_EQ(data.sidecar.at("src-00007"), (ActionLabel{3, 1}));
}

TEST(ActionDatasetTest, TargetRecordsCarryNoLabels) {
  const ActionDataset data = gen_action_dataset(small_config());
  for (const auto& r : data.records) {
    EXPECT_EQ(r.label.has_value(), r.domain == DomainLabel::source) << r.id;
    EXPECT_TRUE(data.sidecar.count(r.id));
  }
  const auto dir = std::filesystem::temp_directory_path() / "handda_leak_test";
  std::filesystem::remove_all(dir);
  write_action_dataset(dir, data);
  for (const auto& e : read_manifest(dir / "manifest.txt")) {
    if (e.domain == DomainLabel::target) EXPECT_EQ(e.label, "-") << e.id;
  }
  for (const auto& e : read_manifest(dir / "eval_sidecar.txt")) EXPECT_NE(e.label, "-") << e.id;
  std::filesystem::remove_all(dir);
}

TEST(ActionDatasetTest, DiskRoundTripAtBinary32) {
  SynthConfig cfg = small_config();
  cfg.clips_per_domain = 6;
  const ActionDataset data = gen_action_dataset(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "handda_clip_io_test";
  std::filesystem::remove_all(dir);
  write_action_dataset(dir, data);
  const ActionDataset back = read_action_dataset(dir);
  ASSERT_EQ(back.records.size(), data.records.size());
  EXPECT_EQ(back.sidecar, data.sidecar);
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto &a = data.records[i], &b = back.records[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.split, b.split);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.hand_boxes, b.hand_boxes);
    for (std::size_t t = 0; t < a.rgb.size(); ++t) {
      for (std::size_t k = 0; k < a.rgb[t].values().size(); ++k) {
        EXPECT_EQ(b.rgb[t].values()[k], static_cast<double>(static_cast<float>(a.rgb[t].values()[k])));
      }
      EXPECT_EQ(b.frames[t].pixels.size(), a.frames[t].pixels.size());
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(DetectorDatasetTest, HandBlobIsTightlyBoxed) {
  SynthConfig cfg = small_config();
  cfg.image_noise = 0.0;
  const BoundingBox hand(5, 7, 15, 18);
  Rng rng(3);
  const Image im = render_scene(cfg, DomainLabel::source, std::span<const BoundingBox>(&hand, 1), {}, rng);
  int x1 = 1000, y1 = 1000, x2 = -1, y2 = -1;
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      if (im.at(y, x) < 0.5) continue;
      x1 = std::min(x1, x);
      y1 = std::min(y1, y);
      x2 = std::max(x2, x + 1);
      y2 = std::max(y2, y + 1);
    }
  }
  EXPECT_EQ(BoundingBox(x1, y1, x2, y2), hand);
}

TEST(DetectorDatasetTest, OneHandWithoutDistractorsGivesOneBox) {
  SynthConfig cfg = small_config();
  cfg.detector_distractors = 0;
  const DetectorDataset data = gen_detector_dataset(cfg);
  ASSERT_EQ(data.records.size(), 24u);
  int singles = 0;
  for (const auto& r : data.records) {
    const auto& boxes = data.sidecar.at(r.id);
    EXPECT_GE(boxes.size(), 1u);
    EXPECT_LE(boxes.size(), 2u);
    singles += boxes.size() == 1 ? 1 : 0;
    for (const auto& b : boxes) {
      EXPECT_GE(b.x1(), 0.0);
      EXPECT_LE(b.x2(), cfg.image_size());
      EXPECT_GE(b.y1(), 0.0);
      EXPECT_LE(b.y2(), cfg.image_size());
    }
    EXPECT_EQ(r.boxes.has_value(), r.domain == DomainLabel::source);
  }
  EXPECT_GT(singles, 0);
}

TEST(DetectorDatasetTest, PixelStatisticsUnderShift) {
  SynthConfig cfg = small_config();
  const BoundingBox hand(5, 7, 15, 18), other(20, 2, 30, 12);
  auto render_mean = [&](DomainLabel d) {
    Rng rng(42);
    return mean(render_scene(cfg, d, std::span<const BoundingBox>(&hand, 1), std::span<const BoundingBox>(&other, 1), rng)
                    .pixels);
  };
  cfg.shift_enabled = false;
  EXPECT_NEAR(render_mean(DomainLabel::source), render_mean(DomainLabel::target), 1e-6);
  cfg.shift_enabled = true;
  const double src = render_mean(DomainLabel::source);
  EXPECT_NEAR(render_mean(DomainLabel::target),
              cfg.target_contrast * (src - 0.5) + 0.5 + cfg.target_brightness, 3.0 * cfg.target_texture / 32.0);
}

TEST(DetectorDatasetTest, DeterministicAndDiskRoundTrip) {
  const SynthConfig cfg = small_config();
  const DetectorDataset a = gen_detector_dataset(cfg), b = gen_detector_dataset(cfg);
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].image.pixels, b.records[i].image.pixels);
  const auto dir = std::filesystem::temp_directory_path() / "handda_img_io_test";
  std::filesystem::remove_all(dir);
  write_detector_dataset(dir, a);
  const DetectorDataset back = read_detector_dataset(dir);
  ASSERT_EQ(back.records.size(), a.records.size());
  EXPECT_EQ(back.sidecar.size(), a.sidecar.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(back.records[i].boxes, a.records[i].boxes);
    EXPECT_EQ(back.sidecar.at(a.records[i].id), a.sidecar.at(a.records[i].id));
  }
  std::filesystem::remove_all(dir);
}

TEST(SplitTest, PartitionContract) {
  std::vector<std::string> strata;
  for (int i = 0; i < 103; ++i) strata.push_back(std::to_string(i % 7));
  const Split s = split_dataset(strata, {0.5, 0.1, 0.4}, 9);
  std::vector<std::size_t> all;
  for (const auto* part : {&s.train, &s.validation, &s.test}) all.insert(all.end(), part->begin(), part->end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(103);
  std::iota(expect.begin(), expect.end(), std::size_t{0});
  EXPECT_EQ(all, expect);
  const Split again = split_dataset(strata, {0.5, 0.1, 0.4}, 9);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.test, s.test);
  EXPECT_NE(split_dataset(strata, {0.5, 0.1, 0.4}, 10).train, s.train);

  const Split all_train = split_dataset(strata, {1.0, 0.0, 0.0}, 9);
  EXPECT_EQ(all_train.train.size(), 103u);
  EXPECT_TRUE(all_train.validation.empty());
  EXPECT_TRUE(all_train.test.empty());
  EXPECT_THROW(split_dataset(strata, {0.5, 0.5, 0.5}, 9), std::invalid_argument);
  EXPECT_THROW(split_dataset(strata, {1.2, -0.2, 0.0}, 9), std::invalid_argument);
}

TEST(SplitTest, StratifiedWithinOneRecord) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::string> strata;
    std::map<std::string, int> counts;
    const int n = 50 + static_cast<int>(rng.index(200));
    for (int i = 0; i < n; ++i) {
      const std::string key = std::to_string(rng.index(6)) + "," + std::to_string(rng.index(3));
      strata.push_back(key);
      ++counts[key];
    }
    const std::array<double, 3> f{0.6, 0.15, 0.25};
    const Split s = split_dataset(strata, f, static_cast<std::uint64_t>(trial));
    std::map<std::string, int> train;
    for (std::size_t i : s.train) ++train[strata[i]];
    for (const auto& [key, c] : counts) EXPECT_LE(std::abs(train[key] - f[0] * c), 1.0) << key;
  }
}

TEST(ManifestTest, LabelAndBoxFormats) {
  EXPECT_EQ(format_action_label(ActionLabel{2, 7}), "2,7");
  EXPECT_EQ(parse_action_label("2,7"), (ActionLabel{2, 7}));
  EXPECT_EQ(parse_action_label("-"), std::nullopt);
  EXPECT_THROW(parse_action_label("2"), std::runtime_error);
  const std::vector<BoundingBox> boxes{BoundingBox(1, 2, 3, 4), BoundingBox(0.5, 0.25, 9, 10)};
  EXPECT_EQ(parse_boxes(format_boxes(boxes)), boxes);
  EXPECT_EQ(parse_boxes("-"), std::nullopt);
  const auto path = std::filesystem::temp_directory_path() / "handda_manifest_test.txt";
  const std::vector<ManifestEntry> entries{{"a", DomainLabel::source, "train", "1,2", "payload/a.bin"},
                                           {"b", DomainLabel::target, "test", "-", "payload/b.bin"}};
  write_manifest(path, entries);
  const auto back = read_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "b");
  EXPECT_EQ(back[1].domain, DomainLabel::target);
  EXPECT_EQ(back[1].label, "-");
  {
    std::ofstream bad(path);
    bad << "a\tsource\ttrain\n";
  }
  EXPECT_THROW(read_manifest(path), std::runtime_error);
  std::filesystem::remove(path);
}
