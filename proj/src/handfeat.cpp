#include "handda/handfeat.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace handda::handfeat {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("handfeat: " + what);
}

}  // namespace

BoundingBox::BoundingBox(double x1, double y1, double x2, double y2, Frame frame)
    : x1_(x1), y1_(y1), x2_(x2), y2_(y2), frame_(frame) {
  require(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2),
          "box coordinates must be finite");
  require(x1 < x2 && y1 < y2, "box must satisfy x1 < x2 and y1 < y2");
}

bool BoundingBox::contains(const BoundingBox& o) const {
  return x1_ <= o.x1_ && y1_ <= o.y1_ && x2_ >= o.x2_ && y2_ >= o.y2_;
}

bool BoundingBox::contains_point(double x, double y) const {
  return x >= x1_ && x <= x2_ && y >= y1_ && y <= y2_;
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

FeatureMap::FeatureMap(int channels, int height, int width)
    : FeatureMap(channels, height, width,
                 std::vector<double>(static_cast<std::size_t>(std::max(channels, 0)) *
                                         static_cast<std::size_t>(std::max(height, 0)) *
                                         static_cast<std::size_t>(std::max(width, 0)),
                                     0.0)) {}

FeatureMap::FeatureMap(int channels, int height, int width, std::vector<double> values)
    : channels_(channels), height_(height), width_(width), values_(std::move(values)) {
  require(channels > 0 && height > 0 && width > 0, "feature map dimensions must be positive");
  require(values_.size() == static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
                                static_cast<std::size_t>(width),
          "feature map value count does not match dimensions");
}

void FeatureMap::check_finite() const {
  for (double v : values_) require(std::isfinite(v), "feature map contains non-finite values");
}

std::optional<BoundingBox> union_boxes(std::span<const BoundingBox> boxes) {
  if (boxes.empty()) return std::nullopt;
  const Frame frame = boxes.front().frame();
  double x1 = boxes.front().x1(), y1 = boxes.front().y1();
  double x2 = boxes.front().x2(), y2 = boxes.front().y2();
  for (const BoundingBox& b : boxes) {
    require(b.frame() == frame, "union of boxes from different coordinate frames");
    x1 = std::min(x1, b.x1());
    y1 = std::min(y1, b.y1());
    x2 = std::max(x2, b.x2());
    y2 = std::max(y2, b.y2());
  }
  return BoundingBox(x1, y1, x2, y2, frame);
}

std::optional<BoundingBox> image_to_feature_coords(const BoundingBox& box, double stride, int map_h,
                                                   int map_w) {
  require(stride > 0.0 && std::isfinite(stride), "stride must be positive");
  require(map_h > 0 && map_w > 0, "map size must be positive");
  require(box.frame() == Frame::image, "expected an image-frame box");
  const double w = map_w;
  const double h = map_h;
  const double fx1 = box.x1() / stride, fy1 = box.y1() / stride;
  const double fx2 = box.x2() / stride, fy2 = box.y2() / stride;
  if (fx2 < 0.0 || fy2 < 0.0 || fx1 > w || fy1 > h) return std::nullopt;

  auto clip_axis = [](double lo, double hi, double limit) {
    lo = std::clamp(lo, 0.0, limit);
    hi = std::clamp(hi, 0.0, limit);
    if (hi <= lo) {
      const double centre = lo;
      lo = centre - 0.5;
      hi = centre + 0.5;
      if (lo < 0.0) {
        hi -= lo;
        lo = 0.0;
      }
      if (hi > limit) {
        lo -= hi - limit;
        hi = limit;
      }
      lo = std::max(lo, 0.0);
    }
    return std::pair{lo, hi};
  };
  const auto [x1, x2] = clip_axis(fx1, fx2, w);
  const auto [y1, y2] = clip_axis(fy1, fy2, h);
  return BoundingBox(x1, y1, x2, y2, Frame::feature);
}

double bilinear(const FeatureMap& map, int c, double x, double y) {
  const double u = x - 0.5;
  const double v = y - 0.5;
  const double j0f = std::floor(u);
  const double i0f = std::floor(v);
  const double fx = u - j0f;
  const double fy = v - i0f;
  const int j0 = static_cast<int>(j0f);
  const int i0 = static_cast<int>(i0f);
  auto cell = [&](int i, int j) {
    if (i < 0 || j < 0 || i >= map.height() || j >= map.width()) return 0.0;
    return map.at(c, i, j);
  };
  return (1.0 - fy) * ((1.0 - fx) * cell(i0, j0) + fx * cell(i0, j0 + 1)) +
         fy * ((1.0 - fx) * cell(i0 + 1, j0) + fx * cell(i0 + 1, j0 + 1));
}

FeatureMap roi_align(const FeatureMap& map, const BoundingBox& roi, int out_h, int out_w,
                     int samples_per_axis) {
  require(out_h > 0 && out_w > 0, "roi_align output size must be positive");
  require(samples_per_axis > 0, "roi_align needs at least one sample per axis");
  require(roi.frame() == Frame::feature, "roi_align expects a feature-frame roi");
  map.check_finite();

  const double bin_w = roi.width() / out_w;
  const double bin_h = roi.height() / out_h;
  const double s = samples_per_axis;
  const double norm = 1.0 / (s * s);
  FeatureMap out(map.channels(), out_h, out_w);
  for (int c = 0; c < map.channels(); ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (int sy = 0; sy < samples_per_axis; ++sy) {
          const double y = roi.y1() + (oy + (sy + 0.5) / s) * bin_h;
          for (int sx = 0; sx < samples_per_axis; ++sx) {
            const double x = roi.x1() + (ox + (sx + 0.5) / s) * bin_w;
            acc += bilinear(map, c, x, y);
          }
        }
        out.at(c, oy, ox) = acc * norm;
      }
    }
  }
  return out;
}

FeatureVector global_avg_pool(const FeatureMap& map) {
  map.check_finite();
  const std::size_t cells = static_cast<std::size_t>(map.height()) * static_cast<std::size_t>(map.width());
  FeatureVector out(static_cast<std::size_t>(map.channels()), 0.0);
  const auto& v = map.values();
  for (std::size_t c = 0; c < out.size(); ++c) {
    double acc = 0.0;
    for (std::size_t k = 0; k < cells; ++k) acc += v[c * cells + k];
    out[c] = acc / static_cast<double>(cells);
  }
  return out;
}

FeatureVector hand_centric_combine(std::span<const double> context, std::span<const double> hand) {
  require(context.size() == hand.size(), "context and hand features differ in width");
  FeatureVector out(context.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = context[i] + hand[i];
  return out;
}

FeatureVector generate_hand_centric(const FeatureMap& map, std::span<const BoundingBox> boxes,
                                    const RoiSettings& settings) {
  const FeatureVector context = global_avg_pool(map);
  std::optional<BoundingBox> roi;
  if (auto joint = union_boxes(boxes)) {
    roi = image_to_feature_coords(*joint, settings.stride, map.height(), map.width());
  }
  if (!roi) return hand_centric_combine(context, context);
  const FeatureVector hand =
      global_avg_pool(roi_align(map, *roi, settings.out_size, settings.out_size, settings.samples_per_axis));
  return hand_centric_combine(context, hand);
}

FeatureVector concat_modalities(std::span<const double> rgb, std::span<const double> flow) {
  FeatureVector out;
  out.reserve(rgb.size() + flow.size());
  out.insert(out.end(), rgb.begin(), rgb.end());
  out.insert(out.end(), flow.begin(), flow.end());
  return out;
}

std::pair<FeatureVector, FeatureVector> split_modalities(std::span<const double> joint, std::size_t rgb_dim) {
  require(rgb_dim <= joint.size(), "rgb width exceeds joint width");
  return {FeatureVector(joint.begin(), joint.begin() + static_cast<std::ptrdiff_t>(rgb_dim)),
          FeatureVector(joint.begin() + static_cast<std::ptrdiff_t>(rgb_dim), joint.end())};
}

}  // namespace handda::handfeat
