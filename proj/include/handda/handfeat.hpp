#pragma once

#include <optional>
#include <span>
#include <vector>

namespace handda::handfeat {

/// Coordinate frame a box is expressed in.
enum class Frame { image, feature };

/// Axis-aligned rectangle with x1 < x2, y1 < y2, all finite.
class BoundingBox {
 public:
  BoundingBox(double x1, double y1, double x2, double y2, Frame frame = Frame::image);

  [[nodiscard]] double x1() const { return x1_; }
  [[nodiscard]] double y1() const { return y1_; }
  [[nodiscard]] double x2() const { return x2_; }
  [[nodiscard]] double y2() const { return y2_; }
  [[nodiscard]] Frame frame() const { return frame_; }
  [[nodiscard]] double width() const { return x2_ - x1_; }
  [[nodiscard]] double height() const { return y2_ - y1_; }
  [[nodiscard]] double area() const { return width() * height(); }
  [[nodiscard]] bool contains(const BoundingBox& other) const;
  [[nodiscard]] bool contains_point(double x, double y) const;

  bool operator==(const BoundingBox&) const = default;

 private:
  double x1_, y1_, x2_, y2_;
  Frame frame_;
};

/// Intersection over union; 0 for disjoint boxes.
double iou(const BoundingBox& a, const BoundingBox& b);

/// C×H×W grid of finite reals, channel-major then row-major.
class FeatureMap {
 public:
  FeatureMap(int channels, int height, int width);
  FeatureMap(int channels, int height, int width, std::vector<double> values);

  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] double at(int c, int y, int x) const { return values_[index(c, y, x)]; }
  double& at(int c, int y, int x) { return values_[index(c, y, x)]; }
  [[nodiscard]] const std::vector<double>& values() const { return values_; }
  /// Throws when any value is NaN or infinite.
  void check_finite() const;

 private:
  [[nodiscard]] std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(height_) + static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int channels_, height_, width_;
  std::vector<double> values_;
};

using FeatureVector = std::vector<double>;

/// Minimal envelope of the boxes. Empty input yields std::nullopt (no detection).
std::optional<BoundingBox> union_boxes(std::span<const BoundingBox> boxes);

/// Divides an image-frame box by `stride` and clips it to [0,W]×[0,H]. A
/// zero-extent axis after clipping is widened to one cell centred on the
/// clipped coordinate (shifted back inside the map). Boxes entirely outside
/// the map yield std::nullopt.
std::optional<BoundingBox> image_to_feature_coords(const BoundingBox& box, double stride, int map_h,
                                                   int map_w);

/// Bilinear interpolation of channel c at continuous point (x, y). Cell (i,j)
/// is centred at (j+0.5, i+0.5); cells outside the map contribute zero.
double bilinear(const FeatureMap& map, int c, double x, double y);

/// RoIAlign: the feature-frame roi is split into out_h×out_w bins, each bin
/// averaging samples_per_axis² bilinear samples at the centres of an equal
/// subdivision of the bin.
FeatureMap roi_align(const FeatureMap& map, const BoundingBox& roi, int out_h, int out_w,
                     int samples_per_axis);

FeatureVector global_avg_pool(const FeatureMap& map);

FeatureVector hand_centric_combine(std::span<const double> context, std::span<const double> hand);

struct RoiSettings {
  double stride = 1.0;
  int out_size = 7;
  int samples_per_axis = 2;
};

/// context + pooled RoIAlign over the union of the hand boxes. Without a
/// usable box the hand term is the context itself, so the result is exactly
/// twice the context.
FeatureVector generate_hand_centric(const FeatureMap& map, std::span<const BoundingBox> boxes,
                                    const RoiSettings& settings);

FeatureVector concat_modalities(std::span<const double> rgb, std::span<const double> flow);

/// Inverse of concat_modalities given the RGB width.
std::pair<FeatureVector, FeatureVector> split_modalities(std::span<const double> joint, std::size_t rgb_dim);

}  // namespace handda::handfeat
