#pragma once

#include <map>
#include <random>
#include <utility>
#include <vector>

#include <json.hpp>

#include "echoflow/core.hpp"

namespace echoflow::augment {

// Element of the dihedral group of the square: optional horizontal flip
// followed by `quarter_turns` counter-clockwise 90° rotations, where one
// turn maps (x, y) -> (y, 1 - x).
struct GeoTransform {
  bool hflip = false;
  int quarter_turns = 0;  // 0..3

  static GeoTransform identity() { return {}; }
  static GeoTransform horizontal_flip() { return {true, 0}; }
  static GeoTransform vertical_flip() { return {true, 2}; }
  static GeoTransform rot90() { return {false, 1}; }

  GeoTransform inverse() const;
  bool operator==(const GeoTransform&) const = default;
};

std::string to_string(const GeoTransform& t);

Point2 apply(const GeoTransform& t, Point2 p);
// Axis-aligned hull of the transformed box; INVALID stays INVALID.
NormBox apply(const GeoTransform& t, const NormBox& b);
KeypointSet apply(const GeoTransform& t, const KeypointSet& k);
ImageGray apply(const GeoTransform& t, const ImageGray& img);
MaskMap apply(const GeoTransform& t, const MaskMap& m);
// Channel-planar [K, H, W] maps.
std::vector<double> apply_planar(const GeoTransform& t, const std::vector<double>& maps, int channels,
                                 int height, int width);
Target apply(const GeoTransform& t, const Target& target);

// Rotation by `degrees` about the image center (positive is counter-clockwise
// in the same sense as GeoTransform::rot90). Images are bilinear with
// reflected borders, masks nearest-neighbour.
Point2 rotate_point(Point2 p, double degrees);
ImageGray rotate_image(const ImageGray& img, double degrees);
MaskMap rotate_mask(const MaskMap& m, double degrees);

ImageGray resize_bilinear(const ImageGray& img, int height, int width);
MaskMap resize_nearest(const MaskMap& m, int height, int width);

ImageGray apply_gamma(const ImageGray& img, double gamma);
// mean + factor * (v - mean), clipped to [0,1].
ImageGray apply_contrast(const ImageGray& img, double factor);

// Axis-aligned pixel-edge hull of the nonzero labels, INVALID if empty.
NormBox box_of_mask(const MaskMap& m);

struct TaskAugment {
  double flip_prob = 0.5;
  bool quarter_turns = true;
  double small_angle_deg = 15;  // 0 disables
  double small_angle_prob = 0.5;
  bool intensity = true;
  std::pair<double, double> gamma{0.7, 1.4};
  std::pair<double, double> contrast{0.8, 1.2};
  bool scale_crop = false;
  std::pair<double, double> scale_range{0.75, 1.0};
};

struct AugmentationPolicy {
  std::map<TaskKind, TaskAugment> per_task;

  // Throws InvalidSpec: CLS may not use intensity jitter or scale crops,
  // only SEG may scale-crop, ranges must be ordered and positive.
  void validate() const;
};

AugmentationPolicy default_policy();
AugmentationPolicy no_augmentation();

nlohmann::json to_json(const AugmentationPolicy& p);
AugmentationPolicy policy_from_json(const nlohmann::json& j);

Sample augment(const Sample& sample, const AugmentationPolicy& policy, std::mt19937_64& rng);

}  // namespace echoflow::augment
