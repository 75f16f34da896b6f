#include "echoflow/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace echoflow::augment {

GeoTransform GeoTransform::inverse() const {
  // H R H = R^-1, so every reflection is its own inverse.
  if (hflip) return *this;
  return {false, (4 - quarter_turns) % 4};
}

std::string to_string(const GeoTransform& t) {
  if (t == GeoTransform::identity()) return "identity";
  if (t == GeoTransform::horizontal_flip()) return "hflip";
  if (t == GeoTransform::vertical_flip()) return "vflip";
  if (t == GeoTransform::rot90()) return "rot90";
  return std::string(t.hflip ? "hflip+" : "") + "rot" + std::to_string(90 * t.quarter_turns);
}

Point2 apply(const GeoTransform& t, Point2 p) {
  if (t.hflip) p.x = 1 - p.x;
  for (int i = 0; i < t.quarter_turns; ++i) p = {p.y, 1 - p.x};
  return p;
}

NormBox apply(const GeoTransform& t, const NormBox& b) {
  if (b.is_invalid()) return b;
  const Point2 a = apply(t, Point2{b.x_min, b.y_min}), c = apply(t, Point2{b.x_max, b.y_max});
  return {std::min(a.x, c.x), std::min(a.y, c.y), std::max(a.x, c.x), std::max(a.y, c.y)};
}

KeypointSet apply(const GeoTransform& t, const KeypointSet& k) {
  KeypointSet out;
  for (const auto& p : k.points) out.points.push_back(apply(t, p));
  return out;
}

namespace {

// Remaps a planar grid through one transform. get(r, c) reads the source.
template <typename T>
std::vector<T> remap(const std::vector<T>& src, int channels, int& h, int& w, const GeoTransform& t) {
  std::vector<T> cur = src, next(src.size());
  const size_t plane = size_t(h) * w;
  if (t.hflip) {
    for (int k = 0; k < channels; ++k)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) next[k * plane + size_t(r) * w + c] = cur[k * plane + size_t(r) * w + (w - 1 - c)];
    cur.swap(next);
  }
  for (int turn = 0; turn < t.quarter_turns; ++turn) {
    const int nh = w, nw = h;
    for (int k = 0; k < channels; ++k)
      for (int r = 0; r < nh; ++r)
        for (int c = 0; c < nw; ++c)
          next[k * plane + size_t(r) * nw + c] = cur[k * plane + size_t(c) * w + (w - 1 - r)];
    cur.swap(next);
    h = nh;
    w = nw;
  }
  return cur;
}

}  // namespace

ImageGray apply(const GeoTransform& t, const ImageGray& img) {
  ImageGray out;
  int h = img.height, w = img.width;
  out.pixels = remap(img.pixels, 1, h, w, t);
  out.height = h;
  out.width = w;
  return out;
}

MaskMap apply(const GeoTransform& t, const MaskMap& m) {
  MaskMap out;
  int h = m.height, w = m.width;
  out.labels = remap(m.labels, 1, h, w, t);
  out.height = h;
  out.width = w;
  return out;
}

std::vector<double> apply_planar(const GeoTransform& t, const std::vector<double>& maps, int channels,
                                 int height, int width) {
  if (maps.size() != size_t(channels) * height * width)
    throw Error(ErrorCode::ShapeMismatch, "apply_planar: map size does not match layout");
  return remap(maps, channels, height, width, t);
}

Target apply(const GeoTransform& t, const Target& target) {
  return std::visit(
      [&](const auto& v) -> Target {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, ClassLabel>) return v;
        else return apply(t, v);
      },
      target);
}

Point2 rotate_point(Point2 p, double degrees) {
  const double th = degrees * std::numbers::pi / 180.0, cs = std::cos(th), sn = std::sin(th);
  const double dx = p.x - 0.5, dy = p.y - 0.5;
  return {0.5 + cs * dx + sn * dy, 0.5 - sn * dx + cs * dy};
}

namespace {

double reflect(double u, int n) {
  if (n == 1) return 0;
  const double hi = n - 1;
  while (u < 0 || u > hi) {
    if (u < 0) u = -u;
    if (u > hi) u = 2 * hi - u;
  }
  return u;
}

double sample_bilinear(const ImageGray& img, double u, double v) {  // u col, v row (pixel units)
  const int c0 = std::min(int(std::floor(u)), img.width - 1), r0 = std::min(int(std::floor(v)), img.height - 1);
  const int c1 = std::min(c0 + 1, img.width - 1), r1 = std::min(r0 + 1, img.height - 1);
  const double fu = u - c0, fv = v - r0;
  return (1 - fv) * ((1 - fu) * img.at(r0, c0) + fu * img.at(r0, c1)) +
         fv * ((1 - fu) * img.at(r1, c0) + fu * img.at(r1, c1));
}

// Source pixel coordinates (col, row) of output pixel (r, c) under rotation.
std::pair<double, double> rotation_source(int r, int c, int h, int w, double degrees) {
  const Point2 src = rotate_point(pixel_center(r, c, h, w), -degrees);
  return {reflect(src.x * w - 0.5, w), reflect(src.y * h - 0.5, h)};
}

}  // namespace

ImageGray rotate_image(const ImageGray& img, double degrees) {
  ImageGray out(img.height, img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const auto [u, v] = rotation_source(r, c, img.height, img.width, degrees);
      out.at(r, c) = float(std::clamp(sample_bilinear(img, u, v), 0.0, 1.0));
    }
  return out;
}

MaskMap rotate_mask(const MaskMap& m, double degrees) {
  MaskMap out(m.height, m.width);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const auto [u, v] = rotation_source(r, c, m.height, m.width, degrees);
      out.at(r, c) = m.at(std::clamp(int(std::lround(v)), 0, m.height - 1),
                          std::clamp(int(std::lround(u)), 0, m.width - 1));
    }
  return out;
}

ImageGray resize_bilinear(const ImageGray& img, int height, int width) {
  if (img.height == height && img.width == width) return img;
  ImageGray out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const double u = std::clamp((c + 0.5) * img.width / width - 0.5, 0.0, double(img.width - 1));
      const double v = std::clamp((r + 0.5) * img.height / height - 0.5, 0.0, double(img.height - 1));
      out.at(r, c) = float(sample_bilinear(img, u, v));
    }
  return out;
}

MaskMap resize_nearest(const MaskMap& m, int height, int width) {
  if (m.height == height && m.width == width) return m;
  MaskMap out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const int sr = std::min(int((r + 0.5) * m.height / height), m.height - 1);
      const int sc = std::min(int((c + 0.5) * m.width / width), m.width - 1);
      out.at(r, c) = m.at(sr, sc);
    }
  return out;
}

ImageGray apply_gamma(const ImageGray& img, double gamma) {
  ImageGray out = img;
  for (auto& v : out.pixels) v = float(std::pow(std::clamp(double(v), 0.0, 1.0), gamma));
  return out;
}

ImageGray apply_contrast(const ImageGray& img, double factor) {
  ImageGray out = img;
  double mean = 0;
  for (float v : img.pixels) mean += v;
  mean /= double(std::max<size_t>(1, img.pixels.size()));
  for (auto& v : out.pixels) v = float(std::clamp(mean + factor * (v - mean), 0.0, 1.0));
  return out;
}

NormBox box_of_mask(const MaskMap& m) {
  int rmin = m.height, rmax = -1, cmin = m.width, cmax = -1;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c) != 0) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  if (rmax < 0) return NormBox::invalid();
  return {double(cmin) / m.width, double(rmin) / m.height, double(cmax + 1) / m.width,
          double(rmax + 1) / m.height};
}

void AugmentationPolicy::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidSpec, "augmentation: " + m); };
  for (const auto& [kind, a] : per_task) {
    const std::string k(echoflow::to_string(kind));
    if (a.flip_prob < 0 || a.flip_prob > 1 || a.small_angle_prob < 0 || a.small_angle_prob > 1)
      fail(k + " probabilities must lie in [0,1]");
    if (a.small_angle_deg < 0) fail(k + " small_angle_deg must be >= 0");
    if (!(a.gamma.first > 0 && a.gamma.first <= a.gamma.second)) fail(k + " gamma range invalid");
    if (!(a.contrast.first > 0 && a.contrast.first <= a.contrast.second)) fail(k + " contrast range invalid");
    if (!(a.scale_range.first > 0 && a.scale_range.first <= a.scale_range.second && a.scale_range.second <= 1))
      fail(k + " scale range invalid");
    if (kind == TaskKind::Cls && a.intensity) fail("CLS receives geometric transforms only");
    if (kind != TaskKind::Seg && a.scale_crop) fail("scale crops are SEG only");
  }
}

AugmentationPolicy default_policy() {
  AugmentationPolicy p;
  TaskAugment seg;
  seg.scale_crop = true;
  TaskAugment cls;
  cls.intensity = false;
  TaskAugment det;
  det.small_angle_deg = 0;  // keeps the box the tight hull of the lesion
  TaskAugment reg;
  p.per_task = {{TaskKind::Seg, seg}, {TaskKind::Cls, cls}, {TaskKind::Det, det}, {TaskKind::Reg, reg}};
  return p;
}

AugmentationPolicy no_augmentation() {
  AugmentationPolicy p;
  TaskAugment none;
  none.flip_prob = 0;
  none.quarter_turns = false;
  none.small_angle_deg = 0;
  none.intensity = false;
  for (auto k : kAllTaskKinds) p.per_task[k] = none;
  return p;
}

nlohmann::json to_json(const AugmentationPolicy& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [kind, a] : p.per_task)
    j[std::string(echoflow::to_string(kind))] = {
        {"flip_prob", a.flip_prob},         {"quarter_turns", a.quarter_turns},
        {"small_angle_deg", a.small_angle_deg}, {"small_angle_prob", a.small_angle_prob},
        {"intensity", a.intensity},         {"gamma", {a.gamma.first, a.gamma.second}},
        {"contrast", {a.contrast.first, a.contrast.second}}, {"scale_crop", a.scale_crop},
        {"scale_range", {a.scale_range.first, a.scale_range.second}}};
  return j;
}

AugmentationPolicy policy_from_json(const nlohmann::json& j) {
  AugmentationPolicy p = default_policy();
  for (const auto& [name, e] : j.items()) {
    auto& a = p.per_task[parse_task_kind(name)];
    a.flip_prob = e.value("flip_prob", a.flip_prob);
    a.quarter_turns = e.value("quarter_turns", a.quarter_turns);
    a.small_angle_deg = e.value("small_angle_deg", a.small_angle_deg);
    a.small_angle_prob = e.value("small_angle_prob", a.small_angle_prob);
    a.intensity = e.value("intensity", a.intensity);
    a.scale_crop = e.value("scale_crop", a.scale_crop);
    if (e.contains("gamma")) a.gamma = {e["gamma"][0].get<double>(), e["gamma"][1].get<double>()};
    if (e.contains("contrast")) a.contrast = {e["contrast"][0].get<double>(), e["contrast"][1].get<double>()};
    if (e.contains("scale_range"))
      a.scale_range = {e["scale_range"][0].get<double>(), e["scale_range"][1].get<double>()};
  }
  p.validate();
  return p;
}

namespace {

Sample rotate_sample(const Sample& s, double degrees) {
  Sample out = s;
  out.image = rotate_image(s.image, degrees);
  if (auto* m = std::get_if<MaskMap>(&s.target)) {
    out.target = rotate_mask(*m, degrees);
  } else if (auto* b = std::get_if<NormBox>(&s.target)) {
    if (!b->is_invalid()) {
      NormBox hull{1, 1, 0, 0};
      for (Point2 corner : {Point2{b->x_min, b->y_min}, Point2{b->x_max, b->y_min},
                            Point2{b->x_min, b->y_max}, Point2{b->x_max, b->y_max}}) {
        const Point2 q = rotate_point(corner, degrees);
        hull = {std::min(hull.x_min, q.x), std::min(hull.y_min, q.y), std::max(hull.x_max, q.x),
                std::max(hull.y_max, q.y)};
      }
      out.target = NormBox{std::clamp(hull.x_min, 0.0, 1.0), std::clamp(hull.y_min, 0.0, 1.0),
                           std::clamp(hull.x_max, 0.0, 1.0), std::clamp(hull.y_max, 0.0, 1.0)};
    }
  } else if (auto* k = std::get_if<KeypointSet>(&s.target)) {
    KeypointSet moved;
    for (const auto& p : k->points) moved.points.push_back(rotate_point(p, degrees));
    out.target = moved;
  }
  return out;
}

bool keypoints_inside(const Target& t) {
  if (auto* k = std::get_if<KeypointSet>(&t))
    for (const auto& p : k->points)
      if (p.x < 0 || p.x > 1 || p.y < 0 || p.y > 1) return false;
  return true;
}

}  // namespace

Sample augment(const Sample& sample, const AugmentationPolicy& policy, std::mt19937_64& rng) {
  const TaskKind kind = task_of(sample.target);
  auto it = policy.per_task.find(kind);
  if (it == policy.per_task.end()) return sample;
  const TaskAugment& a = it->second;
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Every draw happens unconditionally so the stream does not depend on outcomes.
  const bool flip = unit(rng) < a.flip_prob;
  const int turns = int(std::uniform_int_distribution<int>(0, 3)(rng));
  const bool tilt = unit(rng) < a.small_angle_prob;
  const double angle = (2 * unit(rng) - 1) * a.small_angle_deg;
  const double scale = a.scale_range.first + unit(rng) * (a.scale_range.second - a.scale_range.first);
  const double ox = unit(rng), oy = unit(rng);
  const double gamma = a.gamma.first + unit(rng) * (a.gamma.second - a.gamma.first);
  const double contrast = a.contrast.first + unit(rng) * (a.contrast.second - a.contrast.first);

  Sample out = sample;
  const GeoTransform geo{flip, a.quarter_turns ? turns : 0};
  if (!(geo == GeoTransform::identity())) {
    out.image = apply(geo, out.image);
    out.target = augment::apply(geo, out.target);
  }
  if (tilt && a.small_angle_deg > 0 && angle != 0) {
    Sample rotated = rotate_sample(out, angle);
    if (keypoints_inside(rotated.target)) out = std::move(rotated);
  }
  if (a.scale_crop && kind == TaskKind::Seg && scale < 1) {
    const int h = out.image.height, w = out.image.width;
    const int ch = std::max(1, int(std::lround(scale * h))), cw = std::max(1, int(std::lround(scale * w)));
    const int r0 = std::min(int(oy * (h - ch + 1)), h - ch), c0 = std::min(int(ox * (w - cw + 1)), w - cw);
    ImageGray crop(ch, cw);
    MaskMap mcrop(ch, cw);
    const auto& m = std::get<MaskMap>(out.target);
    for (int r = 0; r < ch; ++r)
      for (int c = 0; c < cw; ++c) {
        crop.at(r, c) = out.image.at(r0 + r, c0 + c);
        mcrop.at(r, c) = m.at(r0 + r, c0 + c);
      }
    out.image = resize_bilinear(crop, h, w);
    out.target = resize_nearest(mcrop, h, w);
  }
  if (a.intensity && kind != TaskKind::Cls) out.image = apply_contrast(apply_gamma(out.image, gamma), contrast);
  return out;
}

}  // namespace echoflow::augment
