#include "echoflow/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "echoflow/io.hpp"

namespace echoflow::synth {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

// Marker geometry in normalized units.
constexpr double kDiscRadius = 0.022;
constexpr double kRingInner = 0.020;
constexpr double kRingOuter = 0.034;
constexpr double kCrossArm = 0.034;
constexpr double kCrossHalfWidth = 0.008;
constexpr double kMarkerClearance = 0.05;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool bernoulli(std::mt19937_64& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

std::pair<double, double> half_extents(const SceneParams& p) {
  const double c = std::cos(p.rotation), s = std::sin(p.rotation);
  const double a2 = p.semi_major * p.semi_major, b2 = p.semi_minor * p.semi_minor;
  return {std::sqrt(a2 * c * c + b2 * s * s), std::sqrt(a2 * s * s + b2 * c * c)};
}

bool markers_clear(const SceneParams& p) {
  SceneParams grown = p;
  grown.semi_major += kMarkerClearance;
  grown.semi_minor += kMarkerClearance;
  for (const auto& m : p.landmarks) {
    if (m.x < 0.08 || m.x > 0.92 || m.y < 0.08 || m.y > 0.92) return false;
    if (grown.ellipse_value(m.x, m.y) <= 1.0) return false;
  }
  return true;
}

// Intensity contributed by landmark markers, or a negative value if none.
double marker_intensity(const SceneParams& p, double x, double y) {
  const auto& disc = p.landmarks[0];
  if (std::hypot(x - disc.x, y - disc.y) <= kDiscRadius) return 0.95;
  const auto& ring = p.landmarks[1];
  const double rr = std::hypot(x - ring.x, y - ring.y);
  if (rr >= kRingInner && rr <= kRingOuter) return 0.95;
  const auto& cross = p.landmarks[2];
  const double dx = std::abs(x - cross.x), dy = std::abs(y - cross.y);
  if ((dx <= kCrossHalfWidth && dy <= kCrossArm) || (dy <= kCrossHalfWidth && dx <= kCrossArm))
    return 0.95;
  return -1.0;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a simple combination
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

double SceneParams::eccentricity() const {
  const double r = semi_minor / semi_major;
  return std::sqrt(std::max(0.0, 1.0 - r * r));
}

double SceneParams::ellipse_value(double x, double y) const {
  const double dx = x - center.x, dy = y - center.y;
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double u = dx * c + dy * s;
  const double v = -dx * s + dy * c;
  return (u / semi_major) * (u / semi_major) + (v / semi_minor) * (v / semi_minor);
}

std::optional<std::string> check_scene(const SceneParams& p) {
  if (!(p.semi_minor > 0)) return "semi_minor must be positive";
  if (p.semi_major < p.semi_minor) return "semi_major must be >= semi_minor";
  const auto [ex, ey] = half_extents(p);
  if (p.center.x - ex < 0.05 - 1e-12 || p.center.x + ex > 0.95 + 1e-12 ||
      p.center.y - ey < 0.05 - 1e-12 || p.center.y + ey > 0.95 + 1e-12)
    return "ellipse must lie inside [0.05, 0.95]^2";
  if (p.speckle_sigma < 0) return "speckle_sigma must be >= 0";
  for (const auto& l : p.landmarks)
    if (l.x < 0 || l.x > 1 || l.y < 0 || l.y > 1) return "landmark outside [0,1]^2";
  return std::nullopt;
}

SceneParams draw_scene(std::uint64_t seed, std::int64_t index, const GeneratorOptions& opts) {
  std::mt19937_64 rng(mix_seed(seed, std::uint64_t(index), 0));
  SceneParams p;
  p.speckle_sigma = opts.speckle_sigma;
  // Class first, then an axis ratio from the band on the matching side of
  // the eccentricity threshold: ratio <= 0.5 gives e >= 0.866, ratio >= 0.85
  // gives e <= 0.527.
  const bool malignant = bernoulli(rng, 0.5);
  p.semi_major = uniform(rng, 0.19, 0.26);
  const double ratio = malignant ? uniform(rng, 0.30, 0.50) : uniform(rng, 0.85, 1.0);
  p.semi_minor = ratio * p.semi_major;
  p.rotation = uniform(rng, 0.0, kPi);
  p.lesion_intensity = uniform(rng, 0.55, 0.80);
  p.shadow = bernoulli(rng, 0.3);

  for (;;) {
    const auto [ex, ey] = half_extents(p);
    p.center = {uniform(rng, 0.05 + ex, 0.95 - ex), uniform(rng, 0.05 + ey, 0.95 - ey)};
    for (int attempt = 0; attempt < 400; ++attempt) {
      const Point2 vertex{uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)};
      const double theta = uniform(rng, 0.0, 2 * kPi);
      const double spread = uniform(rng, 70.0, 150.0) * kPi / 180.0 * (bernoulli(rng, 0.5) ? 1 : -1);
      const double d1 = uniform(rng, 0.22, 0.34), d3 = uniform(rng, 0.22, 0.34);
      p.landmarks[1] = vertex;
      p.landmarks[0] = {vertex.x + d1 * std::cos(theta), vertex.y + d1 * std::sin(theta)};
      p.landmarks[2] = {vertex.x + d3 * std::cos(theta + spread),
                        vertex.y + d3 * std::sin(theta + spread)};
      if (markers_clear(p)) return p;
    }
  }
}

int malignancy_label(const SceneParams& p, double threshold) {
  return p.eccentricity() > threshold ? 1 : 0;
}

NormBox scene_box(const SceneParams& p) {
  const auto [ex, ey] = half_extents(p);
  return {p.center.x - ex, p.center.y - ey, p.center.x + ex, p.center.y + ey};
}

MaskMap rasterize_mask(const SceneParams& p, int height, int width) {
  MaskMap m(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const auto q = pixel_center(r, c, height, width);
      if (p.ellipse_value(q.x, q.y) <= 1.0) m.at(r, c) = 1;
    }
  return m;
}

double vertex_angle_deg(const Point2& p1, const Point2& p2, const Point2& p3) {
  const double ux = p1.x - p2.x, uy = p1.y - p2.y;
  const double vx = p3.x - p2.x, vy = p3.y - p2.y;
  const double nu = std::hypot(ux, uy), nv = std::hypot(vx, vy);
  if (nu == 0 || nv == 0) return 0.0;
  const double cosv = std::clamp((ux * vx + uy * vy) / (nu * nv), -1.0, 1.0);
  return std::acos(cosv) * 180.0 / kPi;
}

double landmark_angle_deg(const SceneParams& p, Size2 frame) {
  auto px = [&](const Point2& q) { return Point2{q.x * frame.width, q.y * frame.height}; };
  return vertex_angle_deg(px(p.landmarks[0]), px(p.landmarks[1]), px(p.landmarks[2]));
}

ImageGray render_scene(const SceneParams& p, int resolution, int native_scale,
                       std::uint64_t noise_seed) {
  const int n = resolution * native_scale;
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto [ex, _] = half_extents(p);

  std::vector<double> native(size_t(n) * n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const auto q = pixel_center(r, c, n, n);
      double base = 0.18 + 0.10 * (1.0 - q.y);  // depth attenuation
      const bool inside = p.ellipse_value(q.x, q.y) <= 1.0;
      if (inside) {
        base = p.lesion_intensity;
      } else if (p.shadow && q.y > p.center.y && std::abs(q.x - p.center.x) < 0.8 * ex) {
        base *= 0.45;
      }
      if (double m = marker_intensity(p, q.x, q.y); m >= 0) base = m;
      const double g = gauss(rng);
      native[size_t(r) * n + c] = std::clamp(base * (1.0 + p.speckle_sigma * g), 0.0, 1.0);
    }
  }

  ImageGray img(resolution, resolution);
  const double norm = 1.0 / (native_scale * native_scale);
  for (int r = 0; r < resolution; ++r)
    for (int c = 0; c < resolution; ++c) {
      double acc = 0;
      for (int dr = 0; dr < native_scale; ++dr)
        for (int dc = 0; dc < native_scale; ++dc)
          acc += native[size_t(r * native_scale + dr) * n + (c * native_scale + dc)];
      img.at(r, c) = io::dequantize_intensity(io::quantize_intensity(float(acc * norm)));
    }
  return img;
}

Sample make_sample(const SceneParams& p, const DatasetSpec& spec, const GeneratorOptions& opts,
                   std::uint64_t noise_seed, bool annotated) {
  Sample s;
  s.dataset_id = spec.dataset_id;
  const int res = spec.train_resolution;
  s.image = render_scene(p, res, opts.native_scale, noise_seed);
  s.original_size = {res * opts.native_scale, res * opts.native_scale};
  switch (spec.task) {
    case TaskKind::Seg: s.target = rasterize_mask(p, res, res); break;
    case TaskKind::Cls: s.target = ClassLabel{malignancy_label(p, opts.eccentricity_threshold), {}}; break;
    case TaskKind::Det: s.target = annotated ? scene_box(p) : NormBox::invalid(); break;
    case TaskKind::Reg: {
      KeypointSet k;
      for (int i = 0; i < spec.num_keypoints; ++i) k.points.push_back(p.landmarks[size_t(i) % 3]);
      s.target = k;
      break;
    }
  }
  return s;
}

namespace {

bool draw_annotated(std::uint64_t seed, std::int64_t index, const GeneratorOptions& opts) {
  if (opts.unannotated_fraction <= 0) return true;
  std::mt19937_64 rng(mix_seed(seed, std::uint64_t(index), 2));
  return !bernoulli(rng, opts.unannotated_fraction);
}

}  // namespace

Sample generate_scene(std::uint64_t seed, const Registry& registry, const std::string& dataset_id,
                      std::int64_t index, const GeneratorOptions& opts) {
  const auto& spec = registry.get(dataset_id);
  const auto params = draw_scene(seed, index, opts);
  const bool annotated = spec.task != TaskKind::Det || draw_annotated(seed, index, opts);
  return make_sample(params, spec, opts, mix_seed(seed, std::uint64_t(index), 1), annotated);
}

GeneratedDataset generate_dataset(std::uint64_t seed, const Registry& registry,
                                  const std::string& dataset_id, int n,
                                  const GeneratorOptions& opts, std::int64_t first_index) {
  if (n < 1) throw Error(ErrorCode::InvalidSpec, "n must be >= 1");
  const auto& spec = registry.get(dataset_id);
  GeneratedDataset out;
  out.manifest.seed = seed;
  out.manifest.spec = spec;
  out.manifest.options = opts;
  for (std::int64_t i = first_index; i < first_index + n; ++i) {
    const auto params = draw_scene(seed, i, opts);
    const bool annotated = spec.task != TaskKind::Det || draw_annotated(seed, i, opts);
    out.samples.push_back(make_sample(params, spec, opts, mix_seed(seed, std::uint64_t(i), 1), annotated));
    out.manifest.records.push_back(
        {i, params, malignancy_label(params, opts.eccentricity_threshold), annotated});
  }
  return out;
}

bool Manifest::operator==(const Manifest& o) const {
  return to_json(*this) == to_json(o);
}

json to_json(const SceneParams& p) {
  json lm = json::array();
  for (const auto& l : p.landmarks) lm.push_back({l.x, l.y});
  return {{"center", {p.center.x, p.center.y}},
          {"semi_axes", {p.semi_major, p.semi_minor}},
          {"rotation", p.rotation},
          {"speckle_sigma", p.speckle_sigma},
          {"shadow", p.shadow},
          {"lesion_intensity", p.lesion_intensity},
          {"landmarks", lm}};
}

SceneParams scene_from_json(const json& j) {
  SceneParams p;
  p.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
  p.semi_major = j.at("semi_axes").at(0).get<double>();
  p.semi_minor = j.at("semi_axes").at(1).get<double>();
  p.rotation = j.at("rotation").get<double>();
  p.speckle_sigma = j.at("speckle_sigma").get<double>();
  p.shadow = j.at("shadow").get<bool>();
  p.lesion_intensity = j.at("lesion_intensity").get<double>();
  for (size_t i = 0; i < 3; ++i)
    p.landmarks[i] = {j.at("landmarks").at(i).at(0).get<double>(),
                      j.at("landmarks").at(i).at(1).get<double>()};
  return p;
}

json to_json(const Manifest& m) {
  json recs = json::array();
  const int res = m.spec.train_resolution;
  const Size2 orig{res * m.options.native_scale, res * m.options.native_scale};
  for (const auto& r : m.records) {
    const auto box = scene_box(r.params);
    recs.push_back({{"seed", m.seed},
                    {"index", r.index},
                    {"params", to_json(r.params)},
                    {"annotated", r.annotated},
                    {"summary",
                     {{"eccentricity", r.params.eccentricity()},
                      {"label", r.label},
                      {"box", {box.x_min, box.y_min, box.x_max, box.y_max}},
                      {"angle_deg", landmark_angle_deg(r.params, orig)}}}});
  }
  return {{"schema_version", io::kSchemaVersion},
          {"seed", m.seed},
          {"dataset", io::to_json(m.spec)},
          {"options",
           {{"speckle_sigma", m.options.speckle_sigma},
            {"eccentricity_threshold", m.options.eccentricity_threshold},
            {"native_scale", m.options.native_scale},
            {"unannotated_fraction", m.options.unannotated_fraction}}},
          {"records", recs}};
}

Manifest manifest_from_json(const json& j) {
  try {
    Manifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.spec = io::dataset_spec_from_json(j.at("dataset"));
    const auto& o = j.at("options");
    m.options.speckle_sigma = o.at("speckle_sigma").get<double>();
    m.options.eccentricity_threshold = o.at("eccentricity_threshold").get<double>();
    m.options.native_scale = o.at("native_scale").get<int>();
    m.options.unannotated_fraction = o.at("unannotated_fraction").get<double>();
    for (const auto& r : j.at("records"))
      m.records.push_back({r.at("index").get<std::int64_t>(), scene_from_json(r.at("params")),
                           r.at("summary").at("label").get<int>(), r.at("annotated").get<bool>()});
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("manifest: ") + e.what());
  }
}

std::string sample_stem(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld", static_cast<long long>(index));
  return buf;
}

void write_dataset(const std::filesystem::path& dir, const GeneratedDataset& data) {
  for (size_t i = 0; i < data.samples.size(); ++i)
    io::write_sample(dir, sample_stem(data.manifest.records[i].index), data.samples[i]);
  io::write_json(dir / "manifest.json", to_json(data.manifest));
}

GeneratedDataset read_dataset(const std::filesystem::path& dir) {
  GeneratedDataset out;
  out.manifest = manifest_from_json(io::read_json(dir / "manifest.json"));
  for (const auto& r : out.manifest.records)
    out.samples.push_back(io::read_sample(dir, sample_stem(r.index)));
  return out;
}

}  // namespace echoflow::synth
