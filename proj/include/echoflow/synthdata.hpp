#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoflow/core.hpp"

namespace echoflow::synth {

// One ultrasound-like scene: a speckled elliptical lesion on a darker
// background, an optional posterior shadow, and three distinguishable
// landmark markers (disc, ring, cross) placed outside the lesion.
struct SceneParams {
  Point2 center{0.5, 0.5};
  double semi_major = 0.2;  // a
  double semi_minor = 0.2;  // b
  double rotation = 0.0;    // radians, major axis measured from +x towards +y
  double speckle_sigma = 0.15;
  bool shadow = false;
  double lesion_intensity = 0.7;
  std::array<Point2, 3> landmarks{};

  double eccentricity() const;
  // Implicit ellipse value: < 1 inside, 1 on the boundary.
  double ellipse_value(double x, double y) const;
  bool operator==(const SceneParams&) const = default;
};

struct GeneratorOptions {
  double speckle_sigma = 0.15;
  double eccentricity_threshold = 0.75;
  int native_scale = 2;               // original resolution = native_scale * train_resolution
  double unannotated_fraction = 0.0;  // DET only: fraction of samples with the INVALID box
};

// Checks the SceneParams invariants (ellipse inside [0.05,0.95]^2, a >= b > 0,
// landmarks inside the unit square).
std::optional<std::string> check_scene(const SceneParams& p);

SceneParams draw_scene(std::uint64_t seed, std::int64_t index, const GeneratorOptions& opts);

int malignancy_label(const SceneParams& p, double threshold);
NormBox scene_box(const SceneParams& p);
MaskMap rasterize_mask(const SceneParams& p, int height, int width);
double vertex_angle_deg(const Point2& p1, const Point2& p2, const Point2& p3);
// Vertex angle of the landmark triple measured in an h x w pixel frame.
double landmark_angle_deg(const SceneParams& p, Size2 frame);

// Renders at `native` resolution with multiplicative speckle, then
// box-downsamples by native_scale and quantizes to 8-bit levels.
ImageGray render_scene(const SceneParams& p, int resolution, int native_scale,
                       std::uint64_t noise_seed);

Sample make_sample(const SceneParams& p, const DatasetSpec& spec, const GeneratorOptions& opts,
                   std::uint64_t noise_seed, bool annotated = true);

// Pure function of (seed, dataset, index). Throws UnknownDataset.
Sample generate_scene(std::uint64_t seed, const Registry& registry, const std::string& dataset_id,
                      std::int64_t index, const GeneratorOptions& opts = {});

struct ManifestRecord {
  std::int64_t index = 0;
  SceneParams params;
  int label = 0;
  bool annotated = true;
};

struct Manifest {
  std::uint64_t seed = 0;
  DatasetSpec spec;
  GeneratorOptions options;
  std::vector<ManifestRecord> records;

  bool operator==(const Manifest& o) const;
};

struct GeneratedDataset {
  std::vector<Sample> samples;
  Manifest manifest;
};

GeneratedDataset generate_dataset(std::uint64_t seed, const Registry& registry,
                                  const std::string& dataset_id, int n,
                                  const GeneratorOptions& opts = {}, std::int64_t first_index = 0);

nlohmann::json to_json(const SceneParams& p);
SceneParams scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

// Directory layout: images/, annotations/, masks/, manifest.json.
void write_dataset(const std::filesystem::path& dir, const GeneratedDataset& data);
GeneratedDataset read_dataset(const std::filesystem::path& dir);

std::string sample_stem(std::int64_t index);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace echoflow::synth
