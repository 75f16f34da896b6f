#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "echoflow/augment.hpp"
#include "echoflow/io.hpp"
#include "echoflow/synthdata.hpp"
#include "test_util.hpp"

using namespace echoflow;
using namespace echoflow::synth;

namespace {

SceneParams axis_scene(double a, double b) {
  SceneParams p;
  p.center = {0.5, 0.5};
  p.semi_major = a;
  p.semi_minor = b;
  p.rotation = 0;
  p.landmarks = {Point2{0.1, 0.1}, Point2{0.1, 0.9}, Point2{0.9, 0.9}};
  return p;
}

// Pixel-edge bounding box of all foreground pixels, brute force.
NormBox mask_bbox(const MaskMap& m) {
  int r0 = m.height, r1 = -1, c0 = m.width, c1 = -1;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  return {double(c0) / m.width, double(r0) / m.height, double(c1 + 1) / m.width, double(r1 + 1) / m.height};
}

}  // namespace

TEST(Generate, SameSeedIndexIsBitIdentical) {
  const auto reg = default_registry(64);
  for (const auto& id : reg.ids()) {
    const auto a = generate_scene(7, reg, id, 3);
    const auto b = generate_scene(7, reg, id, 3);
    EXPECT_EQ(a, b);
    EXPECT_EQ(0, std::memcmp(a.image.pixels.data(), b.image.pixels.data(), a.image.pixels.size() * sizeof(float)));
  }
}

TEST(Generate, DifferentIndexDiffers) {
  const auto reg = default_registry(64);
  EXPECT_NE(generate_scene(7, reg, "lesion_seg", 3).image, generate_scene(7, reg, "lesion_seg", 4).image);
}

TEST(Generate, UnknownDatasetThrows) {
  const auto reg = default_registry(64);
  try {
    generate_scene(1, reg, "nope", 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownDataset);
  }
}

TEST(Label, CircleIsBenign) {
  auto p = axis_scene(0.2, 0.2);
  EXPECT_DOUBLE_EQ(p.eccentricity(), 0.0);
  EXPECT_EQ(malignancy_label(p, 0.75), 0);
}

TEST(Label, ElongatedIsMalignantAndBoxWidthIsTwoA) {
  auto p = axis_scene(0.3, 0.1);
  EXPECT_NEAR(p.eccentricity(), std::sqrt(1 - 1.0 / 9), 1e-12);
  EXPECT_NEAR(p.eccentricity(), 0.943, 1e-3);
  EXPECT_EQ(malignancy_label(p, 0.75), 1);
  const auto box = scene_box(p);
  EXPECT_NEAR(box.width(), 0.6, 1e-12);
  EXPECT_NEAR(box.height(), 0.2, 1e-12);
  // analytic box vs rasterized mask hull at 128: within one pixel per edge
  const auto m = rasterize_mask(p, 128, 128);
  const auto hull = mask_bbox(m);
  EXPECT_NEAR(hull.x_min, box.x_min, 1.0 / 128);
  EXPECT_NEAR(hull.x_max, box.x_max, 1.0 / 128);
  EXPECT_NEAR(hull.y_min, box.y_min, 1.0 / 128);
  EXPECT_NEAR(hull.y_max, box.y_max, 1.0 / 128);
}

TEST(Dataset, CountsAndManifestLength) {
  const auto reg = default_registry(32);
  const auto d = generate_dataset(1, reg, "lesion_cls", 200);
  EXPECT_EQ(d.samples.size(), 200u);
  EXPECT_EQ(d.manifest.records.size(), 200u);
  EXPECT_EQ(d.manifest.seed, 1u);
}

TEST(Dataset, ManifestDeterministic) {
  const auto reg = default_registry(32);
  EXPECT_EQ(generate_dataset(3, reg, "labor_reg", 20).manifest, generate_dataset(3, reg, "labor_reg", 20).manifest);
}

TEST(Dataset, ClassesRoughlyBalanced) {
  const auto reg = default_registry(32);
  const auto d = generate_dataset(2, reg, "lesion_cls", 400);
  int pos = 0;
  for (const auto& r : d.manifest.records) pos += r.label;
  EXPECT_GT(pos, 160);
  EXPECT_LT(pos, 240);
}

TEST(Dataset, ScenesSatisfyInvariants) {
  const auto reg = default_registry(32);
  const auto d = generate_dataset(4, reg, "lesion_seg", 300);
  for (const auto& r : d.manifest.records) {
    EXPECT_FALSE(check_scene(r.params).has_value()) << *check_scene(r.params);
    for (const auto& l : r.params.landmarks) {
      EXPECT_GE(l.x, 0.0);
      EXPECT_LE(l.x, 1.0);
      EXPECT_GE(l.y, 0.0);
      EXPECT_LE(l.y, 1.0);
    }
  }
}

// Pixel-count area vs pi*a*b*h*w.
TEST(Raster, MaskAreaMatchesAnalytic) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    SceneParams p;
    p.semi_major = testutil::uniform(rng, 0.1, 0.3);
    p.semi_minor = testutil::uniform(rng, 0.1, p.semi_major);
    p.rotation = testutil::uniform(rng, 0, std::numbers::pi);
    p.center = {0.5, 0.5};
    const auto m = rasterize_mask(p, 128, 128);
    long count = 0;
    for (auto v : m.labels) count += v != 0;
    const double analytic = std::numbers::pi * p.semi_major * p.semi_minor * 128 * 128;
    EXPECT_LT(std::abs(count - analytic) / analytic, 0.03);
  }
}

// DET box of a scene equals the hull of its SEG mask within a pixel, and the
// mask lies inside the box.
TEST(Raster, BoxMatchesMaskHull) {
  const auto reg = default_registry(128);
  const auto d = generate_dataset(6, reg, "lesion_seg", 60);
  for (size_t i = 0; i < d.samples.size(); ++i) {
    const auto& m = std::get<MaskMap>(d.samples[i].target);
    const auto box = scene_box(d.manifest.records[i].params);
    const auto hull = mask_bbox(m);
    EXPECT_NEAR(hull.x_min, box.x_min, 1.0 / 128);
    EXPECT_NEAR(hull.y_min, box.y_min, 1.0 / 128);
    EXPECT_NEAR(hull.x_max, box.x_max, 1.0 / 128);
    EXPECT_NEAR(hull.y_max, box.y_max, 1.0 / 128);
    for (int r = 0; r < 128; ++r)
      for (int c = 0; c < 128; ++c)
        if (m.at(r, c)) {
          const auto q = pixel_center(r, c, 128, 128);
          EXPECT_GE(q.x, box.x_min - 1.0 / 128);
          EXPECT_LE(q.x, box.x_max + 1.0 / 128);
          EXPECT_GE(q.y, box.y_min - 1.0 / 128);
          EXPECT_LE(q.y, box.y_max + 1.0 / 128);
        }
  }
}

TEST(Raster, ImagesAreQuantizedAndInRange) {
  const auto reg = default_registry(32);
  const auto s = generate_scene(1, reg, "lesion_seg", 0);
  for (float v : s.image.pixels) {
    EXPECT_GE(v, 0.f);
    EXPECT_LE(v, 1.f);
    EXPECT_EQ(v, io::dequantize_intensity(io::quantize_intensity(v)));
  }
  EXPECT_EQ(s.original_size, (Size2{64, 64}));
}

TEST(Raster, LesionBrighterThanBackground) {
  auto p = axis_scene(0.2, 0.15);
  p.speckle_sigma = 0;
  p.lesion_intensity = 0.7;
  const auto img = render_scene(p, 64, 2, 1);
  EXPECT_NEAR(img.at(32, 32), 0.7, 0.01);
  EXPECT_LT(img.at(2, 32), 0.35);
}

TEST(Angle, VertexAngleOracle) {
  EXPECT_NEAR(vertex_angle_deg({0, 0}, {1, 0}, {1, 1}), 90.0, 1e-12);
  EXPECT_NEAR(vertex_angle_deg({0, 0}, {1, 0}, {2, 1}), 135.0, 1e-12);
  EXPECT_NEAR(vertex_angle_deg({0, 0}, {1, 0}, {2, 0}), 180.0, 1e-12);
}

TEST(Dataset, UnannotatedFractionMarksDetBoxesInvalid) {
  const auto reg = default_registry(32);
  GeneratorOptions o;
  o.unannotated_fraction = 0.5;
  const auto d = generate_dataset(3, reg, "lesion_det", 100, o);
  int invalid = 0;
  for (size_t i = 0; i < d.samples.size(); ++i) {
    const bool inv = std::get<NormBox>(d.samples[i].target).is_invalid();
    invalid += inv;
    EXPECT_EQ(inv, !d.manifest.records[i].annotated);
  }
  EXPECT_GT(invalid, 25);
  EXPECT_LT(invalid, 75);
}

TEST(Dataset, WriteReadRoundTrip) {
  testutil::TempDir dir("synth_rt");
  const auto reg = default_registry(32);
  for (const auto& id : reg.ids()) {
    const auto d = generate_dataset(8, reg, id, 5);
    write_dataset(dir / id, d);
    const auto back = read_dataset(dir / id);
    EXPECT_EQ(back.manifest, d.manifest);
    EXPECT_EQ(back.samples, d.samples);
  }
}

TEST(Dataset, ManifestRecordsThreshold) {
  const auto reg = default_registry(32);
  const auto j = to_json(generate_dataset(1, reg, "lesion_cls", 2).manifest);
  EXPECT_EQ(j.dump().find("eccentricity_threshold") != std::string::npos, true);
}
