#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "echoflow/losses.hpp"
#include "echoflow/model.hpp"
#include "echoflow/synthdata.hpp"
#include "test_util.hpp"

using namespace echoflow;
using namespace echoflow::model;

namespace {

bool all_finite(std::span<const float> v) {
  for (float x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

struct Fixture {
  BackboneConfig bb = testutil::tiny_backbone();
  Registry reg = testutil::tiny_registry(bb.resolution);
  MultiTaskModel m{bb, 5};
  std::vector<Sample> samples;
  Tensor x;

  Fixture() {
    std::vector<DatasetSpec> specs;
    for (const auto& [id, s] : reg.specs()) specs.push_back(s);
    m.ensure_generalist(specs, 5);
    for (int i = 0; i < 2; ++i) samples.push_back(synth::generate_scene(4, reg, "lesion_seg", i));
    std::vector<const ImageGray*> imgs;
    for (auto& s : samples) imgs.push_back(&s.image);
    x = images_to_tensor(imgs);
  }
  const TaskHead& head(TaskKind k) const { return *m.generalist_heads.at(k); }
};

}  // namespace

TEST(Backbone, DefaultConfigArithmetic) {
  BackboneConfig c;
  EXPECT_EQ(c.resolution, 128);
  EXPECT_EQ(c.grid() * c.grid(), 64);
  EXPECT_EQ(c.stem_size(), 32);
  EXPECT_EQ(c.depth, 4);
  EXPECT_EQ(c.embed_dim, 192);
  EXPECT_EQ(c.heads, 3);
  EXPECT_EQ(c.stem_width, 64);
}

TEST(Backbone, DefaultShapes) {
  BackboneConfig c;
  MultiTaskModel m(c, 1);
  nn::NoGradGuard g;
  const auto f = m.backbone.encode(Tensor::zeros({1, 1, 128, 128}));
  EXPECT_EQ(f.tokens.shape(), (nn::Shape{1, 64, 192}));
  EXPECT_EQ(f.stem.shape(), (nn::Shape{1, 64, 32, 32}));
  EXPECT_EQ(f.scales.size(), 2u);
  EXPECT_EQ(f.scales[1].shape(), (nn::Shape{1, 128, 16, 16}));
  // constant-zero image stays finite
  EXPECT_TRUE(all_finite(f.tokens.data()));
  EXPECT_TRUE(all_finite(f.stem.data()));
}

TEST(Backbone, ConfigValidation) {
  BackboneConfig c;
  c.patch = 24;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_NO_THROW(BackboneConfig{}.validate());
}

TEST(Backbone, WrongResolutionIsShapeMismatch) {
  Fixture fx;
  try {
    fx.m.backbone.encode(Tensor::zeros({1, 1, 16, 16}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Backbone, DeterministicInInference) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto a = fx.m.backbone.encode(fx.x), b = fx.m.backbone.encode(fx.x);
  EXPECT_EQ(values(a.tokens), values(b.tokens));
  EXPECT_EQ(values(a.stem), values(b.stem));
}

TEST(Heads, SegShapeAndNonConstant) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto y = seg_forward(fx.m.backbone.encode(fx.x), fx.head(TaskKind::Seg));
  EXPECT_EQ(y.shape(), (nn::Shape{2, 2, fx.bb.resolution, fx.bb.resolution}));
  EXPECT_TRUE(all_finite(y.data()));
  const auto v = values(y);
  EXPECT_GT(*std::max_element(v.begin(), v.end()), *std::min_element(v.begin(), v.end()));
}

TEST(Heads, DetAlwaysValidBox) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto y = det_forward(fx.m.backbone.encode(fx.x), fx.head(TaskKind::Det));
  ASSERT_EQ(y.shape(), (nn::Shape{2, 4}));
  for (int i = 0; i < 2; ++i) {
    std::array<double, 4> u;
    for (size_t j = 0; j < 4; ++j) u[j] = y.data()[size_t(i) * 4 + j];
    const auto b = box_from_raw(u);
    EXPECT_TRUE(b.x_min >= 0 && b.x_min <= b.x_max && b.x_max <= 1);
    EXPECT_TRUE(b.y_min >= 0 && b.y_min <= b.y_max && b.y_max <= 1);
  }
  // extreme raw values still give valid boxes
  for (double big : {-1e6, 1e6}) {
    const std::array<double, 4> u{big, -big, big, big};
    const auto b = box_from_raw(u);
    EXPECT_TRUE(b.x_min >= 0 && b.x_min <= b.x_max && b.x_max <= 1);
  }
}

// det_loss gradient reaches the head parameters: backprop and a finite
// difference on one output-layer weight agree in sign and are nonzero.
TEST(Heads, DetLossGradientReachesHead) {
  Fixture fx;
  const auto& head = fx.head(TaskKind::Det);
  nn::ParamList ps;
  head.collect(ps, "det");
  const std::vector<NormBox> gt{{0.6, 0.6, 0.9, 0.9}, {0.6, 0.6, 0.9, 0.9}};
  auto loss_of = [&] {
    nn::NoGradGuard g;
    const auto y = det_forward(fx.m.backbone.encode(fx.x), head);
    return losses::det_batch_loss(y.data(), 2, gt, {}).value;
  };
  const auto y = det_forward(fx.m.backbone.encode(fx.x), head);
  const auto bl = losses::det_batch_loss(y.data(), 2, gt, {});
  std::vector<nn::Scalar> seed(bl.seed.begin(), bl.seed.end());
  nn::backward(y, seed);
  double total = 0;
  for (auto& p : ps)
    if (p.tensor.has_grad())
      for (auto g : p.tensor.grad()) total += std::abs(g);
  EXPECT_GT(total, 0.0);

  // probe a bias of the last layer
  nn::Tensor target;
  for (auto& p : ps)
    if (p.name == "det.fc2.bias") target = p.tensor;
  ASSERT_TRUE(target.defined());
  const double an = target.grad()[0];
  const float keep = target.data()[0];
  const float h = 1e-2f;
  target.data()[0] = keep + h;
  const double up = loss_of();
  target.data()[0] = keep - h;
  const double dn = loss_of();
  target.data()[0] = keep;
  const double num = (up - dn) / (2 * h);
  EXPECT_NE(num, 0.0);
  EXPECT_NEAR(an, num, 0.05 * std::abs(num) + 1e-4);
}

TEST(Heads, RegShape) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto y = reg_forward(fx.m.backbone.encode(fx.x), fx.head(TaskKind::Reg));
  EXPECT_EQ(y.shape(), (nn::Shape{2, 3, fx.bb.resolution / 2, fx.bb.resolution / 2}));
  EXPECT_TRUE(all_finite(y.data()));
}

TEST(Heads, DefaultRegHeatmapIs64At128) {
  BackboneConfig c;
  EXPECT_EQ(default_head_config(TaskKind::Reg, 3, c).heatmap_size, 64);
}

TEST(Heads, ClsLogitsLengthTwo) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto y = cls_forward(fx.m.backbone.encode_stem(fx.x), nullptr, fx.head(TaskKind::Cls));
  EXPECT_EQ(y.shape(), (nn::Shape{2, 2}));
}

TEST(Heads, KindMismatchThrows) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto f = fx.m.backbone.encode(fx.x);
  try {
    seg_forward(f, fx.head(TaskKind::Det));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::HeadKindMismatch);
  }
  EXPECT_THROW(cls_forward(f.stem, nullptr, fx.head(TaskKind::Seg)), Error);
  EXPECT_THROW(reg_forward(f, fx.head(TaskKind::Cls)), Error);
  EXPECT_THROW(det_forward(f, fx.head(TaskKind::Reg)), Error);
}

TEST(Adapter, FreshAdapterIsIdentity) {
  Fixture fx;
  nn::NoGradGuard g;
  std::mt19937_64 rng(3);
  StemAdapter enabled(fx.bb.stem_width, {true, 4}, rng);
  StemAdapter disabled(fx.bb.stem_width, {false, 4}, rng);
  const auto stem = fx.m.backbone.encode_stem(fx.x);
  const auto& head = fx.head(TaskKind::Cls);
  const auto base = values(cls_forward(stem, nullptr, head));
  EXPECT_EQ(values(cls_forward(stem, &enabled, head)), base);
  EXPECT_EQ(values(cls_forward(stem, &disabled, head)), base);
}

TEST(Adapter, RatioValidated) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(StemAdapter(8, {true, 0}, rng), Error);
}

// CLS reads the stem only; SEG depends on tokens.
TEST(Interface, ZeroingTokensChangesSegNotCls) {
  Fixture fx;
  nn::NoGradGuard g;
  const auto f = fx.m.backbone.encode(fx.x);
  FeatureBundle z = f;
  z.tokens = Tensor::zeros(f.tokens.shape());
  EXPECT_NE(values(seg_forward(f, fx.head(TaskKind::Seg))), values(seg_forward(z, fx.head(TaskKind::Seg))));
  EXPECT_EQ(values(cls_forward(f.stem, nullptr, fx.head(TaskKind::Cls))),
            values(cls_forward(z.stem, nullptr, fx.head(TaskKind::Cls))));
  // and the standalone stem path agrees with the full encode
  EXPECT_EQ(values(fx.m.backbone.encode_stem(fx.x)), values(f.stem));

  // wiping the attention blocks moves the tokens but not the stem
  for (auto& p : fx.m.backbone_params())
    if (p.name.find(".block") != std::string::npos || p.name.find("patch_embed") != std::string::npos)
      for (auto& v : p.tensor.data()) v = 0;
  const auto f2 = fx.m.backbone.encode(fx.x);
  EXPECT_NE(values(f2.tokens), values(f.tokens));
  EXPECT_EQ(values(cls_forward(f2.stem, nullptr, fx.head(TaskKind::Cls))),
            values(cls_forward(f.stem, nullptr, fx.head(TaskKind::Cls))));
}

TEST(Keypoints, DecodeSinglePeak) {
  Heatmap h{1, 64, 64, std::vector<double>(64 * 64, 0.0)};
  h.values[10 * 64 + 20] = 1;
  const auto k = decode_keypoints(h);
  EXPECT_DOUBLE_EQ(k.points[0].x, 20.5 / 64);
  EXPECT_DOUBLE_EQ(k.points[0].y, 10.5 / 64);
}

TEST(Keypoints, UniformTieBreak) {
  Heatmap h{2, 64, 64, std::vector<double>(2 * 64 * 64, 0.3)};
  for (const auto& p : decode_keypoints(h).points) {
    EXPECT_DOUBLE_EQ(p.x, 0.5 / 64);
    EXPECT_DOUBLE_EQ(p.y, 0.5 / 64);
  }
}

TEST(Keypoints, EncodePeakAndSigmaValue) {
  const auto h = encode_target({{{20.5 / 64, 30.5 / 64}}}, 64, 64);
  EXPECT_EQ(h.at(0, 30, 20), 1.0);
  EXPECT_NEAR(h.at(0, 30, 22), std::exp(-0.5), 1e-12);
  EXPECT_NEAR(h.at(0, 32, 20), 0.6065, 1e-4);
  double mx = 0;
  for (double v : h.values) {
    EXPECT_GE(v, 0);
    mx = std::max(mx, v);
  }
  EXPECT_EQ(mx, 1.0);
}

TEST(Keypoints, ChannelSumIsTwoPiSigmaSquared) {
  const auto h = encode_target({{{32.5 / 64, 32.5 / 64}}}, 64, 64);
  double s = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) s += h.at(0, r, c);
  EXPECT_NEAR(s, 2 * std::numbers::pi * 4, 0.01);
}

TEST(Keypoints, NineByNineRoundTrip) {
  KeypointSet k;
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) k.points.push_back({0.1 + 0.1 * i, 0.1 + 0.1 * j});
  const auto d = decode_keypoints(encode_target(k, 64, 64));
  ASSERT_EQ(d.points.size(), 81u);
  for (size_t i = 0; i < 81; ++i) {
    EXPECT_LE(std::abs(d.points[i].x - k.points[i].x), 0.5 / 64 + 1e-12);
    EXPECT_LE(std::abs(d.points[i].y - k.points[i].y), 0.5 / 64 + 1e-12);
  }
}

TEST(Checkpoint, RoundTripPreservesHashAndOutputs) {
  testutil::TempDir dir("ckpt");
  Fixture fx;
  fx.m.visit_log = {"lesion_seg", "lesion_cls"};
  save_checkpoint(dir / "m.ckpt", fx.m);
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(hash_params(back.all_params()), hash_params(fx.m.all_params()));
  EXPECT_EQ(back.visit_log, fx.m.visit_log);
  EXPECT_EQ(back.channel_maps, fx.m.channel_maps);
  nn::NoGradGuard g;
  EXPECT_EQ(values(seg_forward(back.backbone.encode(fx.x), *back.generalist_heads.at(TaskKind::Seg))),
            values(seg_forward(fx.m.backbone.encode(fx.x), fx.head(TaskKind::Seg))));
}

TEST(Checkpoint, ConfigMismatchRejected) {
  testutil::TempDir dir("ckpt_bad");
  Fixture fx;
  save_checkpoint(dir / "m.ckpt", fx.m);
  auto other = fx.bb;
  other.depth = 2;
  try {
    load_checkpoint(dir / "m.ckpt", other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigMismatch);
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/m.ckpt"), Error);
}

TEST(Generalist, ChannelSlicesRecorded) {
  Fixture fx;
  EXPECT_EQ(fx.m.channel_maps.at("labor_reg"), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(fx.m.channel_maps.at("lesion_cls"), (std::vector<int>{0, 1}));
  EXPECT_EQ(fx.m.generalist_heads.size(), 4u);
}

TEST(Generalist, CloneHeadCopiesValues) {
  Fixture fx;
  auto copy = clone_head(fx.head(TaskKind::Seg), fx.bb);
  nn::ParamList a, b;
  fx.head(TaskKind::Seg).collect(a, "h");
  copy->collect(b, "h");
  EXPECT_EQ(hash_params(a), hash_params(b));
  b[0].tensor.data()[0] += 1;  // deep copy
  EXPECT_NE(hash_params(a), hash_params(b));
}
