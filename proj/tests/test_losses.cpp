#include <gtest/gtest.h>

#include <cmath>

#include "echoflow/losses.hpp"
#include "echoflow/model.hpp"
#include "oracles.hpp"

using namespace echoflow;
using namespace echoflow::losses;

TEST(Dice, SaturatedPerfectPredictionNearZero) {
  MaskMap m(4, 4);
  for (int i = 0; i < 8; ++i) m.labels[size_t(i)] = 1;
  std::vector<double> x(32);
  for (int i = 0; i < 16; ++i) {
    x[size_t(i)] = m.labels[size_t(i)] == 0 ? 50 : -50;
    x[size_t(16 + i)] = m.labels[size_t(i)] == 1 ? 50 : -50;
  }
  EXPECT_LT(dice_loss(x, 2, m, 1.0).value, 1e-6);
}

TEST(Dice, UniformLogitsHalfOnFourByFour) {
  MaskMap m(4, 4);
  for (int i = 0; i < 8; ++i) m.labels[size_t(i)] = 1;
  const std::vector<double> x(32, 0.0);
  // per class: 2 * (0.5 * 8) / (0.5 * 16 + 8) = 0.5
  const double per_class = 2 * 0.5 * 8 / (0.5 * 16 + 8);
  EXPECT_NEAR(dice_loss(x, 2, m, 0.0).value, 1 - per_class, 1e-6);
  EXPECT_NEAR(dice_loss(x, 2, m, 0.0).value, 0.5, 1e-6);
}

TEST(Dice, EmptyClassWithSmoothingContributesOne) {
  // class 2 absent in mask and saturated away in the prediction
  MaskMap m(2, 2);
  m.labels = {0, 1, 0, 1};
  std::vector<double> x(12, -50);
  for (int i = 0; i < 4; ++i) x[size_t(m.labels[size_t(i)]) * 4 + size_t(i)] = 50;
  EXPECT_LT(dice_loss(x, 3, m, 1.0).value, 1e-6);
}

TEST(Dice, ShapeMismatchThrows) {
  MaskMap m(2, 2);
  std::vector<double> x(7);
  try {
    dice_loss(x, 2, m, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Dice, ValueInUnitInterval) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 3);
  for (int t = 0; t < 50; ++t) {
    MaskMap m(3, 3);
    for (auto& v : m.labels) v = std::uint8_t(rng() % 3);
    std::vector<double> x(27);
    for (auto& v : x) v = g(rng);
    const double l = dice_loss(x, 3, m, t % 2).value;
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 1.0);
  }
}

TEST(Ce, UniformIsLogTwo) {
  EXPECT_NEAR(ce_loss(std::vector<double>{0.3, 0.3}, 1).value, std::log(2.0), 1e-12);
}

TEST(Ce, SaturatedClosedForm) {
  // -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
  EXPECT_NEAR(ce_loss(std::vector<double>{10, -10}, 0).value, std::log1p(std::exp(-20.0)), 1e-15);
  EXPECT_NEAR(ce_loss(std::vector<double>{10, -10}, 0).value, 2.06e-9, 1e-11);
}

TEST(Ce, MonotoneInTrueLogit) {
  double prev = 1e9;
  for (double z = -3; z <= 3; z += 0.5) {
    const double v = ce_loss(std::vector<double>{z, 0.2, -0.1}, 0).value;
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Ce, BadLabelThrows) {
  EXPECT_THROW(ce_loss(std::vector<double>{0, 0}, 2), Error);
}

TEST(Mse, IdentityZero) {
  const std::vector<double> a{0.1, 0.5, 1.0};
  EXPECT_EQ(heatmap_mse(a, a).value, 0.0);
}

TEST(Mse, ZeroPredictionAgainstCenteredGaussian) {
  KeypointSet k{{{32.5 / 64, 32.5 / 64}}};
  const auto h = model::encode_target(k, 64, 64);
  // brute-force mean of H^2 from the Gaussian formula directly
  double s = 0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      const double d2 = double((r - 32) * (r - 32) + (c - 32) * (c - 32));
      s += std::exp(-d2 / 4.0);  // (exp(-d2/8))^2
    }
  const std::vector<double> zero(h.values.size(), 0.0);
  EXPECT_NEAR(heatmap_mse(zero, h.values).value, s / 4096.0, 1e-12);
}

TEST(Mse, QuadraticHomogeneity) {
  const std::vector<double> t{0.1, 0.2, 0.3}, p{0.4, -0.1, 0.35};
  std::vector<double> p2(3);
  for (int i = 0; i < 3; ++i) p2[size_t(i)] = t[size_t(i)] + 2 * (p[size_t(i)] - t[size_t(i)]);
  EXPECT_NEAR(heatmap_mse(p2, t).value, 4 * heatmap_mse(p, t).value, 1e-15);
}

TEST(Mse, ShapeMismatchThrows) {
  EXPECT_THROW(heatmap_mse(std::vector<double>{1, 2}, std::vector<double>{1}), Error);
}

TEST(BoxIou, IdentityNearOne) {
  const NormBox b{0.25, 0.25, 0.75, 0.75};
  EXPECT_NEAR(box_iou(b, b, 1e-7), 0.25 / (0.25 + 1e-7), 1e-15);
}

TEST(BoxIou, DisjointZero) {
  EXPECT_EQ(box_iou({0, 0, 0.2, 0.2}, {0.5, 0.5, 0.7, 0.7}, 1e-7), 0.0);
}

TEST(BoxIou, OneSeventhCase) {
  const NormBox a{0, 0, 0.5, 0.5}, b{0.25, 0.25, 0.75, 0.75};
  EXPECT_NEAR(box_iou(a, b, 1e-7), 0.0625 / (0.4375 + 1e-7), 1e-15);
  EXPECT_NEAR(box_iou(a, b, 1e-7), 1.0 / 7, 1e-6);
  EXPECT_DOUBLE_EQ(box_iou(a, b, 1e-7), box_iou(b, a, 1e-7));
}

TEST(BoxIou, InvalidThrows) {
  try {
    box_iou(NormBox::invalid(), {0, 0, 1, 1}, 1e-7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidBox);
  }
}

TEST(DetLoss, IdentityNearZero) {
  const NormBox b{0.1, 0.2, 0.6, 0.7};
  EXPECT_LT(det_loss(b, b, {}, true).value, 1e-6);
}

TEST(DetLoss, ThirteenSevenths) {
  LossConfig cfg;
  cfg.alpha = 1;
  EXPECT_NEAR(det_loss({0, 0, 0.5, 0.5}, {0.25, 0.25, 0.75, 0.75}, cfg, true).value, 13.0 / 7, 1e-6);
}

TEST(DetLoss, MaskedIsExactlyZero) {
  const auto l = det_loss({0, 0, 0.5, 0.5}, {0.25, 0.25, 0.75, 0.75}, {}, false);
  EXPECT_EQ(l.value, 0.0);
  for (double g : l.grad) EXPECT_EQ(g, 0.0);
  const auto l2 = det_loss({0, 0, 0.5, 0.5}, NormBox::invalid(), {}, true);
  EXPECT_EQ(l2.value, 0.0);
}

TEST(DetLoss, NonNegative) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 0.5);
  for (int t = 0; t < 100; ++t) {
    const double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    EXPECT_GE(det_loss({a, b, a + 0.3, b + 0.3}, {c, d, c + 0.2, d + 0.4}, {}, true).value, 0.0);
  }
}

TEST(LossConfig, Validation) {
  LossConfig c;
  c.alpha = -1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.eps_iou = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.dice_smooth = -0.1;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_NO_THROW(LossConfig{}.validate());
}

TEST(Gradients, AllFourLossesMatchCentralDifferences) {
  const auto rep = oracle::loss_gradient_check(20, 77);
  EXPECT_LT(rep.dice, 1e-4);
  EXPECT_LT(rep.ce, 1e-4);
  EXPECT_LT(rep.mse, 1e-4);
  EXPECT_LT(rep.det, 1e-4);
}

// Masked samples contribute neither value nor gradient.
TEST(Batch, DetMaskedSamplesDropOut) {
  const std::vector<float> raw{0.1f, -0.2f, 0.3f, 0.4f, 1.0f, 0.5f, -0.5f, 0.0f, 0.2f, 0.2f, 0.2f, 0.2f};
  const std::vector<NormBox> all{{0.2, 0.2, 0.6, 0.7}, NormBox::invalid(), {0.1, 0.1, 0.4, 0.5}};
  const auto full = det_batch_loss(raw, 3, all, {});
  EXPECT_EQ(full.count, 2);
  for (int i = 4; i < 8; ++i) EXPECT_EQ(full.seed[size_t(i)], 0.0);

  std::vector<float> raw2(raw.begin(), raw.begin() + 4);
  raw2.insert(raw2.end(), raw.begin() + 8, raw.end());
  const auto sub = det_batch_loss(raw2, 2, {all[0], all[2]}, {});
  EXPECT_NEAR(full.value, sub.value, 1e-12);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(full.seed[size_t(i)], sub.seed[size_t(i)], 1e-15);
    EXPECT_NEAR(full.seed[size_t(8 + i)], sub.seed[size_t(4 + i)], 1e-15);
  }
}

TEST(Batch, DetAllMaskedIsZero) {
  const std::vector<float> raw(8, 0.3f);
  const auto l = det_batch_loss(raw, 2, {NormBox::invalid(), NormBox::invalid()}, {});
  EXPECT_EQ(l.count, 0);
  EXPECT_EQ(l.value, 0.0);
}

TEST(Batch, ClsChannelSliceLeavesOtherChannelsZero) {
  const std::vector<float> logits{0.1f, 0.5f, -0.3f, 1.0f, 0.0f, 2.0f};
  const auto l = cls_batch_loss(logits, 2, 3, {1, 0}, {0, 1});
  EXPECT_EQ(l.seed[2], 0.0);
  EXPECT_EQ(l.seed[5], 0.0);
  const double expect = 0.5 * (ce_loss(std::vector<double>{0.1, 0.5}, 1).value +
                               ce_loss(std::vector<double>{1.0, 0.0}, 0).value);
  EXPECT_NEAR(l.value, expect, 1e-6);
}

// box_raw_grad is the chain rule through box_from_raw.
TEST(Batch, BoxSquashingGradient) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0, 1);
  for (int t = 0; t < 20; ++t) {
    std::array<double, 4> u{g(rng), g(rng), g(rng), g(rng)};
    std::array<double, 4> w{g(rng), g(rng), g(rng), g(rng)};
    auto f = [&](const std::vector<double>& z) {
      const std::array<double, 4> a{z[0], z[1], z[2], z[3]};
      const auto b = model::box_from_raw(a);
      return w[0] * b.x_min + w[1] * b.y_min + w[2] * b.x_max + w[3] * b.y_max;
    };
    const auto an = model::box_raw_grad(u, w);
    const auto num = oracle::central_diff(f, {u.begin(), u.end()});
    EXPECT_LT(oracle::rel_error({an.begin(), an.end()}, num), 1e-6);
    const auto b = model::box_from_raw(u);
    EXPECT_LE(b.x_min, b.x_max);
    EXPECT_LE(b.y_min, b.y_max);
    EXPECT_GE(b.x_min, 0);
    EXPECT_LE(b.x_max, 1);
  }
}
