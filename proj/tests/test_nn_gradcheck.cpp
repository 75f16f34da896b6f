#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "echoflow/nn/ops.hpp"

using namespace echoflow::nn;

static_assert(std::is_same_v<Scalar, double>, "gradient checks need the double build");

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  auto t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Max relative error between backward() and central differences of
// L = sum(w * f(inputs)) with fixed random w.
double check(const Fn& f, std::vector<Tensor> inputs, uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  for (auto& in : inputs) in.zero_grad();  // inputs may be shared between checks
  auto out = f(inputs);
  std::vector<double> w(out.numel());
  for (auto& v : w) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  backward(out, w);
  auto loss = [&] {
    const auto y = f(inputs);
    double s = 0;
    for (size_t i = 0; i < w.size(); ++i) s += w[i] * y.data()[i];
    return s;
  };
  double worst = 0;
  const double h = 1e-6;
  for (auto& in : inputs) {
    std::vector<double> analytic(in.grad().begin(), in.grad().end());
    double num2 = 0, diff2 = 0;
    for (size_t i = 0; i < in.numel(); ++i) {
      const double x = in.data()[i];
      in.data()[i] = x + h;
      const double up = loss();
      in.data()[i] = x - h;
      const double dn = loss();
      in.data()[i] = x;
      const double g = (up - dn) / (2 * h);
      num2 += g * g;
      diff2 += (g - analytic[i]) * (g - analytic[i]);
    }
    worst = std::max(worst, std::sqrt(diff2) / std::max(std::sqrt(num2), 1e-12));
  }
  return worst;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(GradCheck, Conv2dStrideAndPad) {
  std::mt19937_64 rng(1);
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      auto x = random_tensor({2, 3, 6, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
      EXPECT_LT(check([&](auto& v) { return conv2d(v[0], v[1], v[2], stride, pad); }, {x, w, b}), kTol)
          << stride << " " << pad;
    }
}

TEST(GradCheck, Linear) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
  EXPECT_LT(check([](auto& v) { return linear(v[0], v[1], v[2]); }, {x, w, b}), kTol);
}

TEST(GradCheck, AddAndBroadcast) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 3, 4}, rng), p = random_tensor({3, 4}, rng);
  EXPECT_LT(check([](auto& v) { return add(v[0], v[1]); }, {a, b}), kTol);
  EXPECT_LT(check([](auto& v) { return add_broadcast(v[0], v[1]); }, {a, p}), kTol);
}

TEST(GradCheck, Activations) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({3, 7}, rng);
  // keep relu inputs away from the kink
  for (auto& v : x.data()) v += v > 0 ? 0.1 : -0.1;
  EXPECT_LT(check([](auto& v) { return relu(v[0]); }, {x}), kTol);
  EXPECT_LT(check([](auto& v) { return gelu(v[0]); }, {x}), kTol);
}

TEST(GradCheck, LayerNorm) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  EXPECT_LT(check([](auto& v) { return layer_norm(v[0], v[1], v[2]); }, {x, g, b}), kTol);
}

TEST(GradCheck, MultiHeadAttention) {
  std::mt19937_64 rng(6);
  auto qkv = random_tensor({2, 5, 12}, rng);
  EXPECT_LT(check([](auto& v) { return multi_head_attention(v[0], 2); }, {qkv}), kTol);
}

TEST(GradCheck, TokenReshapes) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 2, 4}, rng);
  EXPECT_LT(check([](auto& v) { return tokens_to_map(map_to_tokens(v[0]), 2, 4); }, {x}), kTol);
  auto t = random_tensor({2, 8, 3}, rng);
  EXPECT_LT(check([](auto& v) { return map_to_tokens(tokens_to_map(v[0], 2, 4)); }, {t}), kTol);
}

TEST(GradCheck, Upsample) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({1, 2, 3, 4}, rng);
  EXPECT_LT(check([](auto& v) { return upsample2x(v[0]); }, {x}), kTol);
}

TEST(GradCheck, ConcatAndPool) {
  std::mt19937_64 rng(9);
  auto a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 3, 3, 3}, rng);
  EXPECT_LT(check([](auto& v) { return concat_channels({v[0], v[1]}); }, {a, b}), kTol);
  EXPECT_LT(check([](auto& v) { return global_avg_pool(v[0]); }, {a}), kTol);
}

TEST(GradCheck, ScaleShift) {
  std::mt19937_64 rng(10);
  auto x = random_tensor({3, 4}, rng), s = random_tensor({4}, rng), t = random_tensor({4}, rng);
  EXPECT_LT(check([](auto& v) { return scale_shift(v[0], v[1], v[2]); }, {x, s, t}), kTol);
}

TEST(GradCheck, AttentionPool) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({2, 3, 4, 4}, rng), l = random_tensor({2, 1, 4, 4}, rng, -3, 3);
  EXPECT_LT(check([](auto& v) { return attention_pool(v[0], v[1]); }, {x, l}), kTol);
}

// A small composite graph: shared inputs reached along several paths.
TEST(GradCheck, CompositeWithFanOut) {
  std::mt19937_64 rng(12);
  auto x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2}, rng);
  EXPECT_LT(check(
                [](auto& v) {
                  const auto y = gelu(conv2d(v[0], v[1], v[2], 1, 1));
                  return add(concat_channels({y, v[0]}), concat_channels({v[0], y}));
                },
                {x, w, b}),
            kTol);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto x = Tensor::filled({2, 2}, 1.0);
  x.set_requires_grad(true);
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    const auto y = relu(x);
    EXPECT_TRUE(y.node()->inputs.empty());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Autograd, ConvMatchesDirectSum) {
  // 1 channel, 3x3 input, 2x2 kernel, no pad: hand-summed outputs
  std::vector<double> xv{1, 2, 3, 4, 5, 6, 7, 8, 9}, wv{1, 0, 0, -1}, bv{0.5};
  const auto y = conv2d(Tensor::from({1, 1, 3, 3}, xv), Tensor::from({1, 1, 2, 2}, wv), Tensor::from({1}, bv), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, -4 + 0.5);
}
