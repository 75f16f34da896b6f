#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "echoflow/nn/ops.hpp"

namespace echoflow::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

enum class Init { HeNormal, SmallNormal, Zero };

Tensor make_param(Shape shape, Init init, int fan_in, std::mt19937_64& rng);

struct Conv2d {
  Tensor weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad, std::mt19937_64& rng,
         Init init = Init::HeNormal);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, Init init = Init::HeNormal);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;
};

void set_requires_grad(const ParamList& params, bool on);

// Adam without weight decay. Each group carries its own learning rate.
class Adam {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
  };

  explicit Adam(std::vector<Group> groups, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  void step();
  void zero_grad();
  long steps() const { return t_; }
  // multiplies every group lr; used for warmup
  void set_lr_scale(double s) { lr_scale_ = s; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  std::vector<Group> groups_;
  std::vector<std::vector<State>> state_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace echoflow::nn
