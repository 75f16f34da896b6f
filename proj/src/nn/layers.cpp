#include "echoflow/nn/layers.hpp"

#include <cmath>

namespace echoflow::nn {

Tensor make_param(Shape shape, Init init, int fan_in, std::mt19937_64& rng) {
  auto t = Tensor::zeros(std::move(shape), true);
  if (init == Init::Zero) return t;
  const double stddev = init == Init::HeNormal ? std::sqrt(2.0 / double(fan_in)) : 0.02;
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = Scalar(dist(rng));
  return t;
}

Conv2d::Conv2d(int in, int out, int kernel, int stride_, int pad_, std::mt19937_64& rng, Init init)
    : weight(make_param({out, in, kernel, kernel}, init, in * kernel * kernel, rng)),
      bias(Tensor::zeros({out}, true)),
      stride(stride_),
      pad(pad_) {}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Linear::Linear(int in, int out, std::mt19937_64& rng, Init init)
    : weight(make_param({out, in}, init, in, rng)), bias(Tensor::zeros({out}, true)) {}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int dim) : gamma(Tensor::filled({dim}, Scalar(1))), beta(Tensor::zeros({dim})) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void set_requires_grad(const ParamList& params, bool on) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.set_requires_grad(on);
  }
}

Adam::Adam(std::vector<Group> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    std::vector<State> s;
    for (const auto& p : g.params) s.push_back({std::vector<double>(p.numel()), std::vector<double>(p.numel())});
    state_.push_back(std::move(s));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& g = groups_[gi];
    for (size_t pi = 0; pi < g.params.size(); ++pi) {
      auto& p = g.params[pi];
      if (!p.has_grad()) continue;
      auto& st = state_[gi][pi];
      auto val = p.data();
      auto grad = p.grad();
      for (size_t i = 0; i < val.size(); ++i) {
        const double gr = grad[i];
        st.m[i] = beta1_ * st.m[i] + (1 - beta1_) * gr;
        st.v[i] = beta2_ * st.v[i] + (1 - beta2_) * gr * gr;
        const double mh = st.m[i] / bc1, vh = st.v[i] / bc2;
        val[i] -= Scalar(lr_scale_ * g.lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

}  // namespace echoflow::nn
