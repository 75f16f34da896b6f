#include "echoflow/nn/ops.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "echoflow/error.hpp"

namespace echoflow::nn {

namespace {

using MatR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using StrideR = Eigen::OuterStride<>;
using SMapR = Eigen::Map<MatR, 0, StrideR>;
using CSMapR = Eigen::Map<const MatR, 0, StrideR>;
using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorCode::ShapeMismatch, what);
}

// Creates the output node; wires inputs only when a gradient can flow.
Tensor make_output(Shape shape, std::initializer_list<Tensor> inputs) {
  auto out = Tensor::zeros(std::move(shape));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return out;
  out.set_requires_grad(true);
  for (const auto& t : inputs)
    if (t.defined()) out.node()->inputs.push_back(t.ptr());
  return out;
}

struct ConvGeom {
  int c, h, w, k, stride, pad, ho, wo;
  int rows() const { return c * k * k; }
  int cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const Scalar* x, const ConvGeom& g, Scalar* cols) {
  const int hw = g.cols();
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        Scalar* row = cols + size_t((c * g.k + ki) * g.k + kj) * hw;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          Scalar* dst = row + size_t(oh) * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (size_t(c) * g.h + ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kj;
            dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : Scalar(0);
          }
        }
      }
}

void col2im_add(const Scalar* cols, const ConvGeom& g, Scalar* dx) {
  const int hw = g.cols();
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const Scalar* row = cols + size_t((c * g.k + ki) * g.k + kj) * hw;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          const Scalar* src = row + size_t(oh) * g.wo;
          Scalar* dst = dx + (size_t(c) * g.h + ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) {
            const int iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
  require(x.rank() == 4 && weight.rank() == 4, "conv2d expects 4-d input and weight");
  const int n = x.dim(0), o = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == x.dim(1), "conv2d channel mismatch: input " + shape_str(x.shape()) +
                                         " weight " + shape_str(weight.shape()));
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), k, stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d output would be empty");

  auto out = make_output({n, o, g.ho, g.wo}, {x, weight, bias});
  const size_t in_stride = size_t(g.c) * g.h * g.w;
  const size_t out_stride = size_t(o) * g.cols();
  CMapR W(weight.data().data(), o, g.rows());
  Buffer cols(g.pointwise() ? 0 : size_t(g.rows()) * g.cols());

  for (int b = 0; b < n; ++b) {
    const Scalar* xb = x.data().data() + b * in_stride;
    const Scalar* colp = xb;
    if (!g.pointwise()) {
      im2col(xb, g, cols.data());
      colp = cols.data();
    }
    MapR Y(out.data().data() + b * out_stride, o, g.cols());
    Y.noalias() = W * CMapR(colp, g.rows(), g.cols());
    if (bias.defined()) Y.colwise() += VecMap(const_cast<Scalar*>(bias.data().data()), o);
  }

  if (out.requires_grad()) {
    out.node()->backward = [g, n, o, in_stride, out_stride](Node& self) {
      auto& xn = *self.inputs[0];
      auto& wn = *self.inputs[1];
      Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
      CMapR W(wn.value.data(), o, g.rows());
      Buffer cols(g.pointwise() ? 0 : size_t(g.rows()) * g.cols());
      Buffer dcols(g.pointwise() ? 0 : size_t(g.rows()) * g.cols());
      for (int b = 0; b < n; ++b) {
        CMapR dY(self.grad.data() + b * out_stride, o, g.cols());
        const Scalar* xb = xn.value.data() + b * in_stride;
        if (wn.requires_grad) {
          const Scalar* colp = xb;
          if (!g.pointwise()) {
            im2col(xb, g, cols.data());
            colp = cols.data();
          }
          MapR dW(wn.ensure_grad().data(), o, g.rows());
          dW.noalias() += dY * CMapR(colp, g.rows(), g.cols()).transpose();
        }
        if (bn && bn->requires_grad) {
          VecMap db(bn->ensure_grad().data(), o);
          db += dY.rowwise().sum();
        }
        if (xn.requires_grad) {
          Scalar* dxb = xn.ensure_grad().data() + b * in_stride;
          if (g.pointwise()) {
            MapR dX(dxb, g.rows(), g.cols());
            dX.noalias() += W.transpose() * dY;
          } else {
            MapR dC(dcols.data(), g.rows(), g.cols());
            dC.noalias() = W.transpose() * dY;
            col2im_add(dcols.data(), g, dxb);
          }
        }
      }
    };
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int in = weight.dim(1), outd = weight.dim(0);
  require(x.dim(-1) == in, "linear: input " + shape_str(x.shape()) + " vs weight " +
                               shape_str(weight.shape()));
  const int m = int(x.numel() / size_t(in));
  Shape shape = x.shape();
  shape.back() = outd;
  auto out = make_output(shape, {x, weight, bias});
  MapR Y(out.data().data(), m, outd);
  Y.noalias() = CMapR(x.data().data(), m, in) * CMapR(weight.data().data(), outd, in).transpose();
  if (bias.defined())
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data().data(), outd);

  if (out.requires_grad()) {
    out.node()->backward = [m, in, outd](Node& self) {
      auto& xn = *self.inputs[0];
      auto& wn = *self.inputs[1];
      Node* bn = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
      CMapR dY(self.grad.data(), m, outd);
      if (xn.requires_grad)
        MapR(xn.ensure_grad().data(), m, in).noalias() += dY * CMapR(wn.value.data(), outd, in);
      if (wn.requires_grad)
        MapR(wn.ensure_grad().data(), outd, in).noalias() +=
            dY.transpose() * CMapR(xn.value.data(), m, in);
      if (bn && bn->requires_grad)
        Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bn->ensure_grad().data(), outd) +=
            dY.colwise().sum();
    };
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_output(a.shape(), {a, b});
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (out.requires_grad()) {
    out.node()->backward = [](Node& self) {
      for (auto& in : self.inputs) {
        if (!in->requires_grad) continue;
        auto g = in->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor add_broadcast(const Tensor& x, const Tensor& p) {
  const size_t inner = p.numel();
  require(x.numel() % inner == 0 && Shape(x.shape().begin() + 1, x.shape().end()) == p.shape(),
          "add_broadcast: " + shape_str(x.shape()) + " vs " + shape_str(p.shape()));
  auto out = make_output(x.shape(), {x, p});
  auto o = out.data();
  auto xv = x.data(), pv = p.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = xv[i] + pv[i % inner];
  if (out.requires_grad()) {
    out.node()->backward = [inner](Node& self) {
      auto& xn = *self.inputs[0];
      auto& pn = *self.inputs[1];
      if (xn.requires_grad) {
        auto g = xn.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (pn.requires_grad) {
        auto g = pn.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor relu(const Tensor& x) {
  auto out = make_output(x.shape(), {x});
  auto o = out.data();
  auto xv = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = xv[i] <= 0 ? Scalar(0) : xv[i];  // NaN passes through
  if (out.requires_grad()) {
    out.node()->backward = [](Node& self) {
      auto& xn = *self.inputs[0];
      auto g = xn.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (xn.value[i] > 0) g[i] += self.grad[i];
    };
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  constexpr Scalar kA = Scalar(0.044715);
  auto out = make_output(x.shape(), {x});
  auto o = out.data();
  auto xv = x.data();
  for (size_t i = 0; i < o.size(); ++i) {
    const Scalar v = xv[i];
    o[i] = Scalar(0.5) * v * (Scalar(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (out.requires_grad()) {
    out.node()->backward = [](Node& self) {
      auto& xn = *self.inputs[0];
      auto g = xn.ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) {
        const Scalar v = xn.value[i];
        const Scalar t = std::tanh(kC * (v + kA * v * v * v));
        const Scalar d = Scalar(0.5) * (Scalar(1) + t) +
                         Scalar(0.5) * v * (Scalar(1) - t * t) * kC * (Scalar(1) + 3 * kA * v * v);
        g[i] += self.grad[i] * d;
      }
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  const int d = x.dim(-1);
  require(gamma.numel() == size_t(d) && beta.numel() == size_t(d), "layer_norm: affine size");
  const size_t rows = x.numel() / size_t(d);
  auto out = make_output(x.shape(), {x, gamma, beta});
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(rows);
  auto xv = x.data();
  auto o = out.data();
  auto gv = gamma.data(), bv = beta.data();
  for (size_t r = 0; r < rows; ++r) {
    const Scalar* row = xv.data() + r * d;
    Scalar mean = 0;
    for (int i = 0; i < d; ++i) mean += row[i];
    mean /= Scalar(d);
    Scalar var = 0;
    for (int i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= Scalar(d);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int i = 0; i < d; ++i) {
      const Scalar h = (row[i] - mean) * is;
      (*xhat)[r * d + i] = h;
      o[r * d + i] = h * gv[i] + bv[i];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [d, rows, xhat, inv_std](Node& self) {
      auto& xn = *self.inputs[0];
      auto& gn = *self.inputs[1];
      auto& bn = *self.inputs[2];
      Buffer dh(static_cast<size_t>(d));
      for (size_t r = 0; r < rows; ++r) {
        const Scalar* dy = self.grad.data() + r * d;
        const Scalar* h = xhat->data() + r * d;
        if (gn.requires_grad) {
          auto gg = gn.ensure_grad();
          for (int i = 0; i < d; ++i) gg[i] += dy[i] * h[i];
        }
        if (bn.requires_grad) {
          auto bg = bn.ensure_grad();
          for (int i = 0; i < d; ++i) bg[i] += dy[i];
        }
        if (xn.requires_grad) {
          Scalar mean_dh = 0, mean_dhh = 0;
          for (int i = 0; i < d; ++i) {
            dh[i] = dy[i] * gn.value[i];
            mean_dh += dh[i];
            mean_dhh += dh[i] * h[i];
          }
          mean_dh /= Scalar(d);
          mean_dhh /= Scalar(d);
          auto xg = xn.ensure_grad();
          for (int i = 0; i < d; ++i)
            xg[r * d + i] += (*inv_std)[r] * (dh[i] - mean_dh - h[i] * mean_dhh);
        }
      }
    };
  }
  return out;
}

Tensor multi_head_attention(const Tensor& qkv, int heads) {
  require(qkv.rank() == 3 && qkv.dim(2) % 3 == 0, "attention expects [N,T,3D]");
  const int n = qkv.dim(0), t = qkv.dim(1), d = qkv.dim(2) / 3;
  require(d % heads == 0, "attention: embedding not divisible by heads");
  const int dh = d / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  auto out = make_output({n, t, d}, {qkv});
  auto probs = std::make_shared<Buffer>(size_t(n) * heads * t * t);

  for (int b = 0; b < n; ++b) {
    const Scalar* base = qkv.data().data() + size_t(b) * t * 3 * d;
    for (int h = 0; h < heads; ++h) {
      CSMapR Q(base + h * dh, t, dh, StrideR(3 * d));
      CSMapR K(base + d + h * dh, t, dh, StrideR(3 * d));
      CSMapR V(base + 2 * d + h * dh, t, dh, StrideR(3 * d));
      MapR P(probs->data() + (size_t(b) * heads + h) * t * t, t, t);
      P.noalias() = (Q * K.transpose()) * scale;
      for (int i = 0; i < t; ++i) {
        auto row = P.row(i);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
      }
      SMapR O(out.data().data() + size_t(b) * t * d + h * dh, t, dh, StrideR(d));
      O.noalias() = P * V;
    }
  }

  if (out.requires_grad()) {
    out.node()->backward = [n, t, d, heads, dh, scale, probs](Node& self) {
      auto& in = *self.inputs[0];
      auto gin = in.ensure_grad();
      MatR dP(t, t), dS(t, t);
      for (int b = 0; b < n; ++b) {
        const Scalar* base = in.value.data() + size_t(b) * t * 3 * d;
        Scalar* gbase = gin.data() + size_t(b) * t * 3 * d;
        for (int h = 0; h < heads; ++h) {
          CSMapR Q(base + h * dh, t, dh, StrideR(3 * d));
          CSMapR K(base + d + h * dh, t, dh, StrideR(3 * d));
          CSMapR V(base + 2 * d + h * dh, t, dh, StrideR(3 * d));
          CMapR P(probs->data() + (size_t(b) * heads + h) * t * t, t, t);
          CSMapR dO(self.grad.data() + size_t(b) * t * d + h * dh, t, dh, StrideR(d));
          SMapR dQ(gbase + h * dh, t, dh, StrideR(3 * d));
          SMapR dK(gbase + d + h * dh, t, dh, StrideR(3 * d));
          SMapR dV(gbase + 2 * d + h * dh, t, dh, StrideR(3 * d));
          dV.noalias() += P.transpose() * dO;
          dP.noalias() = dO * V.transpose();
          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot =
              (dP.array() * P.array()).rowwise().sum();
          dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
          dQ.noalias() += dS * K;
          dK.noalias() += dS.transpose() * Q;
        }
      }
    };
  }
  return out;
}

Tensor map_to_tokens(const Tensor& x) {
  require(x.rank() == 4, "map_to_tokens expects NCHW");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = make_output({n, hw, c}, {x});
  for (int b = 0; b < n; ++b)
    MapR(out.data().data() + size_t(b) * hw * c, hw, c) =
        CMapR(x.data().data() + size_t(b) * c * hw, c, hw).transpose();
  if (out.requires_grad()) {
    out.node()->backward = [n, c, hw](Node& self) {
      auto g = self.inputs[0]->ensure_grad();
      for (int b = 0; b < n; ++b)
        MapR(g.data() + size_t(b) * c * hw, c, hw) +=
            CMapR(self.grad.data() + size_t(b) * hw * c, hw, c).transpose();
    };
  }
  return out;
}

Tensor tokens_to_map(const Tensor& t, int height, int width) {
  require(t.rank() == 3 && t.dim(1) == height * width, "tokens_to_map: token count mismatch");
  const int n = t.dim(0), c = t.dim(2), hw = height * width;
  auto out = make_output({n, c, height, width}, {t});
  for (int b = 0; b < n; ++b)
    MapR(out.data().data() + size_t(b) * c * hw, c, hw) =
        CMapR(t.data().data() + size_t(b) * hw * c, hw, c).transpose();
  if (out.requires_grad()) {
    out.node()->backward = [n, c, hw](Node& self) {
      auto g = self.inputs[0]->ensure_grad();
      for (int b = 0; b < n; ++b)
        MapR(g.data() + size_t(b) * hw * c, hw, c) +=
            CMapR(self.grad.data() + size_t(b) * c * hw, c, hw).transpose();
    };
  }
  return out;
}

namespace {

struct Tap {
  int i0, i1;
  Scalar w1;  // weight of i1; weight of i0 is 1 - w1
};

std::vector<Tap> upsample_taps(int in) {
  std::vector<Tap> taps(size_t(2 * in));
  for (int o = 0; o < 2 * in; ++o) {
    Scalar src = (Scalar(o) + Scalar(0.5)) / Scalar(2) - Scalar(0.5);
    if (src < 0) src = 0;
    int i0 = int(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[size_t(o)] = {i0, i1, src - Scalar(i0)};
  }
  return taps;
}

}  // namespace

Tensor upsample2x(const Tensor& x) {
  require(x.rank() == 4, "upsample2x expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = 2 * h, wo = 2 * w;
  auto out = make_output({n, c, ho, wo}, {x});
  const auto rt = upsample_taps(h), ct = upsample_taps(w);
  const size_t planes = size_t(n) * c;
  for (size_t p = 0; p < planes; ++p) {
    const Scalar* src = x.data().data() + p * h * w;
    Scalar* dst = out.data().data() + p * ho * wo;
    for (int r = 0; r < ho; ++r) {
      const auto& tr = rt[size_t(r)];
      const Scalar* r0 = src + size_t(tr.i0) * w;
      const Scalar* r1 = src + size_t(tr.i1) * w;
      for (int cc = 0; cc < wo; ++cc) {
        const auto& tc = ct[size_t(cc)];
        const Scalar top = r0[tc.i0] + tc.w1 * (r0[tc.i1] - r0[tc.i0]);
        const Scalar bot = r1[tc.i0] + tc.w1 * (r1[tc.i1] - r1[tc.i0]);
        dst[size_t(r) * wo + cc] = top + tr.w1 * (bot - top);
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [planes, h, w, ho, wo, rt, ct](Node& self) {
      auto g = self.inputs[0]->ensure_grad();
      for (size_t p = 0; p < planes; ++p) {
        Scalar* dsrc = g.data() + p * h * w;
        const Scalar* dy = self.grad.data() + p * ho * wo;
        for (int r = 0; r < ho; ++r) {
          const auto& tr = rt[size_t(r)];
          for (int cc = 0; cc < wo; ++cc) {
            const auto& tc = ct[size_t(cc)];
            const Scalar v = dy[size_t(r) * wo + cc];
            const Scalar a = (1 - tr.w1) * v, b = tr.w1 * v;
            dsrc[size_t(tr.i0) * w + tc.i0] += a * (1 - tc.w1);
            dsrc[size_t(tr.i0) * w + tc.i1] += a * tc.w1;
            dsrc[size_t(tr.i1) * w + tc.i0] += b * (1 - tc.w1);
            dsrc[size_t(tr.i1) * w + tc.i1] += b * tc.w1;
          }
        }
      }
    };
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat of nothing");
  const int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int c = 0;
  for (const auto& p : parts) {
    require(p.rank() == 4 && p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
            "concat_channels: incompatible " + shape_str(p.shape()));
    c += p.dim(1);
  }
  auto out = Tensor::zeros({n, c, h, w});
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    out.set_requires_grad(true);
    for (const auto& p : parts) out.node()->inputs.push_back(p.ptr());
  }
  const size_t hw = size_t(h) * w;
  std::vector<int> widths;
  for (int b = 0; b < n; ++b) {
    size_t off = size_t(b) * c * hw;
    for (const auto& p : parts) {
      const size_t len = size_t(p.dim(1)) * hw;
      std::copy_n(p.data().data() + size_t(b) * len, len, out.data().data() + off);
      off += len;
    }
  }
  for (const auto& p : parts) widths.push_back(p.dim(1));
  if (out.requires_grad()) {
    out.node()->backward = [n, c, hw, widths](Node& self) {
      for (int b = 0; b < n; ++b) {
        size_t off = size_t(b) * c * hw;
        for (size_t i = 0; i < widths.size(); ++i) {
          const size_t len = size_t(widths[i]) * hw;
          auto& in = *self.inputs[i];
          if (in.requires_grad) {
            Scalar* g = in.ensure_grad().data() + size_t(b) * len;
            for (size_t j = 0; j < len; ++j) g[j] += self.grad[off + j];
          }
          off += len;
        }
      }
    };
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool expects NCHW");
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = size_t(x.dim(2)) * x.dim(3);
  auto out = make_output({n, c}, {x});
  for (size_t p = 0; p < size_t(n) * c; ++p) {
    Scalar s = 0;
    const Scalar* src = x.data().data() + p * hw;
    for (size_t i = 0; i < hw; ++i) s += src[i];
    out.data()[p] = s / Scalar(hw);
  }
  if (out.requires_grad()) {
    out.node()->backward = [n, c, hw](Node& self) {
      auto g = self.inputs[0]->ensure_grad();
      for (size_t p = 0; p < size_t(n) * c; ++p) {
        const Scalar v = self.grad[p] / Scalar(hw);
        Scalar* dst = g.data() + p * hw;
        for (size_t i = 0; i < hw; ++i) dst[i] += v;
      }
    };
  }
  return out;
}

Tensor scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  require(x.rank() == 2 && scale.numel() == size_t(x.dim(1)) && shift.numel() == size_t(x.dim(1)),
          "scale_shift: x " + shape_str(x.shape()) + " scale " + shape_str(scale.shape()));
  const int n = x.dim(0), c = x.dim(1);
  auto out = make_output({n, c}, {x, scale, shift});
  for (int b = 0; b < n; ++b)
    for (int j = 0; j < c; ++j) {
      const size_t i = size_t(b) * c + j;
      out.data()[i] = (x.data()[i] - shift.data()[j]) * scale.data()[j];
    }
  if (out.requires_grad()) {
    out.node()->backward = [n, c](Node& self) {
      const Node &xn = *self.inputs[0], &sc = *self.inputs[1], &sh = *self.inputs[2];
      std::span<Scalar> dx, ds, dh;
      if (xn.requires_grad) dx = self.inputs[0]->ensure_grad();
      if (sc.requires_grad) ds = self.inputs[1]->ensure_grad();
      if (sh.requires_grad) dh = self.inputs[2]->ensure_grad();
      for (int b = 0; b < n; ++b)
        for (int j = 0; j < c; ++j) {
          const size_t i = size_t(b) * c + j;
          const Scalar g = self.grad[i];
          if (!dx.empty()) dx[i] += g * sc.value[size_t(j)];
          if (!ds.empty()) ds[size_t(j)] += g * (xn.value[i] - sh.value[size_t(j)]);
          if (!dh.empty()) dh[size_t(j)] -= g * sc.value[size_t(j)];
        }
    };
  }
  return out;
}

Tensor attention_pool(const Tensor& x, const Tensor& logits) {
  require(x.rank() == 4 && logits.rank() == 4 && logits.dim(1) == 1 && x.dim(0) == logits.dim(0) &&
              x.dim(2) == logits.dim(2) && x.dim(3) == logits.dim(3),
          "attention_pool: x " + shape_str(x.shape()) + " logits " + shape_str(logits.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const size_t hw = size_t(x.dim(2)) * x.dim(3);
  auto out = make_output({n, c}, {x, logits});
  auto att = std::make_shared<Buffer>(size_t(n) * hw);
  for (int b = 0; b < n; ++b) {
    const Scalar* l = logits.data().data() + size_t(b) * hw;
    Scalar* a = att->data() + size_t(b) * hw;
    Scalar mx = l[0];
    for (size_t i = 1; i < hw; ++i) mx = std::max(mx, l[i]);
    Scalar z = 0;
    for (size_t i = 0; i < hw; ++i) z += a[i] = std::exp(l[i] - mx);
    for (size_t i = 0; i < hw; ++i) a[i] /= z;
    for (int ch = 0; ch < c; ++ch) {
      const Scalar* src = x.data().data() + (size_t(b) * c + ch) * hw;
      Scalar s = 0;
      for (size_t i = 0; i < hw; ++i) s += a[i] * src[i];
      out.data()[size_t(b) * c + ch] = s;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [n, c, hw, att](Node& self) {
      const Node& xn = *self.inputs[0];
      const bool gx = xn.requires_grad, gl = self.inputs[1]->requires_grad;
      std::span<Scalar> dx, dl;
      if (gx) dx = self.inputs[0]->ensure_grad();
      if (gl) dl = self.inputs[1]->ensure_grad();
      for (int b = 0; b < n; ++b) {
        const Scalar* a = att->data() + size_t(b) * hw;
        const Scalar* g = self.grad.data() + size_t(b) * c;
        const Scalar* o = self.value.data() + size_t(b) * c;
        Scalar go = 0;
        for (int ch = 0; ch < c; ++ch) go += g[ch] * o[ch];
        for (int ch = 0; ch < c; ++ch) {
          const Scalar* src = xn.value.data() + (size_t(b) * c + ch) * hw;
          if (gx) {
            Scalar* d = dx.data() + (size_t(b) * c + ch) * hw;
            for (size_t i = 0; i < hw; ++i) d[i] += g[ch] * a[i];
          }
          if (gl) {
            Scalar* d = dl.data() + size_t(b) * hw;
            for (size_t i = 0; i < hw; ++i) d[i] += a[i] * g[ch] * src[i];
          }
        }
        if (gl) {
          Scalar* d = dl.data() + size_t(b) * hw;
          for (size_t i = 0; i < hw; ++i) d[i] -= a[i] * go;
        }
      }
    };
  }
  return out;
}

Tensor coord_channels(int n, int height, int width) {
  auto out = Tensor::zeros({n, 2, height, width});
  auto o = out.data();
  const size_t hw = size_t(height) * width;
  for (int b = 0; b < n; ++b)
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c) {
        o[(size_t(b) * 2) * hw + size_t(r) * width + c] = (Scalar(c) + Scalar(0.5)) / Scalar(width);
        o[(size_t(b) * 2 + 1) * hw + size_t(r) * width + c] = (Scalar(r) + Scalar(0.5)) / Scalar(height);
      }
  return out;
}

}  // namespace echoflow::nn
