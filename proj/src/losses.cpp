#include "echoflow/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "echoflow/model.hpp"

namespace echoflow::losses {

void LossConfig::validate() const {
  if (!(alpha >= 0)) throw Error(ErrorCode::InvalidSpec, "alpha must be >= 0");
  if (!(eps_iou > 0)) throw Error(ErrorCode::InvalidSpec, "eps_iou must be > 0");
  if (!(dice_smooth >= 0)) throw Error(ErrorCode::InvalidSpec, "dice_smooth must be >= 0");
}

LossGrad dice_loss(std::span<const double> logits, int k, const MaskMap& mask, double smooth) {
  const size_t hw = size_t(mask.height) * mask.width;
  if (k < 1 || logits.size() != size_t(k) * hw)
    throw Error(ErrorCode::ShapeMismatch, "dice_loss: logits size " + std::to_string(logits.size()) +
                                              " vs " + std::to_string(k) + "x" +
                                              std::to_string(mask.height) + "x" + std::to_string(mask.width));
  std::vector<double> p(logits.size());
  for (size_t i = 0; i < hw; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) mx = std::max(mx, logits[size_t(c) * hw + i]);
    double s = 0;
    for (int c = 0; c < k; ++c) s += p[size_t(c) * hw + i] = std::exp(logits[size_t(c) * hw + i] - mx);
    for (int c = 0; c < k; ++c) p[size_t(c) * hw + i] /= s;
  }
  std::vector<double> inter(static_cast<size_t>(k)), psum(static_cast<size_t>(k)), gsum(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c)
    for (size_t i = 0; i < hw; ++i) {
      const double g = mask.labels[i] == c ? 1.0 : 0.0;
      inter[size_t(c)] += p[size_t(c) * hw + i] * g;
      psum[size_t(c)] += p[size_t(c) * hw + i];
      gsum[size_t(c)] += g;
    }
  LossGrad out;
  double mean_dice = 0;
  std::vector<double> dp(p.size());
  for (int c = 0; c < k; ++c) {
    const double num = 2 * inter[size_t(c)] + smooth, den = psum[size_t(c)] + gsum[size_t(c)] + smooth;
    mean_dice += den > 0 ? num / den : 1.0;
    if (den <= 0) continue;
    for (size_t i = 0; i < hw; ++i) {
      const double g = mask.labels[i] == c ? 1.0 : 0.0;
      dp[size_t(c) * hw + i] = -(2 * g / den - num / (den * den)) / k;
    }
  }
  out.value = 1 - mean_dice / k;
  out.grad.assign(p.size(), 0.0);
  for (size_t i = 0; i < hw; ++i) {
    double dot = 0;
    for (int c = 0; c < k; ++c) dot += p[size_t(c) * hw + i] * dp[size_t(c) * hw + i];
    for (int c = 0; c < k; ++c) {
      const size_t j = size_t(c) * hw + i;
      out.grad[j] = p[j] * (dp[j] - dot);
    }
  }
  return out;
}

LossGrad ce_loss(std::span<const double> logits, int label) {
  if (logits.empty() || label < 0 || size_t(label) >= logits.size())
    throw Error(ErrorCode::ShapeMismatch, "ce_loss: label " + std::to_string(label) + " with " +
                                              std::to_string(logits.size()) + " logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double v : logits) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  LossGrad out;
  out.value = lse - logits[size_t(label)];
  out.grad.resize(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - lse);
  out.grad[size_t(label)] -= 1;
  return out;
}

LossGrad heatmap_mse(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size() || pred.empty())
    throw Error(ErrorCode::ShapeMismatch, "heatmap_mse: sizes " + std::to_string(pred.size()) + " and " +
                                              std::to_string(target.size()));
  LossGrad out;
  out.grad.resize(pred.size());
  const double inv = 1.0 / double(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - target[i];
    out.value += r * r * inv;
    out.grad[i] = 2 * r * inv;
  }
  return out;
}

namespace {

void require_box(const NormBox& b, const char* which) {
  if (b.is_invalid() || !(b.x_min <= b.x_max) || !(b.y_min <= b.y_max))
    throw Error(ErrorCode::InvalidBox, std::string(which) + " box is invalid");
}

struct Overlap {
  double iw, ih;
};

Overlap overlap(const NormBox& a, const NormBox& b) {
  return {std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min)),
          std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min))};
}

}  // namespace

double box_iou(const NormBox& a, const NormBox& b, double eps) {
  require_box(a, "first");
  require_box(b, "second");
  const auto [iw, ih] = overlap(a, b);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter + eps;
  return uni > 0 ? inter / uni : 0.0;
}

LossGrad det_loss(const NormBox& p, const NormBox& g, const LossConfig& cfg, bool valid) {
  LossGrad out;
  out.grad.assign(4, 0.0);
  if (!valid || g.is_invalid()) return out;
  require_box(p, "predicted");
  require_box(g, "target");
  const auto [iw, ih] = overlap(p, g);
  const double inter = iw * ih;
  const double u = p.area() + g.area() - inter + cfg.eps_iou;
  const double iou = inter / u;

  // d(inter)/d(pred corner); the overlap extent moves only with the binding edge.
  std::array<double, 4> di{};
  if (iw > 0 && ih > 0) {
    if (p.x_min > g.x_min) di[0] = -ih;
    if (p.y_min > g.y_min) di[1] = -iw;
    if (p.x_max < g.x_max) di[2] = ih;
    if (p.y_max < g.y_max) di[3] = iw;
  }
  const std::array<double, 4> da = {-p.height(), -p.width(), p.height(), p.width()};
  const std::array<double, 4> pc = {p.x_min, p.y_min, p.x_max, p.y_max};
  const std::array<double, 4> gc = {g.x_min, g.y_min, g.x_max, g.y_max};
  double l1 = 0;
  for (size_t i = 0; i < 4; ++i) {
    const double d = pc[i] - gc[i];
    l1 += std::abs(d);
    const double diou = (di[i] * u - inter * (da[i] - di[i])) / (u * u);
    out.grad[i] = -diou + cfg.alpha * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0);
  }
  out.value = 1 - iou + cfg.alpha * l1;
  return out;
}

BatchLoss seg_batch_loss(std::span<const float> logits, int n, int c, int h, int w,
                         const std::vector<const MaskMap*>& masks, const std::vector<int>& channels,
                         const LossConfig& cfg) {
  if (int(masks.size()) != n || logits.size() != size_t(n) * c * h * w)
    throw Error(ErrorCode::ShapeMismatch, "seg_batch_loss: batch layout mismatch");
  const size_t hw = size_t(h) * w;
  const int k = int(channels.size());
  BatchLoss out;
  out.seed.assign(logits.size(), 0.0);
  std::vector<double> slice(size_t(k) * hw);
  for (int s = 0; s < n; ++s) {
    for (int j = 0; j < k; ++j)
      for (size_t i = 0; i < hw; ++i)
        slice[size_t(j) * hw + i] = logits[(size_t(s) * c + size_t(channels[size_t(j)])) * hw + i];
    auto lg = dice_loss(slice, k, *masks[size_t(s)], cfg.dice_smooth);
    out.value += lg.value / n;
    for (int j = 0; j < k; ++j)
      for (size_t i = 0; i < hw; ++i)
        out.seed[(size_t(s) * c + size_t(channels[size_t(j)])) * hw + i] = lg.grad[size_t(j) * hw + i] / n;
  }
  out.count = n;
  return out;
}

BatchLoss cls_batch_loss(std::span<const float> logits, int n, int c, const std::vector<int>& labels,
                         const std::vector<int>& channels) {
  if (int(labels.size()) != n || logits.size() != size_t(n) * c)
    throw Error(ErrorCode::ShapeMismatch, "cls_batch_loss: batch layout mismatch");
  BatchLoss out;
  out.seed.assign(logits.size(), 0.0);
  std::vector<double> slice(channels.size());
  for (int s = 0; s < n; ++s) {
    for (size_t j = 0; j < channels.size(); ++j) slice[j] = logits[size_t(s) * c + size_t(channels[j])];
    auto lg = ce_loss(slice, labels[size_t(s)]);
    out.value += lg.value / n;
    for (size_t j = 0; j < channels.size(); ++j)
      out.seed[size_t(s) * c + size_t(channels[j])] = lg.grad[j] / n;
  }
  out.count = n;
  return out;
}

BatchLoss det_batch_loss(std::span<const float> raw, int n, const std::vector<NormBox>& boxes,
                         const LossConfig& cfg) {
  if (int(boxes.size()) != n || raw.size() != size_t(n) * 4)
    throw Error(ErrorCode::ShapeMismatch, "det_batch_loss: batch layout mismatch");
  BatchLoss out;
  out.seed.assign(raw.size(), 0.0);
  for (int s = 0; s < n; ++s) out.count += boxes[size_t(s)].is_invalid() ? 0 : 1;
  if (out.count == 0) return out;
  for (int s = 0; s < n; ++s) {
    const auto& g = boxes[size_t(s)];
    if (g.is_invalid()) continue;
    std::array<double, 4> u;
    for (size_t i = 0; i < 4; ++i) u[i] = raw[size_t(s) * 4 + i];
    auto lg = det_loss(model::box_from_raw(u), g, cfg, true);
    std::array<double, 4> db;
    std::copy(lg.grad.begin(), lg.grad.end(), db.begin());
    const auto du = model::box_raw_grad(u, db);
    out.value += lg.value / out.count;
    for (size_t i = 0; i < 4; ++i) out.seed[size_t(s) * 4 + i] = du[i] / out.count;
  }
  return out;
}

BatchLoss reg_batch_loss(std::span<const float> heatmaps, int n, int c, int h, int w,
                         const std::vector<const KeypointSet*>& points, const std::vector<int>& channels) {
  if (int(points.size()) != n || heatmaps.size() != size_t(n) * c * h * w)
    throw Error(ErrorCode::ShapeMismatch, "reg_batch_loss: batch layout mismatch");
  const size_t hw = size_t(h) * w;
  BatchLoss out;
  out.seed.assign(heatmaps.size(), 0.0);
  std::vector<double> slice(channels.size() * hw);
  for (int s = 0; s < n; ++s) {
    if (points[size_t(s)]->points.size() != channels.size())
      throw Error(ErrorCode::ShapeMismatch, "reg_batch_loss: keypoint count differs from channel slice");
    const auto target = model::encode_target(*points[size_t(s)], h, w);
    for (size_t j = 0; j < channels.size(); ++j)
      for (size_t i = 0; i < hw; ++i)
        slice[j * hw + i] = heatmaps[(size_t(s) * c + size_t(channels[j])) * hw + i];
    auto lg = heatmap_mse(slice, target.values);
    out.value += lg.value / n;
    for (size_t j = 0; j < channels.size(); ++j)
      for (size_t i = 0; i < hw; ++i)
        out.seed[(size_t(s) * c + size_t(channels[j])) * hw + i] = lg.grad[j * hw + i] / n;
  }
  out.count = n;
  return out;
}

}  // namespace echoflow::losses
