#include "echoflow/predict.hpp"

#include <algorithm>
#include <cmath>

namespace echoflow::predict {

using augment::GeoTransform;

Target Prediction::to_target() const {
  switch (task) {
    case TaskKind::Seg: {
      MaskMap m(height, width);
      const size_t hw = size_t(height) * width;
      for (size_t i = 0; i < hw; ++i) {
        int best = 0;
        for (int k = 1; k < channels; ++k)
          if (probs[size_t(k) * hw + i] > probs[size_t(best) * hw + i]) best = k;
        m.labels[i] = std::uint8_t(best);
      }
      return m;
    }
    case TaskKind::Cls: {
      ClassLabel c;
      c.index = int(std::max_element(probs.begin(), probs.end()) - probs.begin());
      c.probabilities = probs;
      return c;
    }
    case TaskKind::Det: return box;
    case TaskKind::Reg: return points;
  }
  return box;
}

std::vector<Prediction> Predictor::predict_batch(const std::vector<const ImageGray*>& images) const {
  std::vector<Prediction> out;
  for (const auto* img : images) out.push_back(predict(*img));
  return out;
}

ModelPredictor::ModelPredictor(const model::MultiTaskModel& m, const DatasetSpec& spec, Source source)
    : model_(m), spec_(spec) {
  if (source == Source::Specialist) {
    auto it = m.specialists.find(spec.dataset_id);
    if (it == m.specialists.end())
      throw Error(ErrorCode::UnknownDataset, "no specialist head for '" + spec.dataset_id + "'");
    head_ = it->second.head.get();
    if (it->second.adapter) adapter_ = &*it->second.adapter;
    channels_.resize(size_t(it->second.head->config().out_channels));
    for (size_t i = 0; i < channels_.size(); ++i) channels_[i] = int(i);
  } else {
    auto h = m.generalist_heads.find(spec.task);
    auto c = m.channel_maps.find(spec.dataset_id);
    if (h == m.generalist_heads.end() || c == m.channel_maps.end())
      throw Error(ErrorCode::UnknownDataset, "no generalist head for '" + spec.dataset_id + "'");
    head_ = h->second.get();
    channels_ = c->second;
  }
  if (head_->kind() != spec.task)
    throw Error(ErrorCode::HeadKindMismatch, "head kind differs from dataset task");
}

Prediction ModelPredictor::predict(const ImageGray& image) const { return predict_batch({&image}).at(0); }

namespace {

void softmax_slice(std::span<const float> logits, const std::vector<int>& channels, size_t plane,
                   size_t offset_stride, std::vector<double>& out) {
  // logits laid out [C, plane]; out laid out [K, plane].
  const size_t k = channels.size();
  out.assign(k * plane, 0.0);
  for (size_t i = 0; i < plane; ++i) {
    double mx = -1e300;
    for (size_t j = 0; j < k; ++j) mx = std::max(mx, double(logits[size_t(channels[j]) * offset_stride + i]));
    double s = 0;
    for (size_t j = 0; j < k; ++j)
      s += out[j * plane + i] = std::exp(double(logits[size_t(channels[j]) * offset_stride + i]) - mx);
    for (size_t j = 0; j < k; ++j) out[j * plane + i] /= s;
  }
}

}  // namespace

std::vector<Prediction> ModelPredictor::predict_batch(const std::vector<const ImageGray*>& images) const {
  const int res = model_.config().resolution;
  for (const auto* img : images)
    if (img->height != res || img->width != res)
      throw Error(ErrorCode::ShapeMismatch, "predictor expects " + std::to_string(res) + "x" +
                                                std::to_string(res) + " images");
  nn::NoGradGuard guard;
  const auto x = model::images_to_tensor(images);
  model::FeatureBundle f;
  if (spec_.task == TaskKind::Cls)
    f.stem = model_.backbone.encode_stem(x);
  else
    f = model_.backbone.encode(x);
  const int n = int(images.size());
  std::vector<Prediction> out(static_cast<size_t>(n));
  switch (spec_.task) {
    case TaskKind::Seg: {
      const auto y = model::seg_forward(f, *head_);
      const int c = y.dim(1), h = y.dim(2), w = y.dim(3);
      const size_t plane = size_t(h) * w;
      for (int i = 0; i < n; ++i) {
        auto& p = out[size_t(i)];
        p.task = TaskKind::Seg;
        p.channels = int(channels_.size());
        p.height = h;
        p.width = w;
        softmax_slice(y.data().subspan(size_t(i) * c * plane, size_t(c) * plane), channels_, plane, plane, p.probs);
      }
      break;
    }
    case TaskKind::Cls: {
      const auto y = model::cls_forward(f.stem, adapter_, *head_);
      const int c = y.dim(1);
      for (int i = 0; i < n; ++i) {
        auto& p = out[size_t(i)];
        p.task = TaskKind::Cls;
        p.channels = int(channels_.size());
        p.height = p.width = 1;
        softmax_slice(y.data().subspan(size_t(i) * c, size_t(c)), channels_, 1, 1, p.probs);
      }
      break;
    }
    case TaskKind::Det: {
      const auto y = model::det_forward(f, *head_);
      for (int i = 0; i < n; ++i) {
        std::array<double, 4> u;
        for (size_t j = 0; j < 4; ++j) u[j] = y.data()[size_t(i) * 4 + j];
        out[size_t(i)].task = TaskKind::Det;
        out[size_t(i)].box = model::box_from_raw(u);
      }
      break;
    }
    case TaskKind::Reg: {
      const auto y = model::reg_forward(f, *head_);
      const int c = y.dim(1), h = y.dim(2), w = y.dim(3);
      const size_t plane = size_t(h) * w;
      for (int i = 0; i < n; ++i) {
        model::Heatmap hm{int(channels_.size()), h, w, {}};
        for (int ch : channels_)
          for (size_t j = 0; j < plane; ++j)
            hm.values.push_back(y.data()[(size_t(i) * c + size_t(ch)) * plane + j]);
        out[size_t(i)].task = TaskKind::Reg;
        out[size_t(i)].points = model::decode_keypoints(hm);
      }
      break;
    }
  }
  return out;
}

TtaMode parse_tta_mode(const std::string& text) {
  if (text == "off") return TtaMode::Off;
  if (text == "identity-only") return TtaMode::IdentityOnly;
  if (text == "full") return TtaMode::Full;
  throw Error(ErrorCode::InvalidSpec, "unknown TTA mode '" + text + "' (off|identity-only|full)");
}

std::string to_string(TtaMode mode) {
  switch (mode) {
    case TtaMode::Off: return "off";
    case TtaMode::IdentityOnly: return "identity-only";
    case TtaMode::Full: return "full";
  }
  return "";
}

std::vector<GeoTransform> default_tta_set() {
  return {GeoTransform::identity(), GeoTransform::horizontal_flip(), GeoTransform::vertical_flip(),
          GeoTransform::rot90()};
}

std::vector<GeoTransform> tta_set(TtaMode mode) {
  if (mode == TtaMode::Full) return default_tta_set();
  return {GeoTransform::identity()};
}

namespace {

Prediction invert(const Prediction& p, const GeoTransform& t) {
  const GeoTransform inv = t.inverse();
  Prediction out = p;
  switch (p.task) {
    case TaskKind::Seg: {
      out.probs = augment::apply_planar(inv, p.probs, p.channels, p.height, p.width);
      if (inv.quarter_turns % 2) std::swap(out.height, out.width);
      break;
    }
    case TaskKind::Cls: break;
    case TaskKind::Det: out.box = augment::apply(inv, p.box); break;
    case TaskKind::Reg: out.points = augment::apply(inv, p.points); break;
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Prediction aggregate(const std::vector<Prediction>& parts) {
  Prediction out = parts.front();
  if (parts.size() == 1) return out;
  switch (out.task) {
    case TaskKind::Seg:
    case TaskKind::Cls:
      for (size_t i = 0; i < out.probs.size(); ++i) {
        double s = 0;
        for (const auto& p : parts) s += p.probs[i];
        out.probs[i] = s / double(parts.size());
      }
      break;
    case TaskKind::Det: {
      auto coord = [&](double NormBox::*field) {
        std::vector<double> v;
        for (const auto& p : parts) v.push_back(p.box.*field);
        return median(v);
      };
      out.box = {coord(&NormBox::x_min), coord(&NormBox::y_min), coord(&NormBox::x_max), coord(&NormBox::y_max)};
      break;
    }
    case TaskKind::Reg:
      for (size_t k = 0; k < out.points.points.size(); ++k) {
        std::vector<double> xs, ys;
        for (const auto& p : parts) {
          xs.push_back(p.points.points[k].x);
          ys.push_back(p.points.points[k].y);
        }
        out.points.points[k] = {median(xs), median(ys)};
      }
      break;
  }
  return out;
}

}  // namespace

Prediction tta_predict(const Predictor& predictor, const ImageGray& image,
                       const std::vector<GeoTransform>& transforms) {
  if (transforms.empty()) throw Error(ErrorCode::InvalidSpec, "empty TTA set");
  std::vector<Prediction> parts;
  for (const auto& t : transforms) {
    const ImageGray view = augment::apply(t, image);
    parts.push_back(invert(predictor.predict(view), t));
  }
  return aggregate(parts);
}

std::vector<Prediction> predict_all(const Predictor& predictor, const std::vector<const ImageGray*>& images,
                                    TtaMode mode, int batch_size) {
  std::vector<Prediction> out;
  const auto transforms = tta_set(mode);
  for (size_t start = 0; start < images.size(); start += size_t(batch_size)) {
    const size_t end = std::min(images.size(), start + size_t(batch_size));
    std::vector<const ImageGray*> chunk(images.begin() + std::ptrdiff_t(start), images.begin() + std::ptrdiff_t(end));
    if (mode == TtaMode::Off) {
      for (auto& p : predictor.predict_batch(chunk)) out.push_back(std::move(p));
      continue;
    }
    std::vector<std::vector<Prediction>> parts(chunk.size());
    for (const auto& t : transforms) {
      std::vector<ImageGray> views;
      for (const auto* img : chunk) views.push_back(augment::apply(t, *img));
      std::vector<const ImageGray*> ptrs;
      for (const auto& v : views) ptrs.push_back(&v);
      auto preds = predictor.predict_batch(ptrs);
      for (size_t i = 0; i < chunk.size(); ++i) parts[i].push_back(invert(preds[i], t));
    }
    for (auto& p : parts) out.push_back(aggregate(p));
  }
  return out;
}

}  // namespace echoflow::predict
