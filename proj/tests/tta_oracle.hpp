#pragma once

#include <cmath>

#include "echoflow/augment.hpp"
#include "echoflow/predict.hpp"
#include "test_util.hpp"

// Equivariant oracle predictor for TTA checks.
namespace testutil {

using namespace echoflow;
using echoflow::predict::Prediction;

inline const augment::GeoTransform kAll[] = {{false, 0}, {false, 1}, {false, 2}, {false, 3},
                                             {true, 0},  {true, 1},  {true, 2},  {true, 3}};

inline Prediction from_target(const Target& t, TaskKind kind) {
  Prediction p;
  p.task = kind;
  switch (kind) {
    case TaskKind::Seg: {
      const auto& m = std::get<MaskMap>(t);
      p.channels = 2;
      p.height = m.height;
      p.width = m.width;
      const size_t hw = m.labels.size();
      p.probs.assign(2 * hw, 0.0);
      for (size_t i = 0; i < hw; ++i) p.probs[size_t(m.labels[i]) * hw + i] = 1.0;
      break;
    }
    case TaskKind::Cls:
      p.channels = 2;
      p.height = p.width = 1;
      p.probs = {0.25, 0.75};  // dyadic, so the mean of equal parts is exact
      break;
    case TaskKind::Det: p.box = std::get<NormBox>(t); break;
    case TaskKind::Reg: p.points = std::get<KeypointSet>(t); break;
  }
  return p;
}

// Knows the scene: identifies which dihedral transform produced the input and
// answers with the correspondingly transformed ground truth.
inline std::shared_ptr<FnPredictor> oracle_for(const Sample& s, TaskKind kind) {
  return std::make_shared<FnPredictor>(kind, [s, kind](const ImageGray& img) {
    for (const auto& t : kAll)
      if (augment::apply(t, s.image) == img) return from_target(augment::apply(t, s.target), kind);
    throw std::runtime_error("image is not a dihedral view of the scene");
  });
}

// Masks and labels must match exactly. Coordinates pass through x -> 1 - x
// and back, so they may be an ulp off.
inline bool same_target(const Target& a, const Target& b, double tol = 1e-12) {
  if (a.index() != b.index()) return false;
  auto near = [tol](double x, double y) { return std::abs(x - y) <= tol; };
  if (const auto* pa = std::get_if<KeypointSet>(&a)) {
    const auto& pb = std::get<KeypointSet>(b);
    if (pa->points.size() != pb.points.size()) return false;
    for (size_t i = 0; i < pa->points.size(); ++i)
      if (!near(pa->points[i].x, pb.points[i].x) || !near(pa->points[i].y, pb.points[i].y)) return false;
    return true;
  }
  if (const auto* ba = std::get_if<NormBox>(&a)) {
    const auto& bb = std::get<NormBox>(b);
    return near(ba->x_min, bb.x_min) && near(ba->y_min, bb.y_min) && near(ba->x_max, bb.x_max) &&
           near(ba->y_max, bb.y_max);
  }
  return a == b;
}

}  // namespace testutil
