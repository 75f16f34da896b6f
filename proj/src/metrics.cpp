#include "echoflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "echoflow/io.hpp"
#include "echoflow/losses.hpp"

namespace echoflow::metrics {

namespace {

void require_same_shape(const MaskMap& a, const MaskMap& b) {
  if (a.height != b.height || a.width != b.width)
    throw Error(ErrorCode::ShapeMismatch, "masks are " + std::to_string(a.height) + "x" +
                                              std::to_string(a.width) + " and " + std::to_string(b.height) +
                                              "x" + std::to_string(b.width));
}

constexpr double kFar = 1e20;

// Squared 1-D distance transform: lower envelope of parabolas rooted at f.
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = int(f.size());
  std::vector<int> v(static_cast<size_t>(n));
  std::vector<double> z(size_t(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  auto inter = [&](int q, int p) {
    return ((f[size_t(q)] + double(q) * q) - (f[size_t(p)] + double(p) * p)) / (2.0 * (q - p));
  };
  for (int q = 1; q < n; ++q) {
    double s = inter(q, v[size_t(k)]);
    while (s <= z[size_t(k)]) {
      --k;
      s = inter(q, v[size_t(k)]);
    }
    ++k;
    v[size_t(k)] = q;
    z[size_t(k)] = s;
    z[size_t(k) + 1] = kFar;
  }
  d.resize(size_t(n));
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[size_t(k) + 1] < q) ++k;
    const int p = v[size_t(k)];
    d[size_t(q)] = double(q - p) * (q - p) + f[size_t(p)];
  }
}

// Squared Euclidean distance from every pixel to the nearest listed point.
std::vector<double> squared_edt(const std::vector<std::pair<int, int>>& pts, int h, int w) {
  std::vector<double> g(size_t(h) * w, kFar);
  for (auto [r, c] : pts) g[size_t(r) * w + c] = 0;
  std::vector<double> f, d;
  f.resize(size_t(h));
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) f[size_t(r)] = g[size_t(r) * w + c];
    edt_1d(f, d);
    for (int r = 0; r < h; ++r) g[size_t(r) * w + c] = d[size_t(r)];
  }
  f.resize(size_t(w));
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) f[size_t(c)] = g[size_t(r) * w + c];
    edt_1d(f, d);
    for (int c = 0; c < w; ++c) g[size_t(r) * w + c] = d[size_t(c)];
  }
  return g;
}

}  // namespace

double dsc(const MaskMap& pred, const MaskMap& gt, int k) {
  require_same_shape(pred, gt);
  long p = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] == k, b = gt.labels[i] == k;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

std::vector<std::pair<int, int>> boundary_points(const MaskMap& m, int k) {
  std::vector<std::pair<int, int>> out;
  auto inside = [&](int r, int c) {
    return r >= 0 && c >= 0 && r < m.height && c < m.width && m.at(r, c) == k;
  };
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c) == k &&
          (!inside(r - 1, c) || !inside(r + 1, c) || !inside(r, c - 1) || !inside(r, c + 1)))
        out.emplace_back(r, c);
  return out;
}

HausdorffResult hausdorff(const MaskMap& pred, const MaskMap& gt, int k) {
  require_same_shape(pred, gt);
  const auto a = boundary_points(pred, k), b = boundary_points(gt, k);
  if (a.empty() || b.empty())
    return {std::hypot(double(pred.height), double(pred.width)), true};
  const auto da = squared_edt(a, pred.height, pred.width);
  const auto db = squared_edt(b, pred.height, pred.width);
  double worst = 0;
  for (auto [r, c] : a) worst = std::max(worst, db[size_t(r) * pred.width + c]);
  for (auto [r, c] : b) worst = std::max(worst, da[size_t(r) * pred.width + c]);
  return {std::sqrt(worst), false};
}

std::optional<double> rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size())
    throw Error(ErrorCode::CountMismatch, "rank_auc: scores and labels differ in length");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t i, size_t j) { return scores[i] < scores[j]; });
  // Average ranks over tied groups.
  std::vector<double> rank(scores.size());
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = 0.5 * double(i + 1 + j);
    for (size_t t = i; t < j; ++t) rank[order[t]] = avg;
    i = j;
  }
  double npos = 0, nneg = 0, rsum = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      ++npos;
      rsum += rank[i];
    } else {
      ++nneg;
    }
  }
  if (npos == 0 || nneg == 0) return std::nullopt;
  return (rsum - npos * (npos + 1) / 2) / (npos * nneg);
}

std::vector<std::vector<long>> confusion_matrix(const std::vector<int>& truth,
                                                const std::vector<int>& predicted, int k) {
  if (truth.size() != predicted.size())
    throw Error(ErrorCode::CountMismatch, "confusion_matrix: lengths differ");
  std::vector<std::vector<long>> m(size_t(k), std::vector<long>(size_t(k), 0));
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= k || predicted[i] < 0 || predicted[i] >= k)
      throw Error(ErrorCode::ShapeMismatch, "confusion_matrix: label out of range");
    ++m[size_t(truth[i])][size_t(predicted[i])];
  }
  return m;
}

double mcc(const std::vector<std::vector<long>>& cm) {
  const size_t k = cm.size();
  std::vector<double> t(k, 0), p(k, 0);
  double correct = 0, total = 0;
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < k; ++j) {
      t[i] += double(cm[i][j]);
      p[j] += double(cm[i][j]);
      total += double(cm[i][j]);
      if (i == j) correct += double(cm[i][j]);
    }
  double tp = 0, tt = 0, pp = 0;
  for (size_t i = 0; i < k; ++i) {
    tp += t[i] * p[i];
    tt += t[i] * t[i];
    pp += p[i] * p[i];
  }
  const double f1 = total * total - pp, f2 = total * total - tt;
  if (f1 == 0 || f2 == 0) return 0.0;
  return (correct * total - tp) / std::sqrt(f1 * f2);
}

double f1(const std::vector<std::vector<long>>& cm) {
  const size_t k = cm.size();
  auto class_f1 = [&](size_t c) {
    double tp = double(cm[c][c]), fp = 0, fn = 0;
    for (size_t i = 0; i < k; ++i) {
      if (i == c) continue;
      fp += double(cm[i][c]);
      fn += double(cm[c][i]);
    }
    const double den = 2 * tp + fp + fn;
    return den == 0 ? 0.0 : 2 * tp / den;
  };
  if (k == 2) return class_f1(1);
  double s = 0;
  for (size_t c = 0; c < k; ++c) s += class_f1(c);
  return s / double(k);
}

ClassificationResult classification_metrics(const std::vector<std::vector<double>>& scores,
                                            const std::vector<int>& labels, int k) {
  if (scores.size() != labels.size())
    throw Error(ErrorCode::CountMismatch, "classification_metrics: lengths differ");
  std::vector<int> predicted;
  for (const auto& s : scores) {
    if (int(s.size()) != k) throw Error(ErrorCode::ShapeMismatch, "score vector length differs from classes");
    predicted.push_back(int(std::max_element(s.begin(), s.end()) - s.begin()));
  }
  const auto cm = confusion_matrix(labels, predicted, k);
  ClassificationResult r;
  r.f1 = f1(cm);
  r.mcc = mcc(cm);
  long correct = 0;
  for (int c = 0; c < k; ++c) correct += cm[size_t(c)][size_t(c)];
  r.accuracy = labels.empty() ? 0.0 : double(correct) / double(labels.size());

  auto auc_for = [&](int c) {
    std::vector<double> sc;
    std::vector<bool> pos;
    for (size_t i = 0; i < scores.size(); ++i) {
      sc.push_back(scores[i][size_t(c)]);
      pos.push_back(labels[i] == c);
    }
    return rank_auc(sc, pos);
  };
  if (k == 2) {
    r.auc = auc_for(1);
  } else {
    double s = 0;
    int used = 0;
    for (int c = 0; c < k; ++c)
      if (auto a = auc_for(c)) {
        s += *a;
        ++used;
      }
    if (used >= 2) r.auc = s / used;
  }
  return r;
}

double det_iou_metric(const NormBox& pred, const NormBox& gt) {
  return losses::box_iou(pred, gt, 0.0);
}

double mre(const KeypointSet& pred, const KeypointSet& gt, Size2 size) {
  if (pred.points.size() != gt.points.size() || gt.points.empty())
    throw Error(ErrorCode::CountMismatch, "mre: " + std::to_string(pred.points.size()) + " vs " +
                                              std::to_string(gt.points.size()) + " points");
  double s = 0;
  for (size_t i = 0; i < gt.points.size(); ++i)
    s += std::hypot((pred.points[i].x - gt.points[i].x) * size.width,
                    (pred.points[i].y - gt.points[i].y) * size.height);
  return s / double(gt.points.size());
}

DatasetScore score_dataset(const DatasetSpec& spec, const std::vector<Sample>& truth,
                           const std::vector<Target>& pred) {
  if (truth.size() != pred.size())
    throw Error(ErrorCode::CountMismatch, "score_dataset: " + std::to_string(pred.size()) +
                                              " predictions for " + std::to_string(truth.size()) + " samples");
  for (const auto& p : pred)
    if (task_of(p) != spec.task)
      throw Error(ErrorCode::HeadKindMismatch, "prediction kind differs from dataset task");
  DatasetScore out;
  out.dataset_id = spec.dataset_id;
  out.task = spec.task;
  out.count = int(truth.size());
  switch (spec.task) {
    case TaskKind::Seg: {
      double d = 0, hd = 0;
      int hd_n = 0;
      for (size_t i = 0; i < truth.size(); ++i) {
        const auto& g = std::get<MaskMap>(truth[i].target);
        const auto& p = std::get<MaskMap>(pred[i]);
        double ds = 0;
        for (int k = 1; k < spec.num_classes; ++k) {
          ds += dsc(p, g, k);
          const auto h = hausdorff(p, g, k);
          if (h.empty) {
            ++out.flagged;
          } else {
            hd += h.value;
            ++hd_n;
          }
        }
        d += ds / (spec.num_classes - 1);
      }
      out.values["dsc"] = truth.empty() ? 0.0 : d / double(truth.size());
      if (hd_n > 0) out.values["hd"] = hd / hd_n;
      break;
    }
    case TaskKind::Cls: {
      std::vector<std::vector<double>> scores;
      std::vector<int> labels;
      for (size_t i = 0; i < truth.size(); ++i) {
        const auto& p = std::get<ClassLabel>(pred[i]);
        std::vector<double> s(size_t(spec.num_classes), 0.0);
        if (p.probabilities) s = *p.probabilities;
        else s[size_t(p.index)] = 1.0;
        scores.push_back(s);
        labels.push_back(std::get<ClassLabel>(truth[i].target).index);
      }
      const auto r = classification_metrics(scores, labels, spec.num_classes);
      if (r.auc) out.values["auc"] = *r.auc;
      out.values["f1"] = r.f1;
      out.values["mcc"] = r.mcc;
      out.values["accuracy"] = r.accuracy;
      break;
    }
    case TaskKind::Det: {
      double s = 0;
      int n = 0;
      for (size_t i = 0; i < truth.size(); ++i) {
        const auto& g = std::get<NormBox>(truth[i].target);
        if (g.is_invalid()) {
          ++out.flagged;
          continue;
        }
        s += det_iou_metric(std::get<NormBox>(pred[i]), g);
        ++n;
      }
      out.values["iou"] = n ? s / n : 0.0;
      break;
    }
    case TaskKind::Reg: {
      double orig = 0, train = 0;
      for (size_t i = 0; i < truth.size(); ++i) {
        const auto& g = std::get<KeypointSet>(truth[i].target);
        const auto& p = std::get<KeypointSet>(pred[i]);
        orig += mre(p, g, truth[i].original_size);
        train += mre(p, g, {truth[i].image.height, truth[i].image.width});
      }
      out.values["mre"] = truth.empty() ? 0.0 : orig / double(truth.size());
      out.values["mre_train_px"] = truth.empty() ? 0.0 : train / double(truth.size());
      break;
    }
  }
  return out;
}

nlohmann::json results_json(const std::vector<DatasetScore>& scores) {
  nlohmann::json j;
  j["schema_version"] = io::kSchemaVersion;
  j["datasets"] = nlohmann::json::object();
  std::map<std::string, std::map<std::string, std::pair<double, int>>> by_task;
  for (const auto& s : scores) {
    const std::string kind(to_string(s.task));
    j["datasets"][s.dataset_id] = {{"task", kind},
                                   {"count", s.count},
                                   {"flagged", s.flagged},
                                   {"metrics", s.values},
                                   {"headline", headline_name(s.task)}};
    for (const auto& [name, v] : s.values) {
      auto& acc = by_task[kind][name];
      acc.first += v;
      acc.second += 1;
    }
  }
  j["tasks"] = nlohmann::json::object();
  for (const auto& [kind, m] : by_task)
    for (const auto& [name, acc] : m) j["tasks"][kind][name] = acc.first / acc.second;
  return j;
}

std::string headline_name(TaskKind task) {
  switch (task) {
    case TaskKind::Seg: return "dsc";
    case TaskKind::Cls: return "accuracy";
    case TaskKind::Det: return "iou";
    case TaskKind::Reg: return "mre_train_px";
  }
  return "";
}

bool headline_higher_is_better(TaskKind task) { return task != TaskKind::Reg; }

double headline(const DatasetScore& score) { return score.values.at(headline_name(score.task)); }

bool headline_at_least(const DatasetScore& a, const DatasetScore& b) {
  return headline_higher_is_better(a.task) ? headline(a) >= headline(b) : headline(a) <= headline(b);
}

}  // namespace echoflow::metrics
