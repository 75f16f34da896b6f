#include "echoflow/core.hpp"

#include <cmath>
#include <sstream>

namespace echoflow {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Seg: return "SEG";
    case TaskKind::Cls: return "CLS";
    case TaskKind::Det: return "DET";
    case TaskKind::Reg: return "REG";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view text) {
  for (TaskKind k : kAllTaskKinds)
    if (to_string(k) == text) return k;
  throw Error(ErrorCode::Parse, "unknown task kind '" + std::string(text) + "'");
}

TaskKind task_of(const Target& target) {
  switch (target.index()) {
    case 0: return TaskKind::Seg;
    case 1: return TaskKind::Cls;
    case 2: return TaskKind::Det;
    default: return TaskKind::Reg;
  }
}

std::optional<std::string> check_spec(const DatasetSpec& spec) {
  if (spec.dataset_id.empty()) return "dataset_id: must be non-empty";
  if (spec.train_resolution <= 0) return "train_resolution: must be positive";
  if ((spec.task == TaskKind::Cls || spec.task == TaskKind::Seg) && spec.num_classes < 2)
    return "num_classes: must be >= 2 for CLS and SEG";
  if (spec.task == TaskKind::Reg && spec.num_keypoints < 1)
    return "num_keypoints: must be >= 1 for REG";
  if (spec.num_classes < 1) return "num_classes: must be positive";
  if (!spec.class_names.empty() &&
      (spec.task == TaskKind::Cls || spec.task == TaskKind::Seg) &&
      int(spec.class_names.size()) != spec.num_classes)
    return "class_names: length must equal num_classes";
  return std::nullopt;
}

void Registry::add(const DatasetSpec& spec) {
  if (auto err = check_spec(spec)) throw Error(ErrorCode::InvalidSpec, *err);
  if (contains(spec.dataset_id))
    throw Error(ErrorCode::DuplicateId, "dataset '" + spec.dataset_id + "' already registered");
  specs_.emplace(spec.dataset_id, spec);
}

const DatasetSpec& Registry::get(const std::string& dataset_id) const {
  auto it = specs_.find(dataset_id);
  if (it == specs_.end())
    throw Error(ErrorCode::UnknownDataset, "dataset '" + dataset_id + "' is not registered");
  return it->second;
}

std::vector<std::string> Registry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : specs_) out.push_back(id);
  return out;
}

Registry register_dataset(const DatasetSpec& spec, Registry registry) {
  registry.add(spec);
  return registry;
}

namespace {

bool in_unit(double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; }

void check_box(const NormBox& b, std::vector<std::string>& errors) {
  if (b.is_invalid()) return;
  if (!in_unit(b.x_min) || !in_unit(b.y_min) || !in_unit(b.x_max) || !in_unit(b.y_max))
    errors.push_back("box coordinate outside [0,1]");
  if (b.x_min > b.x_max) errors.push_back("x_min > x_max");
  if (b.y_min > b.y_max) errors.push_back("y_min > y_max");
}

}  // namespace

ValidationReport validate_sample(const Sample& s, const DatasetSpec& spec) {
  ValidationReport rep;
  auto& errors = rep.errors;
  if (s.dataset_id != spec.dataset_id)
    errors.push_back("dataset_id mismatch: sample '" + s.dataset_id + "' vs spec '" +
                     spec.dataset_id + "'");
  if (s.original_size.height <= 0 || s.original_size.width <= 0)
    errors.push_back("original_size must be positive");

  const auto& img = s.image;
  if (img.height <= 0 || img.width <= 0 ||
      img.pixels.size() != size_t(img.height) * size_t(img.width)) {
    errors.push_back("image shape inconsistent with pixel count");
  } else {
    for (float v : img.pixels) {
      if (!std::isfinite(v) || v < 0.0f || v > 1.0f) {
        errors.push_back("image intensity outside [0,1] or non-finite");
        break;
      }
    }
  }

  if (task_of(s.target) != spec.task) {
    errors.push_back("target type " + std::string(to_string(task_of(s.target))) +
                     " does not match dataset task " + std::string(to_string(spec.task)));
    return rep;
  }

  std::visit(
      [&](const auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, MaskMap>) {
          if (t.labels.size() != size_t(t.height) * size_t(t.width))
            errors.push_back("mask shape inconsistent with label count");
          if (t.height != img.height || t.width != img.width)
            errors.push_back("mask size differs from image size");
          for (auto l : t.labels) {
            if (l >= spec.num_classes) {
              errors.push_back("mask label out of range");
              break;
            }
          }
        } else if constexpr (std::is_same_v<T, ClassLabel>) {
          if (t.index < 0 || t.index >= spec.num_classes) errors.push_back("label out of range");
          if (t.probabilities) {
            const auto& p = *t.probabilities;
            if (int(p.size()) != spec.num_classes)
              errors.push_back("probability vector length differs from num_classes");
            double sum = 0;
            for (double v : p) {
              if (!std::isfinite(v) || v < 0) errors.push_back("probability negative or non-finite");
              sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-6) errors.push_back("probabilities do not sum to 1");
          }
        } else if constexpr (std::is_same_v<T, NormBox>) {
          check_box(t, errors);
        } else {
          if (int(t.points.size()) != spec.num_keypoints)
            errors.push_back("keypoint count differs from num_keypoints");
          for (const auto& p : t.points) {
            if (!in_unit(p.x) || !in_unit(p.y)) {
              errors.push_back("keypoint outside [0,1]");
              break;
            }
          }
        }
      },
      s.target);
  return rep;
}

Registry default_registry(int res) {
  Registry reg;
  reg.add({"lesion_seg", TaskKind::Seg, 2, 0, res, {"background", "lesion"}});
  reg.add({"lesion_cls", TaskKind::Cls, 2, 0, res, {"benign", "malignant"}});
  reg.add({"lesion_det", TaskKind::Det, 1, 0, res, {"lesion"}});
  reg.add({"labor_reg", TaskKind::Reg, 1, 3, res,
           {"landmark_disc", "landmark_ring", "landmark_cross"}});
  return reg;
}

}  // namespace echoflow
