#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "echoflow/error.hpp"

namespace echoflow {

enum class TaskKind { Seg, Cls, Det, Reg };

inline constexpr TaskKind kAllTaskKinds[] = {TaskKind::Seg, TaskKind::Cls, TaskKind::Det,
                                              TaskKind::Reg};

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view text);

struct DatasetSpec {
  std::string dataset_id;
  TaskKind task = TaskKind::Seg;
  int num_classes = 2;    // CLS and SEG (SEG counts background)
  int num_keypoints = 0;  // REG
  int train_resolution = 128;
  std::vector<std::string> class_names;

  bool operator==(const DatasetSpec&) const = default;
};

// Grayscale image, row-major, intensities in [0,1].
struct ImageGray {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  ImageGray() = default;
  ImageGray(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(size_t(h) * w, fill) {}

  float& at(int r, int c) { return pixels[size_t(r) * width + c]; }
  float at(int r, int c) const { return pixels[size_t(r) * width + c]; }

  bool operator==(const ImageGray&) const = default;
};

struct MaskMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  MaskMap() = default;
  MaskMap(int h, int w, std::uint8_t fill = 0) : height(h), width(w), labels(size_t(h) * w, fill) {}

  std::uint8_t& at(int r, int c) { return labels[size_t(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return labels[size_t(r) * width + c]; }

  bool operator==(const MaskMap&) const = default;
};

// Corner-form box in normalized image coordinates. The all-(-1) box marks an
// unannotated sample.
struct NormBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  static constexpr NormBox invalid() { return {-1, -1, -1, -1}; }
  bool is_invalid() const { return x_min == -1 && y_min == -1 && x_max == -1 && y_max == -1; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  bool operator==(const NormBox&) const = default;
};

struct Point2 {
  double x = 0, y = 0;
  bool operator==(const Point2&) const = default;
};

struct KeypointSet {
  std::vector<Point2> points;
  bool operator==(const KeypointSet&) const = default;
};

struct ClassLabel {
  int index = 0;
  std::optional<std::vector<double>> probabilities;
  bool operator==(const ClassLabel&) const = default;
};

using Target = std::variant<MaskMap, ClassLabel, NormBox, KeypointSet>;

TaskKind task_of(const Target& target);

struct Size2 {
  int height = 0;
  int width = 0;
  bool operator==(const Size2&) const = default;
};

struct Sample {
  ImageGray image;
  std::string dataset_id;
  Size2 original_size;
  Target target;

  bool operator==(const Sample&) const = default;
};

// Pixel-center convention: pixel (r, c) of an h x w grid sits at
// ((c + 0.5) / w, (r + 0.5) / h).
inline Point2 pixel_center(int r, int c, int h, int w) {
  return {(c + 0.5) / w, (r + 0.5) / h};
}

class Registry {
 public:
  // Throws DuplicateId or InvalidSpec (message names the offending field).
  void add(const DatasetSpec& spec);

  const DatasetSpec& get(const std::string& dataset_id) const;
  bool contains(const std::string& dataset_id) const { return specs_.count(dataset_id) > 0; }
  size_t size() const { return specs_.size(); }
  std::vector<std::string> ids() const;
  const std::map<std::string, DatasetSpec>& specs() const { return specs_; }

  bool operator==(const Registry&) const = default;

 private:
  std::map<std::string, DatasetSpec> specs_;
};

// Returns the first violated invariant, or nullopt.
std::optional<std::string> check_spec(const DatasetSpec& spec);

Registry register_dataset(const DatasetSpec& spec, Registry registry);

struct ValidationReport {
  std::vector<std::string> errors;
  bool ok() const { return errors.empty(); }
};

ValidationReport validate_sample(const Sample& sample, const DatasetSpec& spec);

// The synthetic registry used by the CLI defaults and the acceptance run.
Registry default_registry(int train_resolution = 128);

}  // namespace echoflow
