#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoflow/core.hpp"
#include "echoflow/nn/layers.hpp"

namespace echoflow::model {

using nn::ParamList;
using nn::Tensor;

inline constexpr int kStemStride = 4;

struct BackboneConfig {
  int resolution = 128;
  int stem_width = 64;
  int depth = 4;
  int embed_dim = 192;
  int heads = 3;
  int patch = 16;

  int grid() const { return resolution / patch; }
  int stem_size() const { return resolution / kStemStride; }
  // Throws InvalidSpec naming the first violated constraint.
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

// The three feature interfaces of the shared encoder.
struct FeatureBundle {
  Tensor tokens;              // [N, grid*grid, D]
  int grid = 0;
  std::vector<Tensor> scales; // [N,Cs,R/4,R/4], [N,2Cs,R/8,R/8]
  Tensor stem;                // [N,Cs,R/4,R/4], classification interface
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, std::mt19937_64& rng);

  // images: [N,1,R,R]. Throws ShapeMismatch on the wrong resolution.
  FeatureBundle encode(const Tensor& images) const;
  // Stem map only, no shape check; enough for the classification path.
  Tensor encode_stem(const Tensor& images) const;
  void collect(ParamList& out, const std::string& prefix) const;
  const BackboneConfig& config() const { return cfg_; }

 private:
  struct Block {
    nn::LayerNorm ln1, ln2;
    nn::Linear qkv, proj, fc1, fc2;
  };
  BackboneConfig cfg_;
  nn::Conv2d stem1_, stem2_, down_, patch_embed_;
  Tensor pos_embed_;
  std::vector<Block> blocks_;
  nn::LayerNorm final_ln_;
};

struct HeadConfig {
  TaskKind kind = TaskKind::Seg;
  int out_channels = 2;  // SEG classes, CLS classes, REG keypoints, DET 4
  int width = 64;        // decoder base width (SEG/DET/REG) or MLP hidden width (CLS)
  int heatmap_size = 0;  // REG only: h_m = w_m

  bool operator==(const HeadConfig&) const = default;
};

HeadConfig default_head_config(TaskKind kind, int out_channels, const BackboneConfig& bb);

// Spatial kernel of the adapter's middle convolution (stem cells).
inline constexpr int kAdapterKernel = 7;

struct AdapterConfig {
  bool enabled = false;
  int ratio = 4;
  bool operator==(const AdapterConfig&) const = default;
};

// Residual bottleneck on the stem map:
// stem + expand(relu(mix(relu(reduce(stem))))), mix being k x k.
// The expand layer starts at zero, so a fresh adapter is the identity.
class StemAdapter {
 public:
  StemAdapter() = default;
  StemAdapter(int stem_width, const AdapterConfig& cfg, std::mt19937_64& rng);
  Tensor operator()(const Tensor& stem) const;
  void collect(ParamList& out, const std::string& prefix) const;
  const AdapterConfig& config() const { return cfg_; }

 private:
  AdapterConfig cfg_;
  nn::Conv2d reduce_, mix_, expand_;
};

class TaskHead {
 public:
  virtual ~TaskHead() = default;
  TaskKind kind() const { return cfg_.kind; }
  const HeadConfig& config() const { return cfg_; }
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;

 protected:
  explicit TaskHead(HeadConfig cfg) : cfg_(std::move(cfg)) {}
  HeadConfig cfg_;
};

std::unique_ptr<TaskHead> make_head(const HeadConfig& cfg, const BackboneConfig& bb,
                                    std::mt19937_64& rng);
std::unique_ptr<TaskHead> clone_head(const TaskHead& head, const BackboneConfig& bb);

// Per-pixel logits [N, K, R, R]; cascaded upsampler over tokens plus skips.
Tensor seg_forward(const FeatureBundle& f, const TaskHead& head);
// Raw box parameters [N, 4]; see box_from_raw.
Tensor det_forward(const FeatureBundle& f, const TaskHead& head);
// Heatmaps [N, K, h_m, w_m].
Tensor reg_forward(const FeatureBundle& f, const TaskHead& head);
// Class logits [N, K]; reads only the stem map.
Tensor cls_forward(const Tensor& stem, const StemAdapter* adapter, const TaskHead& head);

// Pooled classifier input [N, Cs]; calibrate_cls_head sets the head's fixed
// per-channel standardization from such a batch.
Tensor cls_pooled(const Tensor& stem, const StemAdapter* adapter);
void calibrate_cls_head(TaskHead& head, const Tensor& pooled);

// Corner-plus-extent squashing: x_min = s(u0), x_max = x_min + (1 - x_min) s(u2),
// likewise for y. Always a valid NormBox.
NormBox box_from_raw(std::span<const double, 4> raw);
// d(loss)/d(raw) given d(loss)/d(box) in (x_min, y_min, x_max, y_max) order.
std::array<double, 4> box_raw_grad(std::span<const double, 4> raw, std::span<const double, 4> dbox);

struct Heatmap {
  int channels = 0, height = 0, width = 0;
  std::vector<double> values;

  double at(int k, int r, int c) const { return values[(size_t(k) * height + r) * width + c]; }
};

inline constexpr double kHeatmapSigma = 2.0;

Heatmap encode_target(const KeypointSet& points, int height, int width,
                      double sigma = kHeatmapSigma);
// Per-channel arg-max (first by row, then column) at pixel centers.
KeypointSet decode_keypoints(const Heatmap& heatmap);

// Dataset-specific head on the shared frozen backbone.
struct Specialist {
  DatasetSpec dataset;
  std::unique_ptr<TaskHead> head;
  std::optional<StemAdapter> adapter;
};

// Backbone + one generalist head per task kind + per-dataset specialists.
class MultiTaskModel {
 public:
  MultiTaskModel() = default;
  MultiTaskModel(const BackboneConfig& cfg, std::uint64_t seed);

  Backbone backbone;
  std::map<TaskKind, std::unique_ptr<TaskHead>> generalist_heads;
  // Per-dataset channel slices of the generalist heads.
  std::map<std::string, std::vector<int>> channel_maps;
  std::map<std::string, Specialist> specialists;
  std::vector<std::string> visit_log;
  nlohmann::json meta = nlohmann::json::object();

  const BackboneConfig& config() const { return backbone.config(); }

  // Creates the generalist head for `spec.task` (sized to the per-task maximum)
  // and records the dataset's channel slice.
  void ensure_generalist(const std::vector<DatasetSpec>& specs, std::uint64_t seed);

  ParamList backbone_params() const;
  ParamList generalist_params() const;
  ParamList specialist_params(const std::string& dataset_id) const;
  ParamList all_params() const;

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

std::string hash_params(const ParamList& params);

void save_checkpoint(const std::filesystem::path& path, const MultiTaskModel& model);
// Throws ConfigMismatch if `expected` is given and differs from the stored
// backbone config, or if any stored tensor disagrees with its module shape.
MultiTaskModel load_checkpoint(const std::filesystem::path& path,
                               const std::optional<BackboneConfig>& expected = std::nullopt);

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const HeadConfig& c);
HeadConfig head_config_from_json(const nlohmann::json& j);

// [N,1,R,R] batch tensor from images (all must be R x R).
Tensor images_to_tensor(const std::vector<const ImageGray*>& images);

}  // namespace echoflow::model
