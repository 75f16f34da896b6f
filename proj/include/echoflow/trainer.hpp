#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoflow/augment.hpp"
#include "echoflow/core.hpp"
#include "echoflow/losses.hpp"
#include "echoflow/metrics.hpp"
#include "echoflow/model.hpp"
#include "echoflow/predict.hpp"

namespace echoflow::trainer {

using DataMap = std::map<std::string, std::vector<Sample>>;

// How long the optimizer stays on one dataset per cycle.
struct Granularity {
  enum class Unit { Epochs, Steps } unit = Unit::Epochs;
  int count = 1;

  bool operator==(const Granularity&) const = default;
};

struct StageOneConfig {
  std::vector<std::string> datasets;
  Granularity granularity;
  int cycles = 3;
  double backbone_lr = 1e-4;
  double head_lr = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 0;
  losses::LossConfig loss;
  augment::AugmentationPolicy augmentation = augment::default_policy();

  void validate() const;  // throws InvalidSpec
};

struct StageTwoConfig {
  std::string dataset_id;
  double head_lr = 1e-3;
  bool adapter = true;  // CLS only
  int steps = 200;
  int warmup_steps = 0;  // linear lr ramp
  int batch_size = 8;
  std::uint64_t seed = 0;
  losses::LossConfig loss;
  augment::AugmentationPolicy augmentation = augment::default_policy();

  void validate() const;
};

nlohmann::json to_json(const StageOneConfig& c);
StageOneConfig stage_one_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StageTwoConfig& c);
StageTwoConfig stage_two_from_json(const nlohmann::json& j);

struct StepRecord {
  std::string stage;
  std::string dataset_id;
  int visit = 0;  // index into the visit log (stage I), 0 for stage II
  long step = 0;  // global step within the stage
  double loss = 0;
};

struct RunLog {
  std::vector<std::string> visits;
  std::vector<StepRecord> steps;

  // Line-delimited records: one {"type":"visit"...} or {"type":"step"...} per line.
  std::string to_jsonl() const;
  // Mean loss of the first and last `window` steps on a dataset.
  std::pair<double, double> first_last_loss(const std::string& dataset_id, int window) const;
};

// The dataset sequence stage I will visit: a pure function of the config.
std::vector<std::string> visit_schedule(const StageOneConfig& config);

using Progress = std::function<void(const StepRecord&)>;

// Dataset-rotating generalist training. Creates the per-kind heads when
// missing, appends to model.visit_log. Throws EmptyDataset, UnknownDataset,
// DivergenceDetected (after 3 consecutive non-finite losses).
RunLog stage1_train(model::MultiTaskModel& model, const StageOneConfig& config, const Registry& registry,
                    const DataMap& data, const Progress& progress = {});

// Frozen-backbone specialization. The head starts from the generalist head of
// the same kind when the label spaces agree. Throws UnknownDataset,
// EmptyDataset, DivergenceDetected.
RunLog stage2_specialize(model::MultiTaskModel& model, const StageTwoConfig& config, const Registry& registry,
                         const DataMap& data, const Progress& progress = {});

struct Evaluation {
  metrics::DatasetScore score;
  std::vector<Target> predictions;
};

Evaluation evaluate(const model::MultiTaskModel& model, const DatasetSpec& spec,
                    const std::vector<Sample>& samples, predict::ModelPredictor::Source source,
                    predict::TtaMode tta = predict::TtaMode::Off);

}  // namespace echoflow::trainer
