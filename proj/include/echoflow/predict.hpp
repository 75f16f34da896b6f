#pragma once

#include <string>
#include <vector>

#include "echoflow/augment.hpp"
#include "echoflow/core.hpp"
#include "echoflow/model.hpp"

namespace echoflow::predict {

// Task-typed model output before conversion to a Target. SEG carries
// per-class probability maps [K, H, W], CLS the class probabilities.
struct Prediction {
  TaskKind task = TaskKind::Seg;
  int channels = 0, height = 0, width = 0;
  std::vector<double> probs;
  NormBox box;
  KeypointSet points;

  // SEG -> argmax MaskMap, CLS -> ClassLabel with probabilities.
  Target to_target() const;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual TaskKind task() const = 0;
  virtual Prediction predict(const ImageGray& image) const = 0;
  virtual std::vector<Prediction> predict_batch(const std::vector<const ImageGray*>& images) const;
};

// Runs either the specialist of `dataset_id` or the generalist head restricted
// to the dataset's channel slice. Throws UnknownDataset if the head is missing.
class ModelPredictor final : public Predictor {
 public:
  enum class Source { Generalist, Specialist };

  ModelPredictor(const model::MultiTaskModel& model, const DatasetSpec& spec, Source source);

  TaskKind task() const override { return spec_.task; }
  Prediction predict(const ImageGray& image) const override;
  std::vector<Prediction> predict_batch(const std::vector<const ImageGray*>& images) const override;

 private:
  const model::MultiTaskModel& model_;
  DatasetSpec spec_;
  const model::TaskHead* head_ = nullptr;
  const model::StemAdapter* adapter_ = nullptr;
  std::vector<int> channels_;
};

enum class TtaMode { Off, IdentityOnly, Full };

TtaMode parse_tta_mode(const std::string& text);
std::string to_string(TtaMode mode);

// {identity, hflip, vflip, rot90}.
std::vector<augment::GeoTransform> default_tta_set();
std::vector<augment::GeoTransform> tta_set(TtaMode mode);

// Runs the predictor on every transformed image, maps each output back, and
// aggregates: mean probabilities (SEG, CLS), coordinate-wise median (DET, REG).
Prediction tta_predict(const Predictor& predictor, const ImageGray& image,
                       const std::vector<augment::GeoTransform>& transforms);

std::vector<Prediction> predict_all(const Predictor& predictor, const std::vector<const ImageGray*>& images,
                                    TtaMode mode, int batch_size = 16);

}  // namespace echoflow::predict
