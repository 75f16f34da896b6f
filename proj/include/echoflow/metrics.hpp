#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoflow/core.hpp"

namespace echoflow::metrics {

// 2|P∩G| / (|P|+|G|) on the class-k binary masks; 1 when both are empty.
double dsc(const MaskMap& pred, const MaskMap& gt, int k);

// Foreground pixels of class k with a 4-neighbour outside the set (the image
// border counts as outside). Returned as (row, col).
std::vector<std::pair<int, int>> boundary_points(const MaskMap& mask, int k);

struct HausdorffResult {
  double value = 0;
  bool empty = false;  // one of the sets was empty; value is the image diagonal
};

// Symmetric Hausdorff distance between class-k boundaries, in pixels.
HausdorffResult hausdorff(const MaskMap& pred, const MaskMap& gt, int k);

struct ClassificationResult {
  std::optional<double> auc;  // absent when fewer than two classes are present
  double f1 = 0;
  double mcc = 0;
  double accuracy = 0;
};

// Mann-Whitney AUC of `scores` for the positive flags, ties counted 0.5.
std::optional<double> rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

// confusion[t][p]: count of samples with true class t predicted as p.
std::vector<std::vector<long>> confusion_matrix(const std::vector<int>& truth,
                                                const std::vector<int>& predicted, int num_classes);
double mcc(const std::vector<std::vector<long>>& confusion);
// Positive-class F1 for two classes, macro average otherwise.
double f1(const std::vector<std::vector<long>>& confusion);

// scores[i] is the per-class probability vector of sample i.
ClassificationResult classification_metrics(const std::vector<std::vector<double>>& scores,
                                            const std::vector<int>& labels, int num_classes);

// Exact IoU (no stabilizer). Throws InvalidBox.
double det_iou_metric(const NormBox& pred, const NormBox& gt);

// Mean radial error in pixels of `original_size`. Throws CountMismatch.
double mre(const KeypointSet& pred, const KeypointSet& gt, Size2 original_size);

struct DatasetScore {
  std::string dataset_id;
  TaskKind task = TaskKind::Seg;
  int count = 0;
  std::map<std::string, double> values;
  int flagged = 0;  // HD sentinel samples, or unannotated DET samples skipped
};

// Scores predictions against ground truth of the same dataset. Predictions
// for CLS carry probabilities; missing probabilities count as one-hot.
DatasetScore score_dataset(const DatasetSpec& spec, const std::vector<Sample>& truth,
                           const std::vector<Target>& predictions);

// {schema_version, datasets: {...}, tasks: {...}}: per-dataset values and the
// mean of each metric over datasets of the same task kind.
nlohmann::json results_json(const std::vector<DatasetScore>& scores);

// The metric used to compare generalist and specialist per task: DSC,
// accuracy, IoU, keypoint error in training pixels.
std::string headline_name(TaskKind task);
bool headline_higher_is_better(TaskKind task);
double headline(const DatasetScore& score);
// True when `a` is at least as good as `b` on the headline metric.
bool headline_at_least(const DatasetScore& a, const DatasetScore& b);

}  // namespace echoflow::metrics
