#pragma once

#include <span>
#include <vector>

#include "echoflow/core.hpp"

// Training objectives, evaluated in double precision outside the autograd
// graph. Each returns the value and d(loss)/d(input), which the trainer seeds
// into the graph.
namespace echoflow::losses {

struct LossConfig {
  double alpha = 1.0;      // detection L1 weight
  double eps_iou = 1e-7;
  double dice_smooth = 1.0;

  void validate() const;  // throws InvalidSpec
};

struct LossGrad {
  double value = 0;
  std::vector<double> grad;
};

// logits: [K, H, W] row-major per channel.
LossGrad dice_loss(std::span<const double> logits, int num_classes, const MaskMap& mask,
                   double smooth);
LossGrad ce_loss(std::span<const double> logits, int label);
LossGrad heatmap_mse(std::span<const double> pred, std::span<const double> target);

// Throws InvalidBox if either box is the INVALID sentinel or malformed.
double box_iou(const NormBox& a, const NormBox& b, double eps);
// 1 - IoU + alpha * L1 when valid; exactly 0 with zero gradient otherwise.
// The gradient is taken with respect to the predicted box corners.
LossGrad det_loss(const NormBox& pred, const NormBox& gt, const LossConfig& cfg, bool valid);

// Batch reductions over model outputs. `channels` selects a dataset's slice of
// a shared head; the seed has the full output layout with zeros elsewhere.
// All reduce by the mean over contributing samples.
struct BatchLoss {
  double value = 0;
  std::vector<double> seed;
  int count = 0;  // contributing samples
};

// logits [N, C, H, W]
BatchLoss seg_batch_loss(std::span<const float> logits, int n, int c, int h, int w,
                         const std::vector<const MaskMap*>& masks, const std::vector<int>& channels,
                         const LossConfig& cfg);
// logits [N, C]
BatchLoss cls_batch_loss(std::span<const float> logits, int n, int c,
                         const std::vector<int>& labels, const std::vector<int>& channels);
// raw [N, 4], squashed by model::box_from_raw. INVALID targets are masked out.
BatchLoss det_batch_loss(std::span<const float> raw, int n, const std::vector<NormBox>& boxes,
                         const LossConfig& cfg);
// heatmaps [N, C, H, W] against targets of the selected channels.
BatchLoss reg_batch_loss(std::span<const float> heatmaps, int n, int c, int h, int w,
                         const std::vector<const KeypointSet*>& points,
                         const std::vector<int>& channels);

}  // namespace echoflow::losses
