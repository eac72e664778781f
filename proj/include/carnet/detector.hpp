#pragma once

#include <array>
#include <string>
#include <vector>

#include "carnet/nn.hpp"

namespace carnet::det {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // normalized corners, x1<x2, y1<y2
};

double iou(const Box& a, const Box& b);

// Ground truth (boxes+labels) or predictions (boxes+labels+scores).
struct DetectionSet {
  std::vector<Box> boxes;
  std::vector<int> labels;
  std::vector<double> scores;  // empty for ground truth

  void validate(int num_classes) const;
};

struct AnchorConfig {
  int grid = 6;                              // G x G cells
  std::vector<double> sizes = {0.3, 0.5, 0.7};  // square anchor side lengths
};

// Row-major anchors: index = (y*G + x)*A + a.
std::vector<Box> make_anchors(const AnchorConfig& cfg);

// Per-anchor assignment: truth index or -1 for background. Every truth box is
// matched to at least its best-IoU anchor.
struct Assignment {
  std::vector<int> truth_index;  // per anchor, -1 = background
  int num_positive = 0;
};
Assignment match_anchors(const std::vector<Box>& anchors, const DetectionSet& truth,
                         double iou_thresh);

// SSD-style box encoding against an anchor (center/size with 0.1/0.2 variances).
std::array<double, 4> encode_box(const Box& truth, const Box& anchor);
Box decode_box(const std::array<double, 4>& off, const Box& anchor);

struct DetectorConfig {
  int num_classes = 3;
  int width = 16;
  AnchorConfig anchors;
  double match_iou = 0.5;
  double nms_iou = 0.45;
  double score_thresh = 0.05;
  int neg_ratio = 3;  // hard-negative mining ratio
  double leak = 0.1;
};

// Tiny single-scale anchor head: two stride-2 convs + one 3x3 conv backbone,
// then per-anchor class logits and box offsets. Input H=W=4*grid.
class Detector {
 public:
  Detector(DetectorConfig cfg, nn::ParamStore& ps, std::string prefix = "det")
      : cfg_(cfg), ps_(&ps), prefix_(std::move(prefix)) {}

  void init(Rng& rng);
  const DetectorConfig& config() const { return cfg_; }

  // img (B,3,H,W) -> cls logits (B*G*G*A, C+1) and offsets (B*G*G*A, 4).
  // Row order matches make_anchors, batch-major. Class C is background.
  std::pair<ag::Var, ag::Var> forward(nn::Ctx& ctx, ag::Var img) const;

 private:
  DetectorConfig cfg_;
  nn::ParamStore* ps_;
  std::string prefix_;
};

struct DetLossParts {
  ag::Var cls, loc, total;
};

// Classification: cross-entropy over positives plus hard-mined negatives at
// neg_ratio:1; localization: smooth-L1 on matched anchor offsets. Both are
// normalized by the positive count (by the mined negative count when there
// are no positives).
DetLossParts detection_loss(nn::Ctx& ctx, ag::Var cls_logits, ag::Var loc,
                            const std::vector<Box>& anchors, const Assignment& assign,
                            const DetectionSet& truth, const DetectorConfig& cfg);

// Eval path: raw head outputs for ONE image -> thresholded, per-class NMS'd
// detections with boxes clamped to [0,1].
DetectionSet decode_and_nms(const Tensor& cls_logits, const Tensor& loc,
                            const std::vector<Box>& anchors, const DetectorConfig& cfg);

// All-point interpolated AP at the given IoU, averaged over classes present
// in the truths. voc11 switches to 11-point interpolation.
double mean_average_precision(const std::vector<DetectionSet>& preds,
                              const std::vector<DetectionSet>& truths,
                              double iou_thresh = 0.5, bool voc11 = false);
double average_precision_class(const std::vector<DetectionSet>& preds,
                               const std::vector<DetectionSet>& truths, int cls,
                               double iou_thresh, bool voc11);

}  // namespace carnet::det
