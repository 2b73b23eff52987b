#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ctxseg {

/// counts[gt * classes + pred]; class 0 is background.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  void merge(const ConfusionMatrix& other);
  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_.at(gt * classes_ + pred); }
  const std::vector<std::uint64_t>& counts() const noexcept { return counts_; }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct IouResult {
  std::vector<std::optional<double>> per_class;  // indexed by mask id; nullopt for empty union
  double miou = 1.0;                             // 1.0 when no class qualifies
};

/// IoU_c = |pred_c and gt_c| / |pred_c or gt_c|; the mean skips empty unions
/// and, unless include_background, class 0.
IouResult compute_iou(const ConfusionMatrix& cm, bool include_background = false);
IouResult compute_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t classes,
                       bool include_background = false);

/// Region-detection average precision. Detections are 4-connected components
/// of the predicted mask scored by mean confidence; they are matched greedily
/// (highest score first) to unmatched ground-truth components of the same
/// class at IoU >= threshold.
class ApAccumulator {
 public:
  ApAccumulator(std::size_t classes, double iou_threshold = 0.5);

  /// confidence: per-pixel max softmax probability in [0, 1].
  void add(std::span<const std::uint8_t> pred, std::span<const float> confidence, std::span<const std::uint8_t> gt,
           std::size_t height, std::size_t width);

  struct Result {
    std::vector<std::optional<double>> per_class;  // indexed by mask id; nullopt without ground truth
    double map = 1.0;                              // 1.0 when no class has ground truth
    std::vector<std::size_t> true_positives;       // per class
    std::vector<std::size_t> false_positives;
    std::vector<std::size_t> ground_truth;
  };
  Result finalize() const;

 private:
  struct Scored {
    double score;
    std::size_t image;
    std::size_t order;
    std::vector<double> ious;  // against this image's GT regions of the class
  };
  std::size_t classes_;
  double threshold_;
  std::size_t images_ = 0;
  std::vector<std::vector<Scored>> detections_;              // per class
  std::vector<std::vector<std::size_t>> gt_per_image_;       // [class][image] region count
};

/// All-point interpolated area under the precision/recall curve given the
/// TP (1) / FP (0) sequence in descending confidence and the GT count.
double average_precision(const std::vector<int>& hits, std::size_t ground_truth);

struct EvalReport {
  std::vector<std::string> class_names;  // background first
  IouResult iou;
  ApAccumulator::Result ap;
  std::vector<std::uint64_t> confusion;  // row-major [gt x pred]
  std::size_t samples = 0;

  std::string to_json() const;
  /// Header `class,iou,ap` then one row per class; empty cells for undefined values.
  std::string to_csv() const;
};

}  // namespace ctxseg
