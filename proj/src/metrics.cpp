#include "ctxseg/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

#include "ctxseg/error.hpp"
#include "ctxseg/graph.hpp"

namespace ctxseg {
namespace {

void check_values(std::span<const std::uint8_t> m, std::size_t classes, const char* what) {
  for (const auto v : m) {
    if (v >= classes) fail(ErrorCode::unknown_label, std::string(what) + " value " + std::to_string(v) + " outside vocabulary");
  }
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) fail(ErrorCode::invalid_argument, "confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) fail(ErrorCode::shape_mismatch, "prediction and ground truth extents differ");
  check_values(pred, classes_, "prediction");
  check_values(gt, classes_, "ground truth");
  for (std::size_t i = 0; i < pred.size(); ++i) ++counts_[gt[i] * classes_ + pred[i]];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) fail(ErrorCode::shape_mismatch, "confusion matrix class count differs");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouResult compute_iou(const ConfusionMatrix& cm, bool include_background) {
  const std::size_t k = cm.classes();
  IouResult r;
  r.per_class.resize(k);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t inter = cm.at(c, c), gt = 0, pred = 0;
    for (std::size_t o = 0; o < k; ++o) {
      gt += cm.at(c, o);
      pred += cm.at(o, c);
    }
    const std::uint64_t uni = gt + pred - inter;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(inter) / static_cast<double>(uni);
    if (c == 0 && !include_background) continue;
    sum += *r.per_class[c];
    ++used;
  }
  r.miou = used == 0 ? 1.0 : sum / static_cast<double>(used);
  return r;
}

IouResult compute_miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t classes,
                       bool include_background) {
  ConfusionMatrix cm(classes);
  cm.add(pred, gt);
  return compute_iou(cm, include_background);
}

ApAccumulator::ApAccumulator(std::size_t classes, double iou_threshold)
    : classes_(classes), threshold_(iou_threshold), detections_(classes), gt_per_image_(classes) {
  if (classes == 0) fail(ErrorCode::invalid_argument, "ap accumulator needs at least one class");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) fail(ErrorCode::invalid_argument, "IoU threshold outside (0, 1]");
}

void ApAccumulator::add(std::span<const std::uint8_t> pred, std::span<const float> confidence,
                        std::span<const std::uint8_t> gt, std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  if (pred.size() != n || gt.size() != n || confidence.size() != n) {
    fail(ErrorCode::shape_mismatch, "ap: prediction, confidence and ground truth extents differ");
  }
  check_values(pred, classes_, "prediction");
  check_values(gt, classes_, "ground truth");
  for (const float c : confidence) {
    if (!(c >= 0.0f && c <= 1.0f)) fail(ErrorCode::invalid_argument, "confidence outside [0, 1]");
  }
  const auto gt_regions = connected_components(gt, height, width);
  const auto det_regions = connected_components(pred, height, width);
  // Region index per pixel for fast intersections.
  std::vector<std::int64_t> gt_owner(n, -1);
  std::vector<std::vector<std::size_t>> gt_of_class(classes_);
  for (std::size_t g = 0; g < gt_regions.size(); ++g) {
    for (const auto p : gt_regions[g].pixels) gt_owner[p] = static_cast<std::int64_t>(g);
    gt_of_class[gt_regions[g].value].push_back(g);
  }
  for (std::size_t c = 0; c < classes_; ++c) gt_per_image_[c].push_back(gt_of_class[c].size());

  for (std::size_t d = 0; d < det_regions.size(); ++d) {
    const auto& det = det_regions[d];
    double score = 0.0;
    std::vector<std::size_t> inter(gt_regions.size(), 0);
    for (const auto p : det.pixels) {
      score += confidence[p];
      if (gt_owner[p] >= 0) ++inter[static_cast<std::size_t>(gt_owner[p])];
    }
    Scored s{score / static_cast<double>(det.pixels.size()), images_, d, {}};
    for (const auto g : gt_of_class[det.value]) {
      const double uni = static_cast<double>(det.pixels.size() + gt_regions[g].pixels.size() - inter[g]);
      s.ious.push_back(static_cast<double>(inter[g]) / uni);
    }
    detections_[det.value].push_back(std::move(s));
  }
  ++images_;
}

double average_precision(const std::vector<int>& hits, std::size_t ground_truth) {
  if (ground_truth == 0) fail(ErrorCode::invalid_argument, "average precision needs ground truth");
  std::vector<double> precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i] ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  // Recall rises by exactly 1/G at each hit; adding p/G avoids the
  // cancellation of differencing rounded recall values.
  double ap = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i)
    if (hits[i]) ap += precision[i] / static_cast<double>(ground_truth);
  return ap;
}

ApAccumulator::Result ApAccumulator::finalize() const {
  Result r;
  r.per_class.resize(classes_);
  r.true_positives.assign(classes_, 0);
  r.false_positives.assign(classes_, 0);
  r.ground_truth.assign(classes_, 0);
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 1; c < classes_; ++c) {
    std::size_t total_gt = 0;
    for (const auto g : gt_per_image_[c]) total_gt += g;
    r.ground_truth[c] = total_gt;
    auto dets = detections_[c];
    std::stable_sort(dets.begin(), dets.end(), [](const Scored& a, const Scored& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.order < b.order;
    });
    std::vector<std::vector<bool>> matched(images_);
    for (std::size_t i = 0; i < images_; ++i) matched[i].assign(gt_per_image_[c][i], false);
    std::vector<int> hits;
    for (const auto& d : dets) {
      std::int64_t best = -1;
      double best_iou = threshold_;
      for (std::size_t g = 0; g < d.ious.size(); ++g) {
        if (!matched[d.image][g] && d.ious[g] >= best_iou && (best < 0 || d.ious[g] > best_iou)) {
          best = static_cast<std::int64_t>(g);
          best_iou = d.ious[g];
        }
      }
      if (best >= 0) matched[d.image][static_cast<std::size_t>(best)] = true;
      hits.push_back(best >= 0 ? 1 : 0);
      (best >= 0 ? r.true_positives[c] : r.false_positives[c]) += 1;
    }
    if (total_gt == 0) continue;
    r.per_class[c] = average_precision(hits, total_gt);
    sum += *r.per_class[c];
    ++used;
  }
  r.map = used == 0 ? 1.0 : sum / static_cast<double>(used);
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["samples"] = samples;
  j["miou"] = iou.miou;
  j["map"] = ap.map;
  auto& classes = j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    nlohmann::ordered_json row;
    row["id"] = c;
    row["name"] = class_names[c];
    row["iou"] = c < iou.per_class.size() && iou.per_class[c] ? nlohmann::ordered_json(*iou.per_class[c]) : nullptr;
    row["ap"] = c < ap.per_class.size() && ap.per_class[c] ? nlohmann::ordered_json(*ap.per_class[c]) : nullptr;
    classes.push_back(row);
  }
  const std::size_t k = class_names.size();
  auto& cm = j["confusion"] = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < k && confusion.size() == k * k; ++r) {
    cm.push_back(std::vector<std::uint64_t>(confusion.begin() + static_cast<std::ptrdiff_t>(r * k),
                                            confusion.begin() + static_cast<std::ptrdiff_t>((r + 1) * k)));
  }
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::string out = "class,iou,ap\n";
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    out += class_names[c] + ",";
    if (c < iou.per_class.size() && iou.per_class[c]) out += fixed6(*iou.per_class[c]);
    out += ",";
    if (c < ap.per_class.size() && ap.per_class[c]) out += fixed6(*ap.per_class[c]);
    out += "\n";
  }
  return out;
}

}  // namespace ctxseg
