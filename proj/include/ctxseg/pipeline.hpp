#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctxseg/checkpoint.hpp"
#include "ctxseg/config.hpp"
#include "ctxseg/metrics.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/scene.hpp"

namespace ctxseg {

inline constexpr const char* kMetricsHeader = "epoch,loss,loss_ce,loss_contrastive,train_miou,val_miou,val_map";

/// Writes `<out>/train` and `<out>/val` (val sample indices follow train).
void generate_data(const PipelineConfig& cfg, const std::string& out_dir);

/// A model together with everything needed to run it.
struct TrainedModel {
  PipelineConfig config;
  LabelVocabulary vocab;
  std::unique_ptr<SegmentationModel<float>> model;
  std::unique_ptr<Adam<float>> optimizer;
  RngState data_rng;
  std::size_t epoch = 0;
};

/// Label embeddings for `vocab` per cfg.embedding (file paths resolved
/// against the config).
Tensor<double> label_embeddings(const PipelineConfig& cfg, const LabelVocabulary& vocab);
ModelSpec model_spec(const PipelineConfig& cfg, const Tensor<double>& embeddings);

/// Fresh model seeded by cfg.seed.
TrainedModel initialize(const PipelineConfig& cfg, const LabelVocabulary& vocab);

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0, loss_ce = 0, loss_contrastive = 0;
  double train_miou = 0, val_miou = 0, val_map = 0;
};

struct TrainResult {
  TrainedModel model;
  std::vector<EpochMetrics> history;
  std::string metrics_csv;
};

/// Observer called after every epoch (progress logging).
using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Reads cfg.data.train / cfg.data.val and trains for cfg.training.epochs.
/// Throws non_finite if a loss diverges.
TrainResult train(const PipelineConfig& cfg, const EpochCallback& on_epoch = {});
TrainResult train(const PipelineConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                  const EpochCallback& on_epoch = {});

std::string metrics_csv(const std::vector<EpochMetrics>& history);

/// Final-pass per-pixel labels and confidences.
struct Prediction {
  std::vector<std::uint8_t> labels;
  std::vector<float> confidence;
};
Prediction predict(const TrainedModel& m, const RgbImage& image);

/// Throws vocab_mismatch if the dataset roster differs from the model's.
EvalReport evaluate(const TrainedModel& m, const Dataset& data);
/// Predictions replaced by the ground truth (confidence 1).
EvalReport evaluate_oracle(const Dataset& data);

Checkpoint to_checkpoint(const TrainedModel& m);
TrainedModel from_checkpoint(const Checkpoint& ckpt);

struct AblationRow {
  Variant variant;
  EvalReport report;
  std::string metrics_csv;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string csv;   // variant,miou,map,delta_miou,delta_map (deltas vs the previous row)
  std::string text;  // rendered table
};

/// Trains and evaluates the four variants with the same seed.
AblationResult ablate(const PipelineConfig& cfg, const std::function<void(Variant, const EpochMetrics&)>& on_epoch = {});

struct InferenceResult {
  RgbImage overlay;     // 50/50 blend of the image with per-class colours
  GrayImage heatmap;    // round(255 * max softmax probability)
  std::string graph_json;      // empty unless requested
  std::string attention_csv;   // row,col,head,label,weight; empty without fusion
};
InferenceResult infer(const TrainedModel& m, const RgbImage& image);

/// Overlay colour of a mask id (background black).
std::array<std::uint8_t, 3> class_color(std::size_t mask_id);

struct Plots {
  std::string loss_svg;
  std::string miou_svg;
};
/// Throws parse on a malformed metrics CSV.
Plots plot_metrics(const std::string& csv);

}  // namespace ctxseg
