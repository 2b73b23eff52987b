#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "ctxseg/adam.hpp"
#include "ctxseg/embeddings.hpp"
#include "ctxseg/model.hpp"
#include "ctxseg/objectives.hpp"
#include "ctxseg/scene.hpp"

namespace ctxseg {

struct DataConfig {
  std::string train = "data/train";  // relative paths resolve against the config file
  std::string val = "data/val";
  std::size_t train_count = 200;
  std::size_t val_count = 50;
  SceneConfig scene = SceneConfig::desk_default();
};

struct TrainingConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  AugmentConfig augment;
};

struct InferConfig {
  bool dump_graph = true;
  bool dump_attention = true;
};

/// One JSON document; every key is optional, unknown keys are errors.
struct PipelineConfig {
  Variant variant = Variant::gnn;
  std::uint64_t seed = 0;
  DataConfig data;
  BackboneConfig backbone;
  FusionConfig fusion;
  GraphConfig graph;
  GraphSource graph_source = GraphSource::prediction;
  std::size_t head_dim = 32;
  LossConfig loss;
  EmbeddingConfig embedding;
  AdamConfig optimizer;
  TrainingConfig training;
  InferConfig infer;
  std::string base_dir = ".";  // not serialised

  /// Throws ErrorCode::config (or parse for invalid JSON).
  static PipelineConfig parse(const std::string& json_text, const std::string& base_dir = ".");
  static PipelineConfig load(const std::string& path);
  static PipelineConfig from_json(const nlohmann::json& j, const std::string& base_dir = ".");
  nlohmann::ordered_json to_json() const;

  void validate() const;
  std::string resolve(const std::string& path) const;
};

nlohmann::ordered_json scene_to_json(const SceneConfig& cfg);

}  // namespace ctxseg
