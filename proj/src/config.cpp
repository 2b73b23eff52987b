#include "ctxseg/config.hpp"

#include <filesystem>
#include <set>

#include "ctxseg/error.hpp"
#include "ctxseg/netpbm.hpp"

namespace ctxseg {
namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

/// Reads keys of one JSON object and rejects any key nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::config, where() + " must be an object");
  }
  Section(const Section&) = delete;

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) fail(ErrorCode::config, "unknown key '" + qualified(key) + "'");
    }
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      fail(ErrorCode::config, "bad value for '" + qualified(key) + "'");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const std::string& key) const { return j_.at(key); }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

ojson color(const std::array<std::uint8_t, 3>& c) { return {c[0], c[1], c[2]}; }

void read_scene(Section& s, SceneConfig& c) {
  s.get("height", c.height);
  s.get("width", c.width);
  s.get("object_size", c.object_size);
  s.get("lattice", c.lattice);
  s.get("noise_sigma", c.noise_sigma);
  s.get("background", c.background);
  s.get("min_objects", c.min_objects);
  s.get("max_objects", c.max_objects);
  s.get("context_min_distance", c.context_min_distance);
  if (s.has("classes")) {
    c.classes.clear();
    for (const auto& e : s.at("classes")) {
      Section cs(e, s.qualified("classes[]"));
      ClassSpec spec;
      std::string shape = "square";
      cs.get("name", spec.name);
      cs.get("shape", shape);
      cs.get("color", spec.color);
      spec.shape = shape_from_string(shape);
      c.classes.push_back(spec);
    }
  }
  if (s.has("confusables")) {
    c.confusables.clear();
    for (const auto& e : s.at("confusables")) {
      Section cs(e, s.qualified("confusables[]"));
      ConfusableSpec spec;
      cs.get("classes", spec.classes);
      cs.get("contexts", spec.contexts);
      c.confusables.push_back(spec);
    }
  }
  s.get("similar_pairs", c.similar_pairs);
}

}  // namespace

ojson scene_to_json(const SceneConfig& c) {
  ojson j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["object_size"] = c.object_size;
  j["lattice"] = c.lattice;
  j["noise_sigma"] = c.noise_sigma;
  j["background"] = color(c.background);
  j["min_objects"] = c.min_objects;
  j["max_objects"] = c.max_objects;
  j["context_min_distance"] = c.context_min_distance;
  auto& classes = j["classes"] = ojson::array();
  for (const auto& spec : c.classes) {
    classes.push_back({{"name", spec.name}, {"shape", to_string(spec.shape)}, {"color", color(spec.color)}});
  }
  auto& conf = j["confusables"] = ojson::array();
  for (const auto& p : c.confusables) conf.push_back({{"classes", p.classes}, {"contexts", p.contexts}});
  auto& pairs = j["similar_pairs"] = ojson::array();
  for (const auto& [a, b] : c.similar_pairs) pairs.push_back({a, b});
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& j, const std::string& base_dir) {
  PipelineConfig c;
  c.base_dir = base_dir;
  Section root(j, "");
  std::string variant = to_string(c.variant);
  root.get("variant", variant);
  c.variant = variant_from_string(variant);
  root.get("seed", c.seed);
  if (root.has("data")) {
    Section s(root.at("data"), "data");
    s.get("train", c.data.train);
    s.get("val", c.data.val);
    s.get("train_count", c.data.train_count);
    s.get("val_count", c.data.val_count);
    if (s.has("scene")) {
      Section sc(s.at("scene"), "data.scene");
      read_scene(sc, c.data.scene);
    }
  }
  if (root.has("backbone")) {
    Section s(root.at("backbone"), "backbone");
    auto& b = c.backbone;
    s.get("image_height", b.image_height);
    s.get("image_width", b.image_width);
    s.get("patch_size", b.patch_size);
    s.get("stage_channels", b.stage_channels);
    s.get("blocks_per_stage", b.blocks_per_stage);
    s.get("window_size", b.window_size);
    s.get("heads", b.heads);
    s.get("mlp_ratio", b.mlp_ratio);
    s.get("relative_position_bias", b.relative_position_bias);
  }
  if (root.has("fusion")) {
    Section s(root.at("fusion"), "fusion");
    s.get("heads", c.fusion.heads);
    s.get("residual_norm", c.fusion.residual_norm);
  }
  if (root.has("graph")) {
    Section s(root.at("graph"), "graph");
    s.get("min_area", c.graph.min_area);
    s.get("radius", c.graph.radius);
    s.get("iterations", c.graph.iterations);
    s.get("hidden", c.graph.hidden);
    std::string source = to_string(c.graph_source);
    s.get("source", source);
    c.graph_source = graph_source_from_string(source);
  }
  if (root.has("head")) {
    Section s(root.at("head"), "head");
    s.get("dim", c.head_dim);
  }
  if (root.has("loss")) {
    Section s(root.at("loss"), "loss");
    s.get("lambda", c.loss.lambda);
    s.get("margin", c.loss.margin);
    s.get("class_weights", c.loss.class_weights);
  }
  if (root.has("embedding")) {
    Section s(root.at("embedding"), "embedding");
    auto& e = c.embedding;
    s.get("provider", e.provider);
    s.get("dim", e.dim);
    s.get("seed", e.seed);
    s.get("path", e.path);
    s.get("endpoint", e.endpoint);
    s.get("timeout_seconds", e.timeout_seconds);
    s.get("trainable", e.trainable);
  }
  if (root.has("optimizer")) {
    Section s(root.at("optimizer"), "optimizer");
    s.get("learning_rate", c.optimizer.learning_rate);
    s.get("beta1", c.optimizer.beta1);
    s.get("beta2", c.optimizer.beta2);
    s.get("epsilon", c.optimizer.epsilon);
  }
  if (root.has("training")) {
    Section s(root.at("training"), "training");
    s.get("epochs", c.training.epochs);
    s.get("batch_size", c.training.batch_size);
    if (s.has("augment")) {
      Section a(s.at("augment"), "training.augment");
      a.get("flip", c.training.augment.flip);
      a.get("crop_height", c.training.augment.crop_height);
      a.get("crop_width", c.training.augment.crop_width);
    }
  }
  if (root.has("infer")) {
    Section s(root.at("infer"), "infer");
    s.get("dump_graph", c.infer.dump_graph);
    s.get("dump_attention", c.infer.dump_attention);
  }
  return c;
}

PipelineConfig PipelineConfig::parse(const std::string& text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, std::string("config is not valid JSON: ") + e.what());
  }
  auto c = from_json(j, base_dir);
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  const auto dir = std::filesystem::path(path).parent_path().string();
  try {
    return parse(read_file(path), dir.empty() ? "." : dir);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::io) throw;
    throw Error(e.code(), path + ": " + e.what());
  }
}

ojson PipelineConfig::to_json() const {
  ojson j;
  j["variant"] = to_string(variant);
  j["seed"] = seed;
  j["data"] = {{"train", data.train},
               {"val", data.val},
               {"train_count", data.train_count},
               {"val_count", data.val_count},
               {"scene", scene_to_json(data.scene)}};
  j["backbone"] = {{"image_height", backbone.image_height},
                   {"image_width", backbone.image_width},
                   {"patch_size", backbone.patch_size},
                   {"stage_channels", backbone.stage_channels},
                   {"blocks_per_stage", backbone.blocks_per_stage},
                   {"window_size", backbone.window_size},
                   {"heads", backbone.heads},
                   {"mlp_ratio", backbone.mlp_ratio},
                   {"relative_position_bias", backbone.relative_position_bias}};
  j["fusion"] = {{"heads", fusion.heads}, {"residual_norm", fusion.residual_norm}};
  j["graph"] = {{"min_area", graph.min_area},
                {"radius", graph.radius},
                {"iterations", graph.iterations},
                {"hidden", graph.hidden},
                {"source", to_string(graph_source)}};
  j["head"] = {{"dim", head_dim}};
  j["loss"] = {{"lambda", loss.lambda}, {"margin", loss.margin}, {"class_weights", loss.class_weights}};
  j["embedding"] = {{"provider", embedding.provider}, {"dim", embedding.dim},
                    {"seed", embedding.seed},         {"path", embedding.path},
                    {"endpoint", embedding.endpoint}, {"timeout_seconds", embedding.timeout_seconds},
                    {"trainable", embedding.trainable}};
  j["optimizer"] = {{"learning_rate", optimizer.learning_rate},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"epsilon", optimizer.epsilon}};
  j["training"] = {{"epochs", training.epochs},
                   {"batch_size", training.batch_size},
                   {"augment",
                    {{"flip", training.augment.flip},
                     {"crop_height", training.augment.crop_height},
                     {"crop_width", training.augment.crop_width}}}};
  j["infer"] = {{"dump_graph", infer.dump_graph}, {"dump_attention", infer.dump_attention}};
  return j;
}

void PipelineConfig::validate() const {
  data.scene.validate();
  backbone.validate();
  graph.validate();
  if (variant >= Variant::xattn) fusion.validate(backbone.output_channels());
  loss.validate();
  if (head_dim == 0) fail(ErrorCode::config, "head.dim must be positive");
  if (training.batch_size == 0) fail(ErrorCode::config, "training.batch_size must be positive");
  if (!(optimizer.learning_rate > 0.0)) fail(ErrorCode::config, "optimizer.learning_rate must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    fail(ErrorCode::config, "optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.epsilon > 0.0)) fail(ErrorCode::config, "optimizer.epsilon must be positive");
  if (data.scene.height != backbone.image_height || data.scene.width != backbone.image_width) {
    fail(ErrorCode::config, "scene extents must equal the backbone input extents");
  }
  const auto& a = training.augment;
  if ((a.crop_height && a.crop_height != backbone.image_height) || (a.crop_width && a.crop_width != backbone.image_width)) {
    fail(ErrorCode::config, "training.augment crops must equal the backbone input extents");
  }
  if (embedding.provider != "hashed" && embedding.provider != "file" && embedding.provider != "remote") {
    fail(ErrorCode::config, "embedding.provider must be hashed, file or remote");
  }
  if (embedding.dim == 0) fail(ErrorCode::config, "embedding.dim must be positive");
}

std::string PipelineConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(base_dir) / p).lexically_normal().string();
}

}  // namespace ctxseg
