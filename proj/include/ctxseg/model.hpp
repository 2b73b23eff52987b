#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxseg/backbone.hpp"
#include "ctxseg/fusion.hpp"
#include "ctxseg/graph.hpp"

namespace ctxseg {

/// The four incremental configurations: backbone + per-pixel classifier;
/// head scored against projected label embeddings; + cross-attention fusion;
/// + relational refinement of the class embeddings.
enum class Variant { baseline, llm, xattn, gnn };

inline constexpr Variant kAllVariants[] = {Variant::baseline, Variant::llm, Variant::xattn, Variant::gnn};

/// "baseline", "+llm", "+xattn", "+gnn".
std::string to_string(Variant v);
/// Throws ErrorCode::config.
Variant variant_from_string(const std::string& name);

/// Where the relational pass takes its scene graph from.
enum class GraphSource { prediction, ground_truth };

std::string to_string(GraphSource s);
GraphSource graph_source_from_string(const std::string& name);

struct ModelSpec {
  Variant variant = Variant::gnn;
  BackboneConfig backbone;
  FusionConfig fusion;
  GraphConfig graph;
  GraphSource graph_source = GraphSource::prediction;
  std::size_t head_dim = 32;
  /// Label embeddings [n x d_e]; n foreground classes.
  Tensor<double> label_embeddings;
  bool trainable_embeddings = false;

  std::size_t classes() const { return label_embeddings.dim(0); }
  void validate() const;
};

template <typename T>
struct ModelOutput {
  Var<T> logits;                    // [H*W x (n+1)] full resolution
  std::optional<Var<T>> first_pass;  // +gnn: logits before relational refinement
  std::optional<Var<T>> class_embeddings;  // [n x head_dim]; absent for baseline
  std::optional<FusionOutput<T>> fusion;
  std::optional<SceneGraph> graph;
};

template <typename T>
class SegmentationModel {
 public:
  SegmentationModel(const ModelSpec& spec, Rng& rng);

  /// image: [H x W x 3] in [0, 1]. gt_mask is only consulted when the graph
  /// source is ground_truth.
  ModelOutput<T> forward(ParamBinding<T>& bind, const Tensor<T>& image,
                         std::span<const std::uint8_t> gt_mask = {}) const;

  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  const ModelSpec& spec() const { return spec_; }
  const std::optional<CrossAttention<T>>& fusion() const { return fusion_; }

 private:
  ModelSpec spec_;
  ParameterSet<T> params_;
  Backbone<T> backbone_;
  std::optional<LinearLayer> classifier_;
  std::optional<std::size_t> embeddings_;
  std::optional<LinearLayer> label_proj_;
  std::optional<CrossAttention<T>> fusion_;
  std::optional<SegmentationHead<T>> head_;
  std::optional<MessagePassing<T>> gnn_;
};

/// Per-pixel argmax and max softmax probability of [P x K] logits.
template <typename T>
void decode_logits(const Tensor<T>& logits, std::vector<std::uint8_t>& labels, std::vector<float>& confidence);

/// Converts an 8-bit RGB buffer to [H x W x 3] in [0, 1].
template <typename T>
Tensor<T> image_tensor(std::size_t height, std::size_t width, std::span<const std::uint8_t> rgb);

}  // namespace ctxseg
