#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxseg/layers.hpp"

namespace ctxseg {

/// A 4-connected region of equal non-zero mask value.
struct Component {
  std::uint8_t value = 0;
  std::vector<std::size_t> pixels;  // raster indices, ascending
};

/// Components in raster order of their first pixel; background (0) is skipped.
std::vector<Component> connected_components(std::span<const std::uint8_t> mask, std::size_t height,
                                            std::size_t width);

struct BoundingBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive
};

struct SceneNode {
  std::size_t class_id = 0;  // vocabulary index (mask value - 1)
  double cx = 0.0;           // centroid, normalised to [0, 1]
  double cy = 0.0;
  double area = 0.0;         // fraction of the image
  BoundingBox box;
  std::vector<std::size_t> pixels;
};

inline constexpr std::size_t kEdgeFeatureDim = 5;
using EdgeFeature = std::array<double, kEdgeFeatureDim>;

/// Edge (i, j) carries a message from node j to node i.
struct SceneGraph {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<SceneNode> nodes;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<EdgeFeature> features;  // parallel to edges

  bool empty() const noexcept { return nodes.empty(); }
};

struct GraphConfig {
  std::size_t min_area = 4;
  double radius = 0.5;
  std::size_t iterations = 2;
  std::size_t hidden = 64;

  void validate() const;
};

/// One node per component of area >= min_area; edges join every node pair
/// whose centroid distance is <= radius, in both directions. Mask values
/// must be 0 or 1..vocab_size (unknown_label otherwise).
SceneGraph build_scene_graph(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                             std::size_t vocab_size, const GraphConfig& config);

/// [dx, dy, distance, log(area_j / area_i), bbox adjacency] for the edge
/// i <- j; boxes are adjacent when they intersect after 1-pixel dilation.
EdgeFeature edge_features(const SceneNode& i, const SceneNode& j);

/// Shared-weight message passing: each round, every node with in-edges
/// becomes LayerNorm(e_i + mean_j MLP([e_j, edge_ij])); others pass through.
template <typename T>
class MessagePassing {
 public:
  MessagePassing(ParameterSet<T>& params, const std::string& name, std::size_t dim, std::size_t hidden,
                 Rng& rng);

  /// nodes: [N x dim], one row per graph node.
  Var<T> forward(ParamBinding<T>& bind, const SceneGraph& graph, const Var<T>& nodes,
                 std::size_t iterations) const;

  const LinearLayer& mlp_in() const { return fc1_; }
  const LinearLayer& mlp_out() const { return fc2_; }
  const NormLayer& norm() const { return norm_; }

 private:
  std::size_t dim_;
  LinearLayer fc1_, fc2_;
  NormLayer norm_;
};

/// Rows of `per_class` [n x d] replaced by the mean of `refined` [N x d] over
/// the graph's nodes of that class; classes without nodes keep their row.
template <typename T>
Var<T> pool_class_embeddings(const SceneGraph& graph, const Var<T>& refined, const Var<T>& per_class);

/// logit[p, 0] = <proj(F[p]), w_bg>, logit[p, c+1] = <proj(F[p]), e_c>.
template <typename T>
class SegmentationHead {
 public:
  SegmentationHead(ParameterSet<T>& params, const std::string& name, std::size_t channels, std::size_t dim,
                   Rng& rng);

  /// features: [P x channels], classes: [n x dim] -> logits [P x (n + 1)].
  Var<T> forward(ParamBinding<T>& bind, const Var<T>& features, const Var<T>& classes) const;

  const LinearLayer& projection() const { return proj_; }
  std::size_t background() const { return background_; }

 private:
  LinearLayer proj_;
  std::size_t background_ = 0;
};

}  // namespace ctxseg
