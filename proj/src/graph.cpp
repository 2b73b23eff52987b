#include "ctxseg/graph.hpp"

#include <algorithm>
#include <cmath>

#include "ctxseg/ops.hpp"

namespace ctxseg {

void GraphConfig::validate() const {
  if (min_area == 0) fail(ErrorCode::config, "graph: min_area must be positive");
  if (!(radius >= 0.0) || !std::isfinite(radius)) fail(ErrorCode::config, "graph: radius must be non-negative");
  if (hidden == 0) fail(ErrorCode::config, "graph: hidden width must be positive");
}

std::vector<Component> connected_components(std::span<const std::uint8_t> mask, std::size_t height,
                                            std::size_t width) {
  if (mask.size() != height * width) fail(ErrorCode::shape_mismatch, "connected_components: mask size mismatch");
  std::vector<Component> out;
  std::vector<bool> seen(mask.size(), false);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (mask[start] == 0 || seen[start]) continue;
    Component comp;
    comp.value = mask[start];
    stack.assign(1, start);
    seen[start] = true;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      comp.pixels.push_back(p);
      const std::size_t y = p / width, x = p % width;
      auto visit = [&](std::size_t q) {
        if (!seen[q] && mask[q] == comp.value) {
          seen[q] = true;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < width) visit(p + 1);
      if (y > 0) visit(p - width);
      if (y + 1 < height) visit(p + width);
    }
    std::sort(comp.pixels.begin(), comp.pixels.end());
    out.push_back(std::move(comp));
  }
  return out;
}

SceneGraph build_scene_graph(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                             std::size_t vocab_size, const GraphConfig& config) {
  config.validate();
  for (const auto v : mask) {
    if (v > vocab_size) fail(ErrorCode::unknown_label, "mask value " + std::to_string(v) + " outside vocabulary");
  }
  SceneGraph g;
  g.height = height;
  g.width = width;
  for (auto& comp : connected_components(mask, height, width)) {
    if (comp.pixels.size() < config.min_area) continue;
    SceneNode node;
    node.class_id = comp.value - 1u;
    double sx = 0.0, sy = 0.0;
    node.box = {width, height, 0, 0};
    for (const std::size_t p : comp.pixels) {
      const std::size_t y = p / width, x = p % width;
      sx += static_cast<double>(x) + 0.5;
      sy += static_cast<double>(y) + 0.5;
      node.box.x0 = std::min(node.box.x0, x);
      node.box.y0 = std::min(node.box.y0, y);
      node.box.x1 = std::max(node.box.x1, x);
      node.box.y1 = std::max(node.box.y1, y);
    }
    const double count = static_cast<double>(comp.pixels.size());
    node.cx = sx / count / static_cast<double>(width);
    node.cy = sy / count / static_cast<double>(height);
    node.area = count / static_cast<double>(height * width);
    node.pixels = std::move(comp.pixels);
    g.nodes.push_back(std::move(node));
  }
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    for (std::size_t j = 0; j < g.nodes.size(); ++j) {
      if (i == j) continue;
      const auto f = edge_features(g.nodes[i], g.nodes[j]);
      if (f[2] <= config.radius) {
        g.edges.emplace_back(i, j);
        g.features.push_back(f);
      }
    }
  }
  return g;
}

EdgeFeature edge_features(const SceneNode& i, const SceneNode& j) {
  const double dx = j.cx - i.cx, dy = j.cy - i.cy;
  const bool adjacent = i.box.x0 <= j.box.x1 + 1 && j.box.x0 <= i.box.x1 + 1 && i.box.y0 <= j.box.y1 + 1 &&
                        j.box.y0 <= i.box.y1 + 1;
  return {dx, dy, std::sqrt(dx * dx + dy * dy), std::log(j.area / i.area), adjacent ? 1.0 : 0.0};
}

template <typename T>
MessagePassing<T>::MessagePassing(ParameterSet<T>& params, const std::string& name, std::size_t dim,
                                  std::size_t hidden, Rng& rng)
    : dim_(dim),
      fc1_(add_linear(params, name + ".mlp1", dim + kEdgeFeatureDim, hidden, rng)),
      fc2_(add_linear(params, name + ".mlp2", hidden, dim, rng)),
      norm_(add_norm(params, name + ".norm", dim)) {}

template <typename T>
Var<T> MessagePassing<T>::forward(ParamBinding<T>& bind, const SceneGraph& graph, const Var<T>& nodes,
                                  std::size_t iterations) const {
  const std::size_t n = graph.nodes.size();
  if (nodes.shape() != Shape{n, dim_}) {
    fail(ErrorCode::shape_mismatch, "message passing: node embeddings " + shape_str(nodes.shape()) + " for " +
                                        std::to_string(n) + " nodes of width " + std::to_string(dim_));
  }
  if (iterations == 0 || graph.edges.empty()) return nodes;
  auto& tape = bind.tape();
  typename Tape<T>::Scope scope(tape, "gnn");

  const std::size_t e = graph.edges.size();
  std::vector<std::int64_t> sources(e);
  std::vector<std::size_t> indegree(n, 0);
  Tensor<T> feats(Shape{e, kEdgeFeatureDim});
  for (std::size_t k = 0; k < e; ++k) {
    sources[k] = static_cast<std::int64_t>(graph.edges[k].second);
    ++indegree[graph.edges[k].first];
    for (std::size_t f = 0; f < kEdgeFeatureDim; ++f) feats.at(k, f) = static_cast<T>(graph.features[k][f]);
  }
  Tensor<T> average(Shape{n, e});
  for (std::size_t k = 0; k < e; ++k) {
    const std::size_t i = graph.edges[k].first;
    average.at(i, k) = static_cast<T>(1.0 / static_cast<double>(indegree[i]));
  }
  // Row i of [x; updated] is x_i for isolated nodes and updated_i otherwise.
  std::vector<std::int64_t> pick(n);
  for (std::size_t i = 0; i < n; ++i) pick[i] = static_cast<std::int64_t>(indegree[i] > 0 ? n + i : i);
  const auto edge_feats = tape.constant(std::move(feats));
  const auto avg = tape.constant(std::move(average));

  Var<T> x = nodes;
  for (std::size_t it = 0; it < iterations; ++it) {
    const auto input = ops::concat<T>({ops::gather_rows(x, std::span<const std::int64_t>(sources)), edge_feats}, 1);
    const auto msg = apply_linear(bind, fc2_, ops::relu(apply_linear(bind, fc1_, input)));
    const auto updated = apply_norm(bind, norm_, ops::add(x, ops::matmul(avg, msg)));
    x = ops::gather_rows(ops::concat<T>({x, updated}, 0), std::span<const std::int64_t>(pick));
  }
  return x;
}

template <typename T>
Var<T> pool_class_embeddings(const SceneGraph& graph, const Var<T>& refined, const Var<T>& per_class) {
  if (graph.empty()) return per_class;
  const std::size_t n = per_class.shape()[0], nodes = graph.nodes.size();
  if (refined.shape()[0] != nodes || refined.shape()[1] != per_class.shape()[1]) {
    fail(ErrorCode::shape_mismatch, "pool_class_embeddings: refined " + shape_str(refined.shape()));
  }
  std::vector<std::size_t> count(n, 0);
  for (const auto& node : graph.nodes) {
    if (node.class_id >= n) fail(ErrorCode::unknown_label, "graph node class outside vocabulary");
    ++count[node.class_id];
  }
  Tensor<T> mix(Shape{n, n + nodes});
  for (std::size_t c = 0; c < n; ++c) {
    if (count[c] == 0) mix.at(c, c) = T(1);
  }
  for (std::size_t k = 0; k < nodes; ++k) {
    const std::size_t c = graph.nodes[k].class_id;
    mix.at(c, n + k) = static_cast<T>(1.0 / static_cast<double>(count[c]));
  }
  auto& tape = refined.tape();
  return ops::matmul(tape.constant(std::move(mix)), ops::concat<T>({per_class, refined}, 0));
}

template <typename T>
SegmentationHead<T>::SegmentationHead(ParameterSet<T>& params, const std::string& name, std::size_t channels,
                                      std::size_t dim, Rng& rng)
    : proj_(add_linear(params, name + ".proj", channels, dim, rng)) {
  Tensor<T> bg(Shape{1, dim});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& v : bg.data()) v = static_cast<T>(scale * rng.normal());
  background_ = params.add(name + ".background", std::move(bg));
}

template <typename T>
Var<T> SegmentationHead<T>::forward(ParamBinding<T>& bind, const Var<T>& features, const Var<T>& classes) const {
  if (classes.shape().size() != 2 || classes.shape()[1] != proj_.out) {
    fail(ErrorCode::shape_mismatch, "segmentation head: class embeddings " + shape_str(classes.shape()));
  }
  typename Tape<T>::Scope scope(bind.tape(), "head");
  const auto table = ops::concat<T>({bind(background_), classes}, 0);
  return ops::matmul_nt(apply_linear(bind, proj_, features), table);
}

#define CTXSEG_INSTANTIATE_GRAPH(T)                                                         \
  template class MessagePassing<T>;                                                         \
  template class SegmentationHead<T>;                                                       \
  template Var<T> pool_class_embeddings(const SceneGraph&, const Var<T>&, const Var<T>&);

CTXSEG_INSTANTIATE_GRAPH(float)
CTXSEG_INSTANTIATE_GRAPH(double)

}  // namespace ctxseg
