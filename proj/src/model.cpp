#include "ctxseg/model.hpp"

#include <cmath>

#include "ctxseg/error.hpp"
#include "ctxseg/ops.hpp"

namespace ctxseg {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::llm: return "+llm";
    case Variant::xattn: return "+xattn";
    case Variant::gnn: return "+gnn";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  for (const auto v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  fail(ErrorCode::config, "unknown variant '" + name + "' (baseline, +llm, +xattn, +gnn)");
}

std::string to_string(GraphSource s) { return s == GraphSource::prediction ? "prediction" : "ground_truth"; }

GraphSource graph_source_from_string(const std::string& name) {
  if (name == "prediction") return GraphSource::prediction;
  if (name == "ground_truth") return GraphSource::ground_truth;
  fail(ErrorCode::config, "unknown graph source '" + name + "' (prediction, ground_truth)");
}

void ModelSpec::validate() const {
  backbone.validate();
  graph.validate();
  if (variant >= Variant::xattn) fusion.validate(backbone.output_channels());
  if (head_dim == 0) fail(ErrorCode::config, "model: head_dim must be positive");
  if (label_embeddings.rank() != 2 || label_embeddings.dim(0) == 0 || label_embeddings.dim(0) > 254) {
    fail(ErrorCode::config, "model: label embeddings must be [n x d] with 1 <= n <= 254");
  }
}

template <typename T>
SegmentationModel<T>::SegmentationModel(const ModelSpec& spec, Rng& rng)
    : spec_((spec.validate(), spec)), backbone_(params_, spec_.backbone, rng) {
  const std::size_t c = spec_.backbone.output_channels(), n = spec_.classes();
  if (spec_.variant == Variant::baseline) {
    classifier_ = add_linear(params_, "classifier", c, n + 1, rng);
    return;
  }
  if (spec_.trainable_embeddings) {
    embeddings_ = params_.add("label_embeddings", spec_.label_embeddings.template cast<T>());
  }
  label_proj_ = add_linear(params_, "label_proj", spec_.label_embeddings.dim(1), spec_.head_dim, rng);
  if (spec_.variant >= Variant::xattn) {
    fusion_.emplace(params_, "fusion", c, spec_.label_embeddings.dim(1), spec_.fusion, rng);
  }
  head_.emplace(params_, "head", c, spec_.head_dim, rng);
  if (spec_.variant == Variant::gnn) {
    gnn_.emplace(params_, "gnn", spec_.head_dim, spec_.graph.hidden, rng);
  }
}

template <typename T>
ModelOutput<T> SegmentationModel<T>::forward(ParamBinding<T>& bind, const Tensor<T>& image,
                                             std::span<const std::uint8_t> gt_mask) const {
  auto& tape = bind.tape();
  const auto& bb = spec_.backbone;
  const std::size_t h = bb.image_height, w = bb.image_width;
  if (image.shape() != Shape{h, w, 3}) {
    fail(ErrorCode::shape_mismatch, "model input " + shape_str(image.shape()) + ", expected " + shape_str({h, w, 3}));
  }
  const auto features = backbone_.forward(bind, tape.constant(image));
  const std::size_t fh = features.height, fw = features.width;
  ModelOutput<T> out;
  if (classifier_) {
    typename Tape<T>::Scope scope(tape, "classifier");
    out.logits = upsample_nearest(apply_linear(bind, *classifier_, features.values), fh, fw, h, w);
    return out;
  }

  Var<T> labels;
  {
    typename Tape<T>::Scope scope(tape, "labels");
    labels = embeddings_ ? bind(*embeddings_) : tape.constant(spec_.label_embeddings.template cast<T>());
  }
  Var<T> classes;
  {
    typename Tape<T>::Scope scope(tape, "label_proj");
    classes = apply_linear(bind, *label_proj_, labels);
  }
  FeatureMap<T> feat = features;
  if (fusion_) {
    out.fusion = fusion_->forward(bind, features, labels);
    feat = out.fusion->fused;
  }
  const auto first = head_->forward(bind, feat.values, classes);
  if (!gnn_) {
    out.logits = upsample_nearest(first, fh, fw, h, w);
    out.class_embeddings = classes;
    return out;
  }

  out.first_pass = upsample_nearest(first, fh, fw, h, w);
  std::vector<std::uint8_t> mask;
  if (spec_.graph_source == GraphSource::ground_truth) {
    if (gt_mask.size() != h * w) fail(ErrorCode::shape_mismatch, "ground-truth graph source needs the mask");
    mask.assign(gt_mask.begin(), gt_mask.end());
  } else {
    std::vector<float> confidence;
    decode_logits(out.first_pass->value(), mask, confidence);
  }
  out.graph = build_scene_graph(mask, h, w, spec_.classes(), spec_.graph);
  const auto& graph = *out.graph;
  Var<T> pooled = classes;
  if (!graph.empty()) {
    typename Tape<T>::Scope scope(tape, "gnn");
    std::vector<std::int64_t> node_class;
    for (const auto& node : graph.nodes) node_class.push_back(static_cast<std::int64_t>(node.class_id));
    const auto nodes = ops::gather_rows(classes, std::span<const std::int64_t>(node_class));
    const auto refined = gnn_->forward(bind, graph, nodes, spec_.graph.iterations);
    pooled = pool_class_embeddings(graph, refined, classes);
  }
  out.class_embeddings = pooled;
  out.logits = upsample_nearest(head_->forward(bind, feat.values, pooled), fh, fw, h, w);
  return out;
}

template <typename T>
void decode_logits(const Tensor<T>& logits, std::vector<std::uint8_t>& labels, std::vector<float>& confidence) {
  const std::size_t p = logits.dim(0), k = logits.dim(1);
  labels.assign(p, 0);
  confidence.assign(p, 0.0f);
  for (std::size_t i = 0; i < p; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (logits.at(i, c) > logits.at(i, best)) best = c;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(logits.at(i, c) - logits.at(i, best)));
    labels[i] = static_cast<std::uint8_t>(best);
    confidence[i] = static_cast<float>(1.0 / z);
  }
}

template <typename T>
Tensor<T> image_tensor(std::size_t height, std::size_t width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != height * width * 3) fail(ErrorCode::shape_mismatch, "image buffer does not match extents");
  Tensor<T> t(Shape{height, width, 3});
  for (std::size_t i = 0; i < rgb.size(); ++i) t[i] = static_cast<T>(rgb[i]) / T(255);
  return t;
}

#define CTXSEG_INSTANTIATE_MODEL(T)                                                                    \
  template class SegmentationModel<T>;                                                                 \
  template void decode_logits(const Tensor<T>&, std::vector<std::uint8_t>&, std::vector<float>&);      \
  template Tensor<T> image_tensor(std::size_t, std::size_t, std::span<const std::uint8_t>);

CTXSEG_INSTANTIATE_MODEL(float)
CTXSEG_INSTANTIATE_MODEL(double)

}  // namespace ctxseg
