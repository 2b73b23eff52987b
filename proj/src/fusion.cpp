#include "ctxseg/fusion.hpp"

#include <cmath>

#include "ctxseg/ops.hpp"

namespace ctxseg {

void FusionConfig::validate(std::size_t width) const {
  if (heads == 0 || width % heads != 0) {
    fail(ErrorCode::config, "fusion: width " + std::to_string(width) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

template <typename T>
Var<T> scaled_dot_product_logits(const Var<T>& q, const Var<T>& k) {
  const double dk = static_cast<double>(q.shape().back());
  return ops::scale(ops::bmm_nt(q, k), 1.0 / std::sqrt(dk));
}

template <typename T>
CrossAttention<T>::CrossAttention(ParameterSet<T>& params, const std::string& name, std::size_t visual_channels,
                                  std::size_t embed_dim, const FusionConfig& config, Rng& rng)
    : config_(config), width_(visual_channels) {
  config_.validate(visual_channels);
  q_ = add_linear(params, name + ".query", visual_channels, visual_channels, rng);
  k_ = add_linear(params, name + ".key", embed_dim, visual_channels, rng);
  v_ = add_linear(params, name + ".value", embed_dim, visual_channels, rng);
  o_ = add_linear(params, name + ".out", visual_channels, visual_channels, rng);
  norm_ = add_norm(params, name + ".norm", visual_channels);
}

template <typename T>
FusionOutput<T> CrossAttention<T>::forward(ParamBinding<T>& bind, const FeatureMap<T>& visual,
                                           const Var<T>& labels) const {
  if (visual.channels != width_) fail(ErrorCode::shape_mismatch, "fusion: visual channel mismatch");
  if (labels.shape().size() != 2 || labels.shape()[1] != k_.in) {
    fail(ErrorCode::shape_mismatch, "fusion: label embeddings " + shape_str(labels.shape()) +
                                        " do not match embedding width " + std::to_string(k_.in));
  }
  typename Tape<T>::Scope scope(bind.tape(), "fusion");
  const std::size_t cells = visual.height * visual.width;
  const std::size_t n = labels.shape()[0];
  const std::size_t h = config_.heads, dk = width_ / h;

  auto heads_first = [&](const Var<T>& x, std::size_t rows) {
    return ops::permute(ops::reshape(x, Shape{rows, h, dk}), {1, 0, 2});
  };
  const auto q = heads_first(apply_linear(bind, q_, visual.values), cells);
  const auto k = heads_first(apply_linear(bind, k_, labels), n);
  const auto v = heads_first(apply_linear(bind, v_, labels), n);

  const auto attn = ops::softmax(scaled_dot_product_logits(q, k), 2);  // [h x cells x n]
  const auto mixed = ops::reshape(ops::permute(ops::bmm(attn, v), {1, 0, 2}), Shape{cells, width_});
  const auto attended = apply_linear(bind, o_, mixed);
  const auto fused = config_.residual_norm ? apply_norm(bind, norm_, ops::add(visual.values, attended)) : attended;
  return FusionOutput<T>{FeatureMap<T>{visual.height, visual.width, width_, fused}, attended,
                         ops::permute(attn, {1, 0, 2})};
}

template <typename T>
Tensor<T> attention_weights(const CrossAttention<T>& layer, ParamBinding<T>& bind, const FeatureMap<T>& visual,
                            const Var<T>& labels) {
  const auto out = layer.forward(bind, visual, labels);
  const Shape& s = out.weights.shape();
  return out.weights.value().reshaped(Shape{visual.height, visual.width, s[1], s[2]});
}

#define CTXSEG_INSTANTIATE_FUSION(T)                                                                   \
  template Var<T> scaled_dot_product_logits(const Var<T>&, const Var<T>&);                           \
  template class CrossAttention<T>;                                                                  \
  template Tensor<T> attention_weights(const CrossAttention<T>&, ParamBinding<T>&, const FeatureMap<T>&, \
                                       const Var<T>&);

CTXSEG_INSTANTIATE_FUSION(float)
CTXSEG_INSTANTIATE_FUSION(double)

}  // namespace ctxseg
