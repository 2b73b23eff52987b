#pragma once

#include <string>

#include "ctxseg/backbone.hpp"
#include "ctxseg/layers.hpp"

namespace ctxseg {

struct FusionConfig {
  std::size_t heads = 4;
  /// Residual connection to F_v followed by layer norm; off for oracle tests.
  bool residual_norm = true;

  void validate(std::size_t width) const;
};

template <typename T>
struct FusionOutput {
  FeatureMap<T> fused;
  Var<T> attended;  // [H*W x C], output projection before residual/norm
  Var<T> weights;   // [H*W x heads x n], softmax over labels
};

/// softmax-ready logits QK^T / sqrt(d_k); q: [b x m x d_k], k: [b x n x d_k].
template <typename T>
Var<T> scaled_dot_product_logits(const Var<T>& q, const Var<T>& k);

/// Multi-head cross-attention with queries from visual cells and keys/values
/// from label embeddings (separate projections).
template <typename T>
class CrossAttention {
 public:
  CrossAttention(ParameterSet<T>& params, const std::string& name, std::size_t visual_channels,
                 std::size_t embed_dim, const FusionConfig& config, Rng& rng);

  /// labels: [n x embed_dim].
  FusionOutput<T> forward(ParamBinding<T>& bind, const FeatureMap<T>& visual, const Var<T>& labels) const;

  const FusionConfig& config() const { return config_; }
  const LinearLayer& query() const { return q_; }
  const LinearLayer& key() const { return k_; }
  const LinearLayer& value() const { return v_; }
  const LinearLayer& output() const { return o_; }
  const NormLayer& norm() const { return norm_; }

 private:
  FusionConfig config_;
  std::size_t width_;
  LinearLayer q_, k_, v_, o_;
  NormLayer norm_;
};

/// Attention weights reshaped to [H x W x heads x n] (same path as forward).
template <typename T>
Tensor<T> attention_weights(const CrossAttention<T>& layer, ParamBinding<T>& bind,
                            const FeatureMap<T>& visual, const Var<T>& labels);

}  // namespace ctxseg
