#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/layers.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg {

/// Spatial grid of feature vectors. `values` is [height*width x channels],
/// row index y*width + x.
template <typename T>
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  Var<T> values;
};

struct BackboneConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t patch_size = 4;
  std::vector<std::size_t> stage_channels{32, 64};
  std::vector<std::size_t> blocks_per_stage{2, 2};
  std::size_t window_size = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  bool relative_position_bias = true;

  /// Throws ErrorCode::config describing the first violated constraint.
  void validate() const;
  std::size_t output_height() const;
  std::size_t output_width() const;
  std::size_t output_channels() const { return stage_channels.back(); }
};

/// Row indices that lay a height x width grid out window by window. Windows
/// start at -offset, so offset > 0 shifts the partition; out-of-grid slots are
/// -1 (zero padding). `reverse[p]` is the window-layout row holding position p.
struct WindowLayout {
  std::size_t windows = 0;
  std::size_t window = 0;
  std::vector<std::int64_t> forward;
  std::vector<std::int64_t> reverse;
};

WindowLayout make_window_layout(std::size_t height, std::size_t width, std::size_t window,
                                std::size_t offset);

template <typename T>
class PatchEmbed {
 public:
  PatchEmbed(ParameterSet<T>& params, const std::string& name, std::size_t patch,
             std::size_t channels, Rng& rng);

  /// image: [H x W x 3] with values in [0, 1].
  FeatureMap<T> forward(ParamBinding<T>& bind, const Var<T>& image) const;
  const LinearLayer& projection() const { return proj_; }

 private:
  std::size_t patch_;
  LinearLayer proj_;
};

template <typename T>
class WindowAttentionBlock {
 public:
  WindowAttentionBlock(ParameterSet<T>& params, const std::string& name, std::size_t channels,
                       std::size_t heads, std::size_t window, std::size_t offset,
                       std::size_t mlp_hidden, bool relative_bias, Rng& rng);

  FeatureMap<T> forward(ParamBinding<T>& bind, const FeatureMap<T>& input) const;

  std::size_t offset() const { return offset_; }
  const LinearLayer& qkv() const { return qkv_; }
  const LinearLayer& out_proj() const { return out_; }
  const LinearLayer& mlp_in() const { return fc1_; }
  const LinearLayer& mlp_out() const { return fc2_; }
  const NormLayer& attn_norm() const { return norm1_; }
  const NormLayer& mlp_norm() const { return norm2_; }

 private:
  std::size_t channels_;
  std::size_t heads_;
  std::size_t window_;
  std::size_t offset_;
  bool relative_bias_;
  NormLayer norm1_;
  LinearLayer qkv_;
  LinearLayer out_;
  std::size_t bias_table_ = 0;  // [(2w-1)^2 x heads]
  NormLayer norm2_;
  LinearLayer fc1_;
  LinearLayer fc2_;
};

template <typename T>
class PatchMerge {
 public:
  PatchMerge(ParameterSet<T>& params, const std::string& name, std::size_t channels, Rng& rng);

  /// [H x W x C] -> [H/2 x W/2 x 2C]; neighbourhood order (0,0),(1,0),(0,1),(1,1) as (dy,dx).
  FeatureMap<T> forward(ParamBinding<T>& bind, const FeatureMap<T>& input) const;
  const LinearLayer& projection() const { return proj_; }

 private:
  LinearLayer proj_;
};

template <typename T>
class Backbone {
 public:
  Backbone(ParameterSet<T>& params, const BackboneConfig& config, Rng& rng);

  FeatureMap<T> forward(ParamBinding<T>& bind, const Var<T>& image) const;
  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  PatchEmbed<T> embed_;
  std::vector<std::vector<WindowAttentionBlock<T>>> stages_;
  std::vector<PatchMerge<T>> merges_;
};

/// Nearest-neighbour upsampling of rows laid out as a height x width grid to
/// out_height x out_width; extents must be integer multiples.
template <typename T>
Var<T> upsample_nearest(const Var<T>& grid_rows, std::size_t height, std::size_t width,
                        std::size_t out_height, std::size_t out_width);

}  // namespace ctxseg
