#include "ctxseg/backbone.hpp"

#include <cmath>

#include "ctxseg/ops.hpp"

namespace ctxseg {
namespace {

constexpr double kMaskedLogit = -1e9;

std::string config_error_prefix() { return "backbone config: "; }

}  // namespace

void BackboneConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::config, config_error_prefix() + what); };
  if (patch_size == 0 || window_size == 0 || heads == 0 || mlp_ratio == 0) bad("zero-valued size");
  if (stage_channels.empty() || stage_channels.size() != blocks_per_stage.size()) {
    bad("stage_channels and blocks_per_stage must be non-empty and equal length");
  }
  if (image_height % patch_size != 0 || image_width % patch_size != 0) {
    bad("image extents not divisible by patch size");
  }
  std::size_t h = image_height / patch_size;
  std::size_t w = image_width / patch_size;
  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    if (s > 0) {
      if (h % 2 != 0 || w % 2 != 0) bad("odd grid before patch merge at stage " + std::to_string(s));
      h /= 2;
      w /= 2;
      if (stage_channels[s] != 2 * stage_channels[s - 1]) bad("stage channels must double per stage");
    }
    if (h % window_size != 0 || w % window_size != 0) {
      bad("grid " + std::to_string(h) + "x" + std::to_string(w) + " at stage " + std::to_string(s) +
          " not divisible by window " + std::to_string(window_size));
    }
    if (stage_channels[s] % heads != 0) bad("channels not divisible by heads");
  }
}

std::size_t BackboneConfig::output_height() const {
  return image_height / patch_size >> (stage_channels.size() - 1);
}

std::size_t BackboneConfig::output_width() const {
  return image_width / patch_size >> (stage_channels.size() - 1);
}

WindowLayout make_window_layout(std::size_t height, std::size_t width, std::size_t window,
                                std::size_t offset) {
  WindowLayout layout;
  layout.window = window;
  const std::size_t wy = (height + offset + window - 1) / window;
  const std::size_t wx = (width + offset + window - 1) / window;
  layout.windows = wy * wx;
  layout.forward.reserve(layout.windows * window * window);
  layout.reverse.assign(height * width, -1);
  const auto off = static_cast<std::int64_t>(offset);
  for (std::size_t by = 0; by < wy; ++by) {
    for (std::size_t bx = 0; bx < wx; ++bx) {
      for (std::size_t iy = 0; iy < window; ++iy) {
        for (std::size_t ix = 0; ix < window; ++ix) {
          const auto y = static_cast<std::int64_t>(by * window + iy) - off;
          const auto x = static_cast<std::int64_t>(bx * window + ix) - off;
          const bool inside = y >= 0 && x >= 0 && y < static_cast<std::int64_t>(height) &&
                              x < static_cast<std::int64_t>(width);
          const std::int64_t pos = inside ? y * static_cast<std::int64_t>(width) + x : -1;
          if (pos >= 0) layout.reverse[static_cast<std::size_t>(pos)] = static_cast<std::int64_t>(layout.forward.size());
          layout.forward.push_back(pos);
        }
      }
    }
  }
  return layout;
}

template <typename T>
PatchEmbed<T>::PatchEmbed(ParameterSet<T>& params, const std::string& name, std::size_t patch,
                          std::size_t channels, Rng& rng)
    : patch_(patch), proj_(add_linear(params, name + ".proj", 3 * patch * patch, channels, rng)) {}

template <typename T>
FeatureMap<T> PatchEmbed<T>::forward(ParamBinding<T>& bind, const Var<T>& image) const {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != 3) fail(ErrorCode::shape_mismatch, "patch_embed: image must be [H x W x 3]");
  const std::size_t height = s[0], width = s[1];
  if (height % patch_ != 0 || width % patch_ != 0) {
    fail(ErrorCode::shape_mismatch, "patch_embed: image " + shape_str(s) + " not divisible by patch " +
                                        std::to_string(patch_));
  }
  typename Tape<T>::Scope scope(bind.tape(), "patch_embed");
  const std::size_t gh = height / patch_, gw = width / patch_;
  std::vector<std::int64_t> index;
  index.reserve(height * width);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t iy = 0; iy < patch_; ++iy) {
        for (std::size_t ix = 0; ix < patch_; ++ix) {
          index.push_back(static_cast<std::int64_t>((py * patch_ + iy) * width + px * patch_ + ix));
        }
      }
    }
  }
  const auto pixels = ops::reshape(image, Shape{height * width, 3});
  const auto patches = ops::reshape(ops::gather_rows(pixels, std::span<const std::int64_t>(index)),
                                    Shape{gh * gw, 3 * patch_ * patch_});
  return FeatureMap<T>{gh, gw, proj_.out, apply_linear(bind, proj_, patches)};
}

template <typename T>
WindowAttentionBlock<T>::WindowAttentionBlock(ParameterSet<T>& params, const std::string& name,
                                              std::size_t channels, std::size_t heads,
                                              std::size_t window, std::size_t offset,
                                              std::size_t mlp_hidden, bool relative_bias, Rng& rng)
    : channels_(channels), heads_(heads), window_(window), offset_(offset), relative_bias_(relative_bias) {
  if (channels % heads != 0) fail(ErrorCode::config, "window attention: channels not divisible by heads");
  norm1_ = add_norm(params, name + ".norm1", channels);
  qkv_ = add_linear(params, name + ".qkv", channels, 3 * channels, rng);
  out_ = add_linear(params, name + ".proj", channels, channels, rng);
  if (relative_bias_) {
    const std::size_t span = 2 * window - 1;
    Tensor<T> table(Shape{span * span, heads});
    for (auto& v : table.data()) v = static_cast<T>(0.02 * rng.normal());
    bias_table_ = params.add(name + ".relative_bias", std::move(table));
  }
  norm2_ = add_norm(params, name + ".norm2", channels);
  fc1_ = add_linear(params, name + ".fc1", channels, mlp_hidden, rng);
  fc2_ = add_linear(params, name + ".fc2", mlp_hidden, channels, rng);
}

template <typename T>
FeatureMap<T> WindowAttentionBlock<T>::forward(ParamBinding<T>& bind, const FeatureMap<T>& input) const {
  if (input.channels != channels_) fail(ErrorCode::shape_mismatch, "window attention: channel mismatch");
  if (input.height % window_ != 0 || input.width % window_ != 0) {
    fail(ErrorCode::shape_mismatch, "window attention: grid " + std::to_string(input.height) + "x" +
                                        std::to_string(input.width) + " not divisible by window " +
                                        std::to_string(window_));
  }
  auto& tape = bind.tape();
  typename Tape<T>::Scope scope(tape, "window_attention");
  const std::size_t w2 = window_ * window_;
  const std::size_t dk = channels_ / heads_;
  const std::size_t offset = (input.height > window_ || input.width > window_) ? offset_ : 0;
  const WindowLayout layout = make_window_layout(input.height, input.width, window_, offset);
  const std::size_t nw = layout.windows;
  const std::size_t batch = nw * heads_;

  const auto& x = input.values;
  const auto normed = apply_norm(bind, norm1_, x);
  const auto windowed = ops::gather_rows(normed, std::span<const std::int64_t>(layout.forward));
  const auto qkv = apply_linear(bind, qkv_, windowed);
  const auto split = ops::reshape(
      ops::permute(ops::reshape(qkv, Shape{nw, w2, 3, heads_, dk}), {2, 0, 3, 1, 4}),
      Shape{3 * batch, w2, dk});
  const auto q = ops::slice_rows(split, 0, batch);
  const auto k = ops::slice_rows(split, batch, batch);
  const auto v = ops::slice_rows(split, 2 * batch, batch);

  auto scores = ops::reshape(ops::scale(ops::bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dk))),
                             Shape{nw, heads_, w2, w2});
  if (relative_bias_) {
    const std::size_t span = 2 * window_ - 1;
    std::vector<std::int64_t> rel;
    rel.reserve(w2 * w2);
    for (std::size_t i = 0; i < w2; ++i) {
      for (std::size_t j = 0; j < w2; ++j) {
        const auto dy = static_cast<std::int64_t>(i / window_) - static_cast<std::int64_t>(j / window_) +
                        static_cast<std::int64_t>(window_) - 1;
        const auto dx = static_cast<std::int64_t>(i % window_) - static_cast<std::int64_t>(j % window_) +
                        static_cast<std::int64_t>(window_) - 1;
        rel.push_back(dy * static_cast<std::int64_t>(span) + dx);
      }
    }
    const auto bias = ops::reshape(
        ops::transpose(ops::gather_rows(bind(bias_table_), std::span<const std::int64_t>(rel))),
        Shape{heads_, w2, w2});
    scores = ops::add_broadcast(scores, bias);
  }
  bool padded = false;
  for (const auto p : layout.forward) padded = padded || p < 0;
  if (padded) {
    Tensor<T> mask(Shape{nw, heads_, w2, w2});
    for (std::size_t b = 0; b < nw; ++b) {
      for (std::size_t j = 0; j < w2; ++j) {
        if (layout.forward[b * w2 + j] >= 0) continue;
        for (std::size_t h = 0; h < heads_; ++h) {
          for (std::size_t i = 0; i < w2; ++i) mask[((b * heads_ + h) * w2 + i) * w2 + j] = static_cast<T>(kMaskedLogit);
        }
      }
    }
    scores = ops::add(scores, tape.constant(std::move(mask)));
  }
  const auto attn = ops::reshape(ops::softmax(scores, 3), Shape{batch, w2, w2});
  const auto mixed = ops::reshape(
      ops::permute(ops::reshape(ops::bmm(attn, v), Shape{nw, heads_, w2, dk}), {0, 2, 1, 3}),
      Shape{nw * w2, channels_});
  const auto projected = apply_linear(bind, out_, mixed);
  const auto restored = ops::gather_rows(projected, std::span<const std::int64_t>(layout.reverse));
  const auto y = ops::add(x, restored);

  const auto hidden = ops::gelu(apply_linear(bind, fc1_, apply_norm(bind, norm2_, y)));
  const auto z = ops::add(y, apply_linear(bind, fc2_, hidden));
  return FeatureMap<T>{input.height, input.width, channels_, z};
}

template <typename T>
PatchMerge<T>::PatchMerge(ParameterSet<T>& params, const std::string& name, std::size_t channels, Rng& rng)
    : proj_(add_linear(params, name + ".proj", 4 * channels, 2 * channels, rng)) {}

template <typename T>
FeatureMap<T> PatchMerge<T>::forward(ParamBinding<T>& bind, const FeatureMap<T>& input) const {
  if (input.height % 2 != 0 || input.width % 2 != 0) {
    fail(ErrorCode::shape_mismatch, "patch_merge: odd grid " + std::to_string(input.height) + "x" +
                                        std::to_string(input.width));
  }
  if (4 * input.channels != proj_.in) fail(ErrorCode::shape_mismatch, "patch_merge: channel mismatch");
  typename Tape<T>::Scope scope(bind.tape(), "patch_merge");
  const std::size_t oh = input.height / 2, ow = input.width / 2;
  std::vector<std::int64_t> index;
  index.reserve(oh * ow * 4);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (const auto& [dy, dx] : {std::pair{0, 0}, {1, 0}, {0, 1}, {1, 1}}) {
        index.push_back(static_cast<std::int64_t>((2 * y + dy) * input.width + 2 * x + dx));
      }
    }
  }
  const auto grouped = ops::reshape(ops::gather_rows(input.values, std::span<const std::int64_t>(index)),
                                    Shape{oh * ow, 4 * input.channels});
  return FeatureMap<T>{oh, ow, proj_.out, apply_linear(bind, proj_, grouped)};
}

template <typename T>
Backbone<T>::Backbone(ParameterSet<T>& params, const BackboneConfig& config, Rng& rng)
    : config_((config.validate(), config)),
      embed_(params, "backbone.embed", config.patch_size, config.stage_channels[0], rng) {
  for (std::size_t s = 0; s < config.stage_channels.size(); ++s) {
    const std::size_t c = config.stage_channels[s];
    if (s > 0) {
      merges_.emplace_back(params, "backbone.merge" + std::to_string(s), config.stage_channels[s - 1], rng);
    }
    std::vector<WindowAttentionBlock<T>> blocks;
    for (std::size_t b = 0; b < config.blocks_per_stage[s]; ++b) {
      const std::size_t offset = (b % 2 == 1) ? config.window_size / 2 : 0;
      blocks.emplace_back(params, "backbone.stage" + std::to_string(s) + ".block" + std::to_string(b), c,
                          config.heads, config.window_size, offset, c * config.mlp_ratio,
                          config.relative_position_bias, rng);
    }
    stages_.push_back(std::move(blocks));
  }
}

template <typename T>
FeatureMap<T> Backbone<T>::forward(ParamBinding<T>& bind, const Var<T>& image) const {
  typename Tape<T>::Scope scope(bind.tape(), "backbone");
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != config_.image_height || s[1] != config_.image_width || s[2] != 3) {
    fail(ErrorCode::shape_mismatch, "backbone: image " + shape_str(s) + " does not match config");
  }
  FeatureMap<T> f = embed_.forward(bind, image);
  for (std::size_t st = 0; st < stages_.size(); ++st) {
    if (st > 0) f = merges_[st - 1].forward(bind, f);
    for (const auto& block : stages_[st]) f = block.forward(bind, f);
  }
  return f;
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& grid_rows, std::size_t height, std::size_t width,
                        std::size_t out_height, std::size_t out_width) {
  if (grid_rows.shape()[0] != height * width || out_height % height != 0 || out_width % width != 0) {
    fail(ErrorCode::shape_mismatch, "upsample_nearest: incompatible extents");
  }
  const std::size_t fy = out_height / height, fx = out_width / width;
  std::vector<std::int64_t> index;
  index.reserve(out_height * out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    for (std::size_t x = 0; x < out_width; ++x) {
      index.push_back(static_cast<std::int64_t>((y / fy) * width + x / fx));
    }
  }
  return ops::gather_rows(grid_rows, std::span<const std::int64_t>(index));
}

template struct FeatureMap<float>;
template struct FeatureMap<double>;
template class PatchEmbed<float>;
template class PatchEmbed<double>;
template class WindowAttentionBlock<float>;
template class WindowAttentionBlock<double>;
template class PatchMerge<float>;
template class PatchMerge<double>;
template class Backbone<float>;
template class Backbone<double>;
template Var<float> upsample_nearest(const Var<float>&, std::size_t, std::size_t, std::size_t, std::size_t);
template Var<double> upsample_nearest(const Var<double>&, std::size_t, std::size_t, std::size_t, std::size_t);

}  // namespace ctxseg
