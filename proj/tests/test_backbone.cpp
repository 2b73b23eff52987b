#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "ctxseg/backbone.hpp"
#include "ctxseg/gradcheck.hpp"
#include "ctxseg/ops.hpp"
#include "test_support.hpp"

using namespace ctxseg;
using ctxseg::testing::max_abs_diff;
using ctxseg::testing::random_projection;
using ctxseg::testing::random_tensor;

namespace {

using Rows = std::vector<std::vector<double>>;

Rows to_rows(const Tensor<double>& t) {
  Rows r(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) r[i][j] = t.at(i, j);
  return r;
}

Rows linear(const ParameterSet<double>& p, const LinearLayer& l, const Rows& x) {
  const auto& w = p.value(l.weight);
  const auto& b = p.value(l.bias);
  Rows y(x.size(), std::vector<double>(l.out));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < l.out; ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < l.in; ++k) s += x[i][k] * w.at(k, o);
      y[i][o] = s;
    }
  return y;
}

Rows norm(const ParameterSet<double>& p, const NormLayer& l, const Rows& x) {
  Rows y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0, var = 0.0;
    for (double v : x[i]) mean += v / n;
    for (double v : x[i]) var += (v - mean) * (v - mean) / n;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      y[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * p.value(l.gain)[j] + p.value(l.bias)[j];
  }
  return y;
}

struct BlockSpec {
  std::size_t height, width, channels, heads, window, offset;
  bool relative_bias;
};

// Direct per-position evaluation of a windowed pre-norm attention block:
// each query attends to the grid positions sharing its (shifted) window.
Rows naive_block(const ParameterSet<double>& p, const WindowAttentionBlock<double>& blk,
                 const std::string& name, const BlockSpec& s, const Rows& x) {
  const std::size_t n = s.height * s.width, c = s.channels, dk = c / s.heads, w = s.window;
  const std::size_t off = (s.height > w || s.width > w) ? s.offset : 0;
  const Rows qkv = linear(p, blk.qkv(), norm(p, blk.attn_norm(), x));
  const std::size_t span = 2 * w - 1;
  const Tensor<double>* table = s.relative_bias ? &p.value(p.index_of(name + ".relative_bias")) : nullptr;
  Rows mixed(n, std::vector<double>(c, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t yi = i / s.width + off, xi = i % s.width + off;
    std::vector<std::size_t> keys;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t yj = j / s.width + off, xj = j % s.width + off;
      if (yi / w == yj / w && xi / w == xj / w) keys.push_back(j);
    }
    for (std::size_t h = 0; h < s.heads; ++h) {
      std::vector<double> score;
      for (std::size_t j : keys) {
        double d = 0.0;
        for (std::size_t e = 0; e < dk; ++e) d += qkv[i][h * dk + e] * qkv[j][c + h * dk + e];
        d /= std::sqrt(static_cast<double>(dk));
        if (table) {
          const std::size_t yj = j / s.width + off, xj = j % s.width + off;
          const std::size_t r = (yi % w + w - 1 - yj % w) * span + (xi % w + w - 1 - xj % w);
          d += table->at(r, h);
        }
        score.push_back(d);
      }
      const double mx = *std::max_element(score.begin(), score.end());
      double z = 0.0;
      for (double& v : score) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < keys.size(); ++k)
        for (std::size_t e = 0; e < dk; ++e) mixed[i][h * dk + e] += score[k] / z * qkv[keys[k]][2 * c + h * dk + e];
    }
  }
  Rows y = linear(p, blk.out_proj(), mixed);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i][j] += x[i][j];
  Rows hid = linear(p, blk.mlp_in(), norm(p, blk.mlp_norm(), y));
  for (auto& r : hid)
    for (double& v : r) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  Rows out = linear(p, blk.mlp_out(), hid);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i][j] += y[i][j];
  return out;
}

double max_diff(const Rows& a, const Tensor<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b.at(i, j)));
  return m;
}

void randomize(ParameterSet<double>& p, Rng& rng, double scale = 0.5) {
  for (std::size_t i = 0; i < p.size(); ++i)
    for (auto& v : p.value(i).data()) v = rng.uniform(-scale, scale);
}

Tensor<double> run_block(const ParameterSet<double>& p, const WindowAttentionBlock<double>& blk,
                         const BlockSpec& s, const Tensor<double>& x) {
  Tape<double> tape;
  ParamBinding<double> bind(tape, p);
  return blk.forward(bind, FeatureMap<double>{s.height, s.width, s.channels, tape.constant(x)}).values.value();
}

}  // namespace

TEST_CASE("patch_embed: shape, zero image and hand projection of one patch") {
  ParameterSet<double> p;
  Rng rng(3);
  PatchEmbed<double> embed(p, "e", 4, 8, rng);
  Tape<double> tape;
  ParamBinding<double> bind(tape, p);
  const auto img = random_tensor({64, 64, 3}, rng, 0.0, 1.0);
  const auto f = embed.forward(bind, tape.constant(img));
  CHECK(f.height == 16);
  CHECK(f.width == 16);
  CHECK(f.values.shape() == Shape{256, 8});

  // Patch (py=2, px=5): flatten rows of 4x4 pixels, RGB interleaved.
  const auto& w = p.value(embed.projection().weight);
  const auto& b = p.value(embed.projection().bias);
  for (std::size_t o = 0; o < 8; ++o) {
    double s = b[o];
    std::size_t k = 0;
    for (std::size_t iy = 0; iy < 4; ++iy)
      for (std::size_t ix = 0; ix < 4; ++ix)
        for (std::size_t ch = 0; ch < 3; ++ch) s += img[((8 + iy) * 64 + 20 + ix) * 3 + ch] * w.at(k++, o);
    CHECK(std::abs(f.values.value().at(2 * 16 + 5, o) - s) <= 1e-12);
  }

  Tape<double> t2;
  ParamBinding<double> b2(t2, p);
  const auto zero = embed.forward(b2, t2.constant(Tensor<double>(Shape{64, 64, 3})));
  CHECK(zero.values.value() == Tensor<double>(Shape{256, 8}));  // bias initialises to zero

  Tape<double> t3;
  ParamBinding<double> b3(t3, p);
  CHECK_THROWS_AS(embed.forward(b3, t3.constant(Tensor<double>(Shape{62, 64, 3}))), Error);
}

TEST_CASE("window attention: matches direct per-position evaluation") {
  const std::vector<BlockSpec> specs{
      {2, 2, 4, 1, 2, 0, true},   {4, 4, 8, 2, 2, 0, true},  {4, 4, 8, 2, 2, 1, true},
      {8, 8, 8, 4, 4, 2, true},   {8, 4, 8, 2, 4, 2, false}, {4, 4, 6, 3, 4, 2, true},
  };
  for (const auto& s : specs) {
    CAPTURE(s.height);
    CAPTURE(s.offset);
    ParameterSet<double> p;
    Rng rng(17 + s.offset, s.height);
    WindowAttentionBlock<double> blk(p, "b", s.channels, s.heads, s.window, s.offset, 2 * s.channels,
                                     s.relative_bias, rng);
    randomize(p, rng);
    const auto x = random_tensor({s.height * s.width, s.channels}, rng);
    const auto got = run_block(p, blk, s, x);
    CHECK(got.shape() == x.shape());
    CHECK(max_diff(naive_block(p, blk, "b", s, to_rows(x)), got) <= 1e-12);
  }
}

TEST_CASE("window attention: window covering the grid equals global attention") {
  // With w equal to the grid, every query sees every position: the naive
  // reference with a single window is global self-attention.
  const BlockSpec s{4, 4, 8, 2, 4, 2, false};
  ParameterSet<double> p;
  Rng rng(5);
  WindowAttentionBlock<double> blk(p, "b", 8, 2, 4, 2, 16, false, rng);
  randomize(p, rng);
  const auto x = random_tensor({16, 8}, rng);
  const auto got = run_block(p, blk, s, x);

  const Rows xr = to_rows(x);
  const Rows qkv = linear(p, blk.qkv(), norm(p, blk.attn_norm(), xr));
  Rows mixed(16, std::vector<double>(8, 0.0));
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t h = 0; h < 2; ++h) {
      std::vector<double> e(16);
      double z = 0.0;
      for (std::size_t j = 0; j < 16; ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < 4; ++k) d += qkv[i][h * 4 + k] * qkv[j][8 + h * 4 + k];
        z += (e[j] = std::exp(d / 2.0));
      }
      for (std::size_t j = 0; j < 16; ++j)
        for (std::size_t k = 0; k < 4; ++k) mixed[i][h * 4 + k] += e[j] / z * qkv[j][16 + h * 4 + k];
    }
  Rows y = linear(p, blk.out_proj(), mixed);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 8; ++j) y[i][j] += xr[i][j];
  Rows hid = linear(p, blk.mlp_in(), norm(p, blk.mlp_norm(), y));
  for (auto& r : hid)
    for (double& v : r) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  Rows out = linear(p, blk.mlp_out(), hid);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 8; ++j) out[i][j] += y[i][j];
  CHECK(max_diff(out, got) <= 1e-12);
}

TEST_CASE("window attention: permutation equivariance without relative bias") {
  const BlockSpec s{4, 4, 8, 2, 4, 0, false};
  ParameterSet<double> p;
  Rng rng(23);
  WindowAttentionBlock<double> blk(p, "b", 8, 2, 4, 0, 16, false, rng);
  randomize(p, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tensor({16, 8}, rng);
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    Tensor<double> xp(x.shape());
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 8; ++j) xp.at(i, j) = x.at(perm[i], j);
    const auto y = run_block(p, blk, s, x);
    const auto yp = run_block(p, blk, s, xp);
    double m = 0.0;
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 8; ++j) m = std::max(m, std::abs(yp.at(i, j) - y.at(perm[i], j)));
    CHECK(m <= 1e-12);
  }
}

TEST_CASE("window layout: forward and reverse maps are consistent") {
  for (std::size_t off : {0u, 1u, 2u}) {
    const auto l = make_window_layout(8, 4, 4, off);
    for (std::size_t p = 0; p < 32; ++p) {
      const auto r = l.reverse[p];
      REQUIRE(r >= 0);
      CHECK(l.forward[static_cast<std::size_t>(r)] == static_cast<std::int64_t>(p));
    }
    CHECK(l.forward.size() == l.windows * 16);
  }
}

TEST_CASE("patch_merge: shape, constant input and explicit concat-project") {
  ParameterSet<double> p;
  Rng rng(8);
  PatchMerge<double> merge(p, "m", 32, rng);
  Tape<double> tape;
  ParamBinding<double> bind(tape, p);
  const auto x = random_tensor({256, 32}, rng);
  const auto f = merge.forward(bind, FeatureMap<double>{16, 16, 32, tape.constant(x)});
  CHECK(f.height == 8);
  CHECK(f.width == 8);
  CHECK(f.channels == 64);

  // Output cell (3, 6) from input (6..7, 12..13), order (dy,dx) = (0,0),(1,0),(0,1),(1,1).
  const auto& w = p.value(merge.projection().weight);
  const std::size_t src[4] = {6 * 16 + 12, 7 * 16 + 12, 6 * 16 + 13, 7 * 16 + 13};
  for (std::size_t o = 0; o < 64; ++o) {
    double s = p.value(merge.projection().bias)[o];
    for (std::size_t q = 0; q < 4; ++q)
      for (std::size_t c = 0; c < 32; ++c) s += x.at(src[q], c) * w.at(q * 32 + c, o);
    CHECK(std::abs(f.values.value().at(3 * 8 + 6, o) - s) <= 1e-12);
  }

  Tensor<double> constant(Shape{256, 32});
  for (std::size_t i = 0; i < 256; ++i)
    for (std::size_t c = 0; c < 32; ++c) constant.at(i, c) = 0.1 * static_cast<double>(c);
  const auto g = merge.forward(bind, FeatureMap<double>{16, 16, 32, tape.constant(constant)});
  for (std::size_t i = 1; i < 64; ++i)
    for (std::size_t c = 0; c < 64; ++c) CHECK(g.values.value().at(i, c) == g.values.value().at(0, c));

  CHECK_THROWS_AS(merge.forward(bind, FeatureMap<double>{3, 2, 32, tape.constant(Tensor<double>(Shape{6, 32}))}),
                  Error);
}

TEST_CASE("backbone: desk config shapes, upsampling and determinism") {
  ParameterSet<float> p;
  Rng rng(1);
  Backbone<float> net(p, BackboneConfig{}, rng);
  Rng img_rng(2);
  const auto img = random_tensor<float>({64, 64, 3}, img_rng, 0.0, 1.0);
  auto run = [&] {
    Tape<float> tape;
    ParamBinding<float> bind(tape, p);
    const auto f = net.forward(bind, tape.constant(img));
    CHECK(f.height == 8);
    CHECK(f.width == 8);
    CHECK(f.channels == 64);
    const auto up = upsample_nearest(f.values, 8, 8, 64, 64);
    CHECK(up.shape() == Shape{4096, 64});
    for (std::size_t c = 0; c < 64; ++c) CHECK(up.value().at(13 * 64 + 42, c) == f.values.value().at(1 * 8 + 5, c));
    return f.values.value();
  };
  CHECK(run() == run());
}

TEST_CASE("backbone: shape contract over random valid configs") {
  Rng rng(77);
  int built = 0;
  for (int trial = 0; trial < 200 && built < 12; ++trial) {
    BackboneConfig cfg;
    cfg.patch_size = 1u << rng.below(3);
    cfg.window_size = 1 + rng.below(4);
    const std::size_t stages = 1 + rng.below(2);
    cfg.heads = 1 + rng.below(2);
    const std::size_t c0 = cfg.heads * 2 * (1 + rng.below(2));
    cfg.stage_channels = {c0};
    cfg.blocks_per_stage = {1 + rng.below(2)};
    if (stages == 2) {
      cfg.stage_channels.push_back(2 * c0);
      cfg.blocks_per_stage.push_back(1);
    }
    cfg.image_height = cfg.patch_size * cfg.window_size * (stages == 2 ? 2 : 1) * (1 + rng.below(2));
    cfg.image_width = cfg.patch_size * cfg.window_size * (stages == 2 ? 2 : 1) * (1 + rng.below(2));
    try {
      cfg.validate();
    } catch (const Error&) {
      continue;
    }
    ++built;
    ParameterSet<double> p;
    Backbone<double> net(p, cfg, rng);
    Tape<double> tape;
    ParamBinding<double> bind(tape, p);
    const auto f = net.forward(bind, tape.constant(random_tensor({cfg.image_height, cfg.image_width, 3}, rng)));
    CHECK(f.height == cfg.output_height());
    CHECK(f.width == cfg.output_width());
    CHECK(f.values.shape() == Shape{cfg.output_height() * cfg.output_width(), cfg.output_channels()});
  }
  CHECK(built >= 6);
}

TEST_CASE("backbone: invalid configs are rejected") {
  BackboneConfig cfg;
  cfg.image_height = 62;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = BackboneConfig{};
  cfg.window_size = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = BackboneConfig{};
  cfg.stage_channels = {32, 48};
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("backbone: full forward gradient check on a 16x16 image") {
  BackboneConfig cfg;
  cfg.image_height = 16;
  cfg.image_width = 16;
  cfg.stage_channels = {8, 16};
  cfg.window_size = 2;
  cfg.heads = 2;
  ParameterSet<double> p;
  Rng rng(12);
  Backbone<double> net(p, cfg, rng);
  const auto img = random_tensor({16, 16, 3}, rng, 0.0, 1.0);
  GradCheckOptions opts;
  opts.samples_per_tensor = 6;
  const auto report = check_gradients(
      p, {img},
      [&](ParamBinding<double>& bind, std::span<const Var<double>> in) {
        return random_projection(net.forward(bind, in[0]).values, 4);
      },
      opts);
  CAPTURE(report.worst);
  CHECK(report.max_relative_error <= 1e-3);
  CHECK(report.checked > 100);
}
