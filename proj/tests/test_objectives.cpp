#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include <json.hpp>

#include "ctxseg/gradcheck.hpp"
#include "ctxseg/metrics.hpp"
#include "ctxseg/objectives.hpp"
#include "ctxseg/ops.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace ctxseg;
using ctxseg::testing::random_tensor;

namespace {

double contrastive_by_hand(const std::vector<std::vector<double>>& e, const std::vector<int>& y, double m) {
  auto unit = [](std::vector<double> v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    for (double& x : v) x /= std::sqrt(n);
    return v;
  };
  double total = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t j = i + 1; j < e.size(); ++j, ++k) {
      const auto a = unit(e[i]), b = unit(e[j]);
      double d2 = 0.0;
      for (std::size_t t = 0; t < a.size(); ++t) d2 += (a[t] - b[t]) * (a[t] - b[t]);
      const double d = std::sqrt(d2);
      total += y[k] ? d2 : std::pow(std::max(0.0, m - d), 2);
    }
  return total / static_cast<double>(k);
}

}  // namespace

TEST_CASE("cross entropy: saturated, uniform and hand-summed cases") {
  Tape<double> tape;
  const std::vector<std::uint8_t> one{2};
  const auto sat = cross_entropy_loss(tape.constant(Tensor<double>::matrix({{0, 0, 100}})), one, {});
  CHECK(sat.value()[0] <= 1e-8);

  for (std::size_t k = 2; k <= 10; ++k) {
    const std::vector<std::uint8_t> m{0, static_cast<std::uint8_t>(k - 1), 1};
    const auto l = cross_entropy_loss(tape.constant(Tensor<double>(Shape{3, k})), m, {});
    CHECK(std::abs(l.value()[0] - std::log(static_cast<double>(k))) <= 1e-12);
  }

  Rng rng(3);
  const auto logits = random_tensor({9, 3}, rng, -2.0, 2.0);
  std::vector<std::uint8_t> mask(9);
  for (auto& v : mask) v = static_cast<std::uint8_t>(rng.below(3));
  double sum = 0.0;
  for (std::size_t p = 0; p < 9; ++p) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at(p, c));
    sum += -std::log(std::exp(logits.at(p, mask[p])) / z);
  }
  const auto l = cross_entropy_loss(tape.constant(logits), mask, {});
  CHECK(std::abs(l.value()[0] - sum / 9.0) <= 1e-12);
  CHECK(l.value()[0] >= 0.0);

  LossConfig weighted;
  weighted.class_weights = {0.5, 1.0, 2.0};
  double wsum = 0.0, wtot = 0.0;
  for (std::size_t p = 0; p < 9; ++p) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at(p, c));
    const double w = weighted.class_weights[mask[p]];
    wsum += -w * std::log(std::exp(logits.at(p, mask[p])) / z);
    wtot += w;
  }
  CHECK(std::abs(cross_entropy_loss(tape.constant(logits), mask, weighted).value()[0] - wsum / wtot) <= 1e-12);

  const std::vector<std::uint8_t> bad{0, 3, 1, 0, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(cross_entropy_loss(tape.constant(logits), bad, {}), Error);
}

TEST_CASE("contrastive: positive identical pair and inactive hinge contribute zero") {
  const LabelVocabulary v({"a", "b", "c"});
  const auto pairs = SimilarityPairs::from_labels(v, {{"a", "b"}});
  Tape<double> tape;
  const std::vector<std::size_t> ab{0, 1}, ac{0, 2};
  const auto same = Tensor<double>::matrix({{1, 2, 3}, {2, 4, 6}});
  CHECK(contrastive_loss(tape.constant(same), ab, pairs, 3, {}).value()[0] == 0.0);
  const auto opposite = Tensor<double>::matrix({{1, 0, 0}, {-1, 0, 0}});  // d = 2 >= m = 1
  CHECK(contrastive_loss(tape.constant(opposite), ac, pairs, 3, {}).value()[0] == 0.0);
}

TEST_CASE("contrastive: two positives and one negative match hand arithmetic") {
  const LabelVocabulary v({"a", "b", "c"});
  const auto pairs = SimilarityPairs::from_labels(v, {{"a", "b"}, {"b", "c"}});
  const std::vector<std::vector<double>> e{{1, 0}, {0.6, 0.8}, {0, 1}};
  // pairs in order (a,b)+, (a,c)-, (b,c)+
  const double d_ab2 = 0.4 * 0.4 + 0.8 * 0.8, d_bc2 = 0.6 * 0.6 + 0.2 * 0.2, d_ac = std::sqrt(2.0);
  const double expected = (d_ab2 + std::pow(std::max(0.0, 1.5 - d_ac), 2) + d_bc2) / 3.0;
  CHECK(std::abs(contrastive_by_hand(e, {1, 0, 1}, 1.5) - expected) <= 1e-15);
  Tape<double> tape;
  LossConfig cfg;
  cfg.margin = 1.5;
  const std::vector<std::size_t> ids{0, 1, 2};
  const auto l = contrastive_loss(tape.constant(Tensor<double>::matrix({{1, 0}, {0.6, 0.8}, {0, 1}})), ids, pairs, 3, cfg);
  CHECK(std::abs(l.value()[0] - expected) <= 1e-12);
  CHECK_THROWS_AS(contrastive_loss(tape.constant(Tensor<double>::matrix({{1, 0}, {0, 1}})),
                                   std::vector<std::size_t>{0, 7}, pairs, 3, cfg),
                  Error);
}

TEST_CASE("contrastive: random cases match the scalar reference") {
  const LabelVocabulary v({"a", "b", "c", "d", "e"});
  const auto pairs = SimilarityPairs::from_labels(v, {{"a", "b"}, {"c", "e"}});
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto t = random_tensor({5, 4}, rng);
    std::vector<std::vector<double>> e(5, std::vector<double>(4));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j) e[i][j] = t.at(i, j);
    std::vector<int> y;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = i + 1; j < 5; ++j) y.push_back(pairs.is_positive(i, j));
    Tape<double> tape;
    const std::vector<std::size_t> ids{0, 1, 2, 3, 4};
    const auto l = contrastive_loss(tape.constant(t), ids, pairs, 5, {});
    CHECK(std::abs(l.value()[0] - contrastive_by_hand(e, y, 1.0)) <= 1e-12);
  }
}

TEST_CASE("total loss: exact weighted sum and linearity in lambda") {
  Tape<double> tape;
  const auto ce = tape.constant(Tensor<double>::scalar(2.0));
  const auto con = tape.constant(Tensor<double>::scalar(4.0));
  LossConfig c0;
  c0.lambda = 0.0;
  CHECK(total_loss(ce, con, c0).value()[0] == 2.0);
  LossConfig c1;
  c1.lambda = 1.0;
  CHECK(total_loss(tape.constant(Tensor<double>::scalar(0.0)), con, c1).value()[0] == 4.0);
  LossConfig ch;
  ch.lambda = 0.5;
  CHECK(total_loss(ce, con, ch).value()[0] == 4.0);

  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    const double a = rng.uniform(0, 3), b = rng.uniform(0, 3), l1 = rng.uniform(0, 1), l2 = rng.uniform(0, 1);
    LossConfig x, y, m;
    x.lambda = l1;
    y.lambda = l2;
    m.lambda = (l1 + l2) / 2;
    const auto va = tape.constant(Tensor<double>::scalar(a)), vb = tape.constant(Tensor<double>::scalar(b));
    const double lhs = total_loss(va, vb, x).value()[0] + total_loss(va, vb, y).value()[0];
    CHECK(std::abs(lhs - 2 * total_loss(va, vb, m).value()[0]) <= 1e-12);
  }
  LossConfig bad;
  bad.lambda = -1;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.margin = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("losses: gradient checks") {
  const LabelVocabulary v({"a", "b", "c", "d"});
  const auto pairs = SimilarityPairs::from_labels(v, {{"a", "b"}});
  Rng rng(7);
  double worst_ce = 0.0, worst_con = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::uint8_t> mask(6);
    for (auto& m : mask) m = static_cast<std::uint8_t>(rng.below(5));
    ParameterSet<double> none;
    worst_ce = std::max(worst_ce, check_gradients(none, {random_tensor({6, 5}, rng, -2, 2)},
                                                  [&](ParamBinding<double>&, std::span<const Var<double>> in) {
                                                    return cross_entropy_loss(in[0], mask, {});
                                                  })
                                      .max_relative_error);
    worst_con = std::max(worst_con, check_gradients(none, {random_tensor({4, 3}, rng)},
                                                    [&](ParamBinding<double>&, std::span<const Var<double>> in) {
                                                      const std::vector<std::size_t> ids{0, 1, 2, 3};
                                                      return contrastive_loss(in[0], ids, pairs, 4, {});
                                                    })
                                        .max_relative_error);
  }
  CHECK(worst_ce <= 1e-4);
  CHECK(worst_con <= 1e-3);
}

TEST_CASE("contrastive geometry: gradient steps pull positives together and push negatives apart") {
  const LabelVocabulary v({"a", "b"});
  const auto pos = SimilarityPairs::from_labels(v, {{"a", "b"}});
  const SimilarityPairs neg;
  const std::vector<std::size_t> ids{0, 1};
  auto distance = [](const Tensor<double>& e) {
    double na = 0, nb = 0, d = 0;
    for (std::size_t j = 0; j < e.dim(1); ++j) {
      na += e.at(0, j) * e.at(0, j);
      nb += e.at(1, j) * e.at(1, j);
    }
    for (std::size_t j = 0; j < e.dim(1); ++j) {
      const double t = e.at(0, j) / std::sqrt(na) - e.at(1, j) / std::sqrt(nb);
      d += t * t;
    }
    return std::sqrt(d);
  };
  Rng rng(8);
  for (int init = 0; init < 50; ++init) {
    for (const bool positive : {true, false}) {
      auto e = random_tensor({2, 4}, rng);
      if (!positive) {
        for (std::size_t j = 0; j < 4; ++j) e.at(1, j) = e.at(0, j) + 0.3 * e.at(1, j);  // d < m
      }
      double d = distance(e);
      if (!positive) REQUIRE(d < 1.0);
      for (int step = 0; step < 30; ++step) {
        Tape<double> tape;
        const auto x = tape.variable(e);
        tape.backward(contrastive_loss(x, ids, positive ? pos : neg, 2, {}));
        const auto g = tape.grad(x);
        for (std::size_t i = 0; i < e.size(); ++i) e[i] -= 0.05 * g[i];
        const double nd = distance(e);
        if (positive) {
          if (d < 1e-9) break;
          CHECK(nd < d);
        } else {
          if (d >= 1.0) break;
          CHECK(nd > d);
        }
        d = nd;
      }
    }
  }
}

TEST_CASE("mIoU: closed cases and the 4x4 fixture") {
  const std::vector<std::uint8_t> gt{0, 1, 1, 2, 0, 1, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(compute_miou(gt, gt, 3).miou == 1.0);
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{0, 0, 1, 1};
  const auto disjoint = compute_miou(a, b, 2);
  CHECK(*disjoint.per_class[1] == 0.0);

  // 3-pixel prediction and 3-pixel ground truth overlapping in 2 pixels.
  std::vector<std::uint8_t> p(16, 0), g(16, 0);
  p[0] = p[1] = p[2] = 1;
  g[1] = g[2] = g[5] = 1;
  const auto r = compute_miou(p, g, 2);
  CHECK(*r.per_class[1] == 0.5);
  CHECK(r.miou == 0.5);
  CHECK(compute_miou(p, g, 2, true).miou == doctest::Approx((0.5 + 12.0 / 14.0) / 2));
  CHECK_THROWS_AS(compute_miou(a, std::vector<std::uint8_t>{0, 0, 1}, 2), Error);
}

TEST_CASE("mIoU and mAP: agree exactly with brute-force oracles on random masks") {
  Rng rng(9);
  std::vector<oracle::Image> batch;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8), k = 2 + rng.below(4);
    oracle::Image im{oracle::random_mask(rng, h, w, k), {}, oracle::random_mask(rng, h, w, k), h, w};
    if (rng.bernoulli(0.3)) im.pred = im.gt;
    for (std::size_t i = 0; i < h * w; ++i) im.confidence.push_back(static_cast<float>(rng.below(5)) / 4.0f);
    const auto ref = oracle::miou(im.pred, im.gt, k, false);
    const auto got = compute_miou(im.pred, im.gt, k);
    CHECK(got.miou == ref.second);
    CHECK(got.per_class == ref.first);

    ApAccumulator acc(k);
    acc.add(im.pred, im.confidence, im.gt, h, w);
    const auto ap = acc.finalize();
    const auto oap = oracle::average_precision({im}, k);
    CHECK(ap.true_positives == oap.tp);
    CHECK(ap.false_positives == oap.fp);
    CHECK(ap.ground_truth == oap.gt);
    for (std::size_t c = 0; c < k; ++c) {
      REQUIRE(ap.per_class[c].has_value() == oap.per_class[c].has_value());
      if (ap.per_class[c]) CHECK(std::abs(*ap.per_class[c] - *oap.per_class[c]) <= 1e-12);
    }
    CHECK(std::abs(ap.map - oap.map) <= 1e-12);
    if (k == 4) batch.push_back(std::move(im));
  }
  // Dataset-level matching across images.
  ApAccumulator acc(4);
  for (const auto& im : batch) acc.add(im.pred, im.confidence, im.gt, im.h, im.w);
  const auto ap = acc.finalize();
  const auto oap = oracle::average_precision(batch, 4);
  CHECK(ap.true_positives == oap.tp);
  CHECK(ap.false_positives == oap.fp);
  CHECK(std::abs(ap.map - oap.map) <= 1e-12);
}

TEST_CASE("mIoU: symmetric under consistent relabeling") {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = oracle::random_mask(rng, 8, 8, 4), g = oracle::random_mask(rng, 8, 8, 4);
    const std::uint8_t perm[4] = {0, 3, 1, 2};
    std::vector<std::uint8_t> pp(p.size()), gp(g.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      pp[i] = perm[p[i]];
      gp[i] = perm[g[i]];
    }
    CHECK(std::abs(compute_miou(p, g, 4).miou - compute_miou(pp, gp, 4).miou) <= 1e-15);
  }
}

TEST_CASE("mAP: perfect, empty and the three-detection PR fixture") {
  std::vector<std::uint8_t> gt(8 * 8, 0);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x) {
      gt[y * 8 + x] = 1;
      gt[(y + 4) * 8 + x + 4] = 1;
      gt[(y + 5) * 8 + x] = 2;
    }
  const std::vector<float> conf(64, 0.9f);
  {
    ApAccumulator acc(3);
    acc.add(gt, conf, gt, 8, 8);
    CHECK(acc.finalize().map == 1.0);
  }
  {
    ApAccumulator acc(3);
    acc.add(std::vector<std::uint8_t>(64, 0), conf, gt, 8, 8);
    CHECK(acc.finalize().map == 0.0);
  }
  {
    // Class 1: TP (0.9), FP (0.8), TP (0.7) against 2 GT regions.
    std::vector<std::uint8_t> pred(64, 0);
    std::vector<float> c(64, 0.5f);
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        pred[y * 8 + x] = 1;
        c[y * 8 + x] = 0.9f;
        pred[y * 8 + x + 4] = 1;  // nothing there in gt
        c[y * 8 + x + 4] = 0.8f;
        pred[(y + 4) * 8 + x + 4] = 1;
        c[(y + 4) * 8 + x + 4] = 0.7f;
      }
    ApAccumulator acc(3);
    acc.add(pred, c, gt, 8, 8);
    const auto r = acc.finalize();
    // precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> envelope 1, 2/3, 2/3.
    CHECK(std::abs(*r.per_class[1] - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)) <= 1e-15);
    CHECK(*r.per_class[2] == 0.0);
    CHECK(r.map == doctest::Approx((0.5 + 1.0 / 3.0) / 2.0));
  }
  CHECK(average_precision({1, 0, 1}, 2) == doctest::Approx(5.0 / 6.0));
}

TEST_CASE("eval report: JSON and CSV rendering") {
  EvalReport rep;
  rep.class_names = {"background", "a", "b"};
  ConfusionMatrix cm(3);
  const std::vector<std::uint8_t> p{0, 1, 1, 2}, g{0, 1, 2, 2};
  cm.add(p, g);
  rep.iou = compute_iou(cm);
  rep.confusion = cm.counts();
  rep.samples = 1;
  rep.ap.per_class = {std::nullopt, 1.0, std::nullopt};
  rep.ap.map = 1.0;
  CHECK(rep.to_csv() == "class,iou,ap\nbackground,1.000000,\na,0.500000,1.000000\nb,0.500000,\n");
  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j["miou"] == 0.5);
  CHECK(j["confusion"][2][1] == 1);
  CHECK(j["classes"][2]["ap"].is_null());
}
