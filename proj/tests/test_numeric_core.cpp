#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <string>

#include "ctxseg/adam.hpp"
#include "ctxseg/gradcheck.hpp"
#include "ctxseg/ops.hpp"
#include "ctxseg/rng.hpp"
#include "test_support.hpp"

using namespace ctxseg;
using ctxseg::testing::random_projection;
using ctxseg::testing::random_tensor;

namespace {

// Plain triple loop, independent of the gemm kernels.
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var<double>(std::span<const Var<double>>)> build;
  double lo = -1.0;
  double hi = 1.0;
  bool away_from_zero = false;
};

std::vector<OpCase> op_cases() {
  const std::vector<std::int64_t> gather_index{2, -1, 0, 2, 1};
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto v) { return ops::add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto v) { return ops::sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto v) { return ops::mul(v[0], v[1]); }},
      {"scale", {{5}}, [](auto v) { return ops::scale(v[0], -2.5); }},
      {"add_scalar", {{2, 3}}, [](auto v) { return ops::add_scalar(v[0], 0.75); }},
      {"add_broadcast", {{2, 3, 4}, {3, 4}}, [](auto v) { return ops::add_broadcast(v[0], v[1]); }},
      {"matmul", {{4, 5}, {5, 3}}, [](auto v) { return ops::matmul(v[0], v[1]); }},
      {"matmul_nt", {{4, 5}, {3, 5}}, [](auto v) { return ops::matmul_nt(v[0], v[1]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 5}}, [](auto v) { return ops::bmm(v[0], v[1]); }},
      {"bmm_nt", {{2, 3, 4}, {2, 5, 4}}, [](auto v) { return ops::bmm_nt(v[0], v[1]); }},
      {"transpose", {{3, 5}}, [](auto v) { return ops::transpose(v[0]); }},
      {"permute", {{2, 3, 4}}, [](auto v) { return ops::permute(v[0], {2, 0, 1}); }},
      {"reshape", {{2, 6}}, [](auto v) { return ops::reshape(v[0], Shape{3, 4}); }},
      {"concat", {{2, 3}, {2, 2}}, [](auto v) { return ops::concat<double>({v[0], v[1]}, 1); }},
      {"slice_rows", {{5, 2}}, [](auto v) { return ops::slice_rows(v[0], 1, 3); }},
      {"gather_rows", {{3, 4}},
       [gather_index](auto v) { return ops::gather_rows(v[0], std::span<const std::int64_t>(gather_index)); }},
      {"sum", {{3, 3}}, [](auto v) { return ops::sum(v[0]); }},
      {"mean", {{3, 3}}, [](auto v) { return ops::mean(v[0]); }},
      {"sum_last", {{3, 4}}, [](auto v) { return ops::sum_last(v[0]); }},
      {"relu", {{4, 4}}, [](auto v) { return ops::relu(v[0]); }, -1.0, 1.0, true},
      {"gelu", {{4, 4}}, [](auto v) { return ops::gelu(v[0]); }, -3.0, 3.0},
      {"square", {{6}}, [](auto v) { return ops::square(v[0]); }},
      {"sqrt", {{6}}, [](auto v) { return ops::sqrt(v[0]); }, 0.1, 2.0},
      {"softmax_axis0", {{4, 3}}, [](auto v) { return ops::softmax(v[0], 0); }, -3.0, 3.0},
      {"softmax_axis1", {{2, 5, 3}}, [](auto v) { return ops::softmax(v[0], 1); }, -3.0, 3.0},
      {"layer_norm", {{3, 6}, {6}, {6}}, [](auto v) { return ops::layer_norm(v[0], v[1], v[2]); }},
      {"l2_normalize_rows", {{3, 4}}, [](auto v) { return ops::l2_normalize_rows(v[0]); }},
      {"softmax_cross_entropy", {{5, 4}}, [](auto v) {
         const std::vector<std::int32_t> labels{0, 3, 1, 1, 2};
         return ops::softmax_cross_entropy(v[0], std::span<const std::int32_t>(labels));
       }, -3.0, 3.0},
  };
}

}  // namespace

TEST_CASE("matmul: identity, zero and naive triple-loop oracle") {
  Tape<double> tape;
  const auto eye = tape.constant(Tensor<double>::matrix({{1, 0}, {0, 1}}));
  const auto b = tape.constant(Tensor<double>::matrix({{1, 2}, {3, 4}}));
  CHECK(ops::matmul(eye, b).value() == b.value());

  const auto zero = tape.constant(Tensor<double>(Shape{2, 3}));
  Rng rng(1);
  const auto any = tape.constant(random_tensor({3, 2}, rng));
  CHECK(ops::matmul(zero, any).value() == Tensor<double>(Shape{2, 2}));

  const auto a = random_tensor({4, 5}, rng);
  const auto c = random_tensor({5, 3}, rng);
  const auto fast = ops::matmul(tape.constant(a), tape.constant(c)).value();
  const auto slow = naive_matmul(a, c);
  for (std::size_t i = 0; i < fast.size(); ++i) {
    CHECK(std::abs(fast[i] - slow[i]) <= 1e-6 * std::max(1.0, std::abs(slow[i])));
  }
}

TEST_CASE("matmul: identity product reproduces stored values exactly") {
  Rng rng(5);
  Tape<float> tape;
  Tensor<float> eye(Shape{7, 7});
  for (std::size_t i = 0; i < 7; ++i) eye.at(i, i) = 1.0f;
  const auto a = random_tensor<float>({7, 9}, rng, -100.0, 100.0);
  CHECK(ops::matmul(tape.constant(eye), tape.constant(a)).value() == a);
}

TEST_CASE("matmul: inner extent mismatch is a shape error") {
  Tape<double> tape;
  const auto a = tape.constant(Tensor<double>(Shape{2, 3}));
  const auto b = tape.constant(Tensor<double>(Shape{2, 3}));
  try {
    ops::matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape_mismatch);
  }
}

TEST_CASE("softmax: closed forms") {
  Tape<double> tape;
  const auto u = ops::softmax(tape.constant(Tensor<double>(Shape{3})), 0).value();
  for (std::size_t i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(ops::softmax(tape.constant(Tensor<double>::scalar(4.2)), 0).value()[0] == 1.0);
  const auto p = ops::softmax(tape.constant(Tensor<double>(Shape{2}, {0.0, std::log(2.0)})), 0).value();
  CHECK(p[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax: normalisation and shift invariance over random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    const auto x = random_tensor({4, 6}, rng, -10.0, 10.0);
    const double c = rng.uniform(-50.0, 50.0);
    const auto y = ops::softmax(tape.constant(x), 1).value();
    const auto ys = ops::softmax(ops::add_scalar(tape.constant(x), c), 1).value();
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(y.at(r, j) >= 0.0);
        s += y.at(r, j);
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
    CHECK(ctxseg::testing::max_abs_diff(y, ys) <= 1e-6);
  }
}

TEST_CASE("backward: closed-form gradients") {
  Tape<double> tape;
  const auto x = tape.variable(Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}));
  tape.backward(ops::sum(ops::square(x)));
  const auto g = tape.grad(x);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == -4.0);
  CHECK(g[2] == 1.0);

  Tape<double> t2;
  const auto y = t2.variable(Tensor<double>(Shape{2}, {3.0, 4.0}));
  const auto c = ops::sum(t2.constant(Tensor<double>(Shape{2}, {1.0, 1.0})));
  t2.backward(c);
  CHECK(t2.grad(y) == Tensor<double>(Shape{2}));
}

TEST_CASE("backward: misuse is reported") {
  Tape<double> tape;
  const auto x = tape.variable(Tensor<double>(Shape{2}, {1.0, 2.0}));
  const auto loss = ops::sum(x);
  tape.backward(loss);
  try {
    tape.backward(loss);
    FAIL("second backward must throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::state);
  }
  tape.reset();
  const auto z = tape.variable(Tensor<double>(Shape{2}, {1.0, 2.0}));
  try {
    tape.backward(ops::square(z));
    FAIL("non-scalar loss must throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::shape_mismatch);
  }
}

TEST_CASE("tape: nodes are appended in topological order") {
  Tape<double> tape;
  const auto a = tape.variable(Tensor<double>(Shape{2}, {1.0, 2.0}));
  const auto b = ops::square(a);
  const auto c = ops::add(a, b);
  const auto d = ops::sum(c);
  CHECK(a.id() < b.id());
  CHECK(b.id() < c.id());
  CHECK(c.id() < d.id());
  CHECK(tape.op_name(c.id()) == "add");
}

TEST_CASE("non-finite values are rejected at op boundaries") {
  Tape<float> tape;
  const auto big = tape.constant(Tensor<float>(Shape{1}, {3e38f}));
  try {
    ops::add(big, big);
    FAIL("overflow must throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::non_finite);
  }
  try {
    tape.constant(Tensor<float>(Shape{1}, {std::nanf("")}));
    FAIL("NaN constant must throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::non_finite);
  }
}

TEST_CASE("tensor: shape contract") {
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, {1.0, 2.0, 3.0}), Error);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0}), Error);
  const Tensor<double> t(Shape{2, 3});
  CHECK(t.size() == shape_numel(t.shape()));
}

TEST_CASE("gradient check: every differentiable primitive, 20 random trials") {
  for (const auto& op : op_cases()) {
    CAPTURE(op.name);
    double worst = 0.0;
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
      Rng rng(1000 + trial, 7);
      std::vector<Tensor<double>> inputs;
      for (const auto& s : op.shapes) {
        auto t = random_tensor(s, rng, op.lo, op.hi);
        if (op.away_from_zero) {
          for (auto& v : t.data()) v = (v < 0 ? -1.0 : 1.0) * (0.1 + 0.9 * std::abs(v));
        }
        inputs.push_back(std::move(t));
      }
      ParameterSet<double> none;
      const auto report = check_gradients(
          none, inputs,
          [&](ParamBinding<double>&, std::span<const Var<double>> v) {
            return random_projection(op.build(v), trial);
          });
      worst = std::max(worst, report.max_relative_error);
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParameterSet<double> params;
  params.add("w", Tensor<double>(Shape{3}, {1.0, -2.0, 3.0}));
  Adam<double> adam({0.1}, params);
  std::vector<Tensor<double>> grads{Tensor<double>(Shape{3})};
  adam.step(params, grads);
  CHECK(params.value(0) == Tensor<double>(Shape{3}, {1.0, -2.0, 3.0}));
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam: first step is -lr * g / (|g| + eps)") {
  ParameterSet<double> params;
  params.add("w", Tensor<double>(Shape{3}, {0.0, 0.0, 0.0}));
  const AdamConfig cfg{0.01};
  Adam<double> adam(cfg, params);
  const std::vector<double> g{0.5, -3.0, 1e-3};
  std::vector<Tensor<double>> grads{Tensor<double>(Shape{3}, g)};
  adam.step(params, grads);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(params.value(0)[i] == doctest::Approx(-cfg.learning_rate * g[i] / (std::abs(g[i]) + cfg.epsilon)).epsilon(1e-12));
  }
}

TEST_CASE("adam: ten steps on w^2 match a scalar reference") {
  // Scalar reference written directly from the update rule.
  double w = 1.0, m = 0.0, v = 0.0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> reference;
  for (int t = 1; t <= 10; ++t) {
    const double g = 2.0 * w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
    reference.push_back(w);
  }

  ParameterSet<double> params;
  params.add("w", Tensor<double>::scalar(1.0));
  Adam<double> adam({lr, b1, b2, eps}, params);
  for (int t = 0; t < 10; ++t) {
    Tape<double> tape;
    ParamBinding<double> bind(tape, params);
    tape.backward(ops::sum(ops::square(bind(0))));
    const auto grads = bind.gradients();
    adam.step(params, grads);
    CHECK(std::abs(params.value(0)[0] - reference[static_cast<std::size_t>(t)]) <= 1e-10);
  }
  CHECK(adam.steps() == 10);
}

TEST_CASE("adam: non-finite gradient is an error and leaves state untouched") {
  ParameterSet<double> params;
  params.add("w", Tensor<double>::scalar(1.0));
  Adam<double> adam({0.1}, params);
  Tensor<double> bad = Tensor<double>::scalar(0.0);
  bad[0] = std::numeric_limits<double>::infinity();
  std::vector<Tensor<double>> grads{bad};
  CHECK_THROWS_AS(adam.step(params, grads), Error);
  CHECK(params.value(0)[0] == 1.0);
  CHECK(adam.steps() == 0);
}

TEST_CASE("rng: identical seed and stream give identical sequences") {
  Rng a(42, 3), b(42, 3), c(42, 4), d(43, 3);
  bool differs_stream = false, differs_seed = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs_stream = differs_stream || x != c.next_u64();
    differs_seed = differs_seed || x != d.next_u64();
  }
  CHECK(differs_stream);
  CHECK(differs_seed);
  Rng e = Rng::from_state(a.state());
  CHECK(e.next_u64() == a.next_u64());
}

TEST_CASE("rng: distributions stay in range") {
  Rng rng(9);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(rng.below(7) < 7);
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("parameter binding: gradients for unused parameters are zero") {
  ParameterSet<double> params;
  params.add("a", Tensor<double>(Shape{2}, {1.0, 2.0}));
  params.add("b", Tensor<double>(Shape{3}));
  Tape<double> tape;
  ParamBinding<double> bind(tape, params);
  tape.backward(ops::sum(ops::square(bind(0))));
  const auto g = bind.gradients();
  CHECK(g[0] == Tensor<double>(Shape{2}, {2.0, 4.0}));
  CHECK(g[1] == Tensor<double>(Shape{3}));
  CHECK_THROWS_AS(params.add("a", Tensor<double>(Shape{1})), Error);
}

TEST_CASE("tape: value references survive later recording") {
  Tape<double> tape;
  const auto x = tape.constant(Tensor<double>(Shape{2}, {1.0, 2.0}));
  const Tensor<double>& held = x.value();
  for (int i = 0; i < 5000; ++i) ops::scale(x, 2.0);
  CHECK(held == Tensor<double>(Shape{2}, {1.0, 2.0}));
}
