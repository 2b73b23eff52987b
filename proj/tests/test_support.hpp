#pragma once

#include <vector>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/ops.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg::testing {

template <typename T = double>
inline Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// sum(x * R) for a fixed random R, so every output coordinate matters.
template <typename T>
inline Var<T> random_projection(const Var<T>& x, std::uint64_t seed) {
  Rng rng(seed, 99);
  auto r = x.tape().constant(random_tensor<T>(x.shape(), rng));
  return ops::sum(ops::mul(x, r));
}

template <typename T>
inline double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace ctxseg::testing
