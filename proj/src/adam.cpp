#include "ctxseg/adam.hpp"

#include <cmath>

namespace ctxseg {

template <typename T>
Adam<T>::Adam(AdamConfig config, const ParameterSet<T>& params) : config_(config) {
  if (!(config.learning_rate > 0.0) || !(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
      !(config.beta2 >= 0.0 && config.beta2 < 1.0) || !(config.epsilon > 0.0)) {
    fail(ErrorCode::invalid_argument, "invalid Adam hyperparameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_.emplace_back(params.value(i).shape());
    v_.emplace_back(params.value(i).shape());
  }
}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params, std::span<const Tensor<T>> grads) {
  if (grads.size() != params.size() || params.size() != m_.size()) {
    fail(ErrorCode::shape_mismatch, "adam: gradient count does not match parameter count");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape()) {
      fail(ErrorCode::shape_mismatch, "adam: gradient shape mismatch for " + params.name(i));
    }
    if (!grads[i].all_finite()) fail(ErrorCode::non_finite, "adam: non-finite gradient for " + params.name(i));
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto p = params.value(i).data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1;
      const double vhat = vj / c2;
      p[j] = static_cast<T>(p[j] - config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon));
    }
  }
}

template <typename T>
void Adam<T>::restore(std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    fail(ErrorCode::shape_mismatch, "adam restore: moment count mismatch");
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
      fail(ErrorCode::shape_mismatch, "adam restore: moment shape mismatch");
    }
  }
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace ctxseg
