#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxseg/autodiff.hpp"

namespace ctxseg {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam. Moments are kept per parameter tensor, in the
/// parameter's precision; the update itself is evaluated in double.
template <typename T>
class Adam {
 public:
  Adam(AdamConfig config, const ParameterSet<T>& params);

  /// Applies one update in place. Throws ErrorCode::non_finite (leaving
  /// parameters and moments untouched) if any gradient is NaN/Inf.
  void step(ParameterSet<T>& params, std::span<const Tensor<T>> grads);

  const AdamConfig& config() const noexcept { return config_; }
  std::uint64_t steps() const noexcept { return t_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  /// Restore from a checkpoint; shapes must match the current moments.
  void restore(std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace ctxseg
