#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctxseg/autodiff.hpp"

namespace ctxseg {

struct GradCheckOptions {
  double step = 1e-5;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double denominator_floor = 1e-6;
  /// Coordinates checked per tensor; 0 checks every coordinate.
  std::size_t samples_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// f builds a scalar from bound parameters and input variables on a fresh tape.
using ScalarFunction =
    std::function<Var<double>(ParamBinding<double>&, std::span<const Var<double>>)>;

/// Compares reverse-mode gradients of f against central finite differences
/// for every parameter tensor and every input tensor.
GradCheckReport check_gradients(const ParameterSet<double>& params,
                                 const std::vector<Tensor<double>>& inputs, const ScalarFunction& f,
                                 const GradCheckOptions& options = {});

}  // namespace ctxseg
