#pragma once

#include <string>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/rng.hpp"

namespace ctxseg {

struct LinearLayer {
  std::size_t weight = 0;  // [in x out]
  std::size_t bias = 0;    // [out]
  std::size_t in = 0;
  std::size_t out = 0;
};

struct NormLayer {
  std::size_t gain = 0;
  std::size_t bias = 0;
};

/// Xavier-uniform weight, zero bias. Names are `<name>.weight` / `<name>.bias`.
template <typename T>
LinearLayer add_linear(ParameterSet<T>& params, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng);

/// Unit gain, zero bias.
template <typename T>
NormLayer add_norm(ParameterSet<T>& params, const std::string& name, std::size_t dim);

/// x: [N x in] -> [N x out]
template <typename T>
Var<T> apply_linear(ParamBinding<T>& bind, const LinearLayer& layer, const Var<T>& x);

template <typename T>
Var<T> apply_norm(ParamBinding<T>& bind, const NormLayer& layer, const Var<T>& x);

}  // namespace ctxseg
