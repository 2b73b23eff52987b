#include "ctxseg/layers.hpp"

#include <cmath>

#include "ctxseg/ops.hpp"

namespace ctxseg {

template <typename T>
LinearLayer add_linear(ParameterSet<T>& params, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng) {
  Tensor<T> w(Shape{in, out});
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-a, a));
  LinearLayer layer;
  layer.weight = params.add(name + ".weight", std::move(w));
  layer.bias = params.add(name + ".bias", Tensor<T>(Shape{out}));
  layer.in = in;
  layer.out = out;
  return layer;
}

template <typename T>
NormLayer add_norm(ParameterSet<T>& params, const std::string& name, std::size_t dim) {
  NormLayer layer;
  layer.gain = params.add(name + ".gain", Tensor<T>::full(Shape{dim}, T(1)));
  layer.bias = params.add(name + ".bias", Tensor<T>(Shape{dim}));
  return layer;
}

template <typename T>
Var<T> apply_linear(ParamBinding<T>& bind, const LinearLayer& layer, const Var<T>& x) {
  return ops::add_broadcast(ops::matmul(x, bind(layer.weight)), bind(layer.bias));
}

template <typename T>
Var<T> apply_norm(ParamBinding<T>& bind, const NormLayer& layer, const Var<T>& x) {
  return ops::layer_norm(x, bind(layer.gain), bind(layer.bias));
}

#define CTXSEG_INSTANTIATE_LAYERS(T)                                                          \
  template LinearLayer add_linear(ParameterSet<T>&, const std::string&, std::size_t,          \
                                  std::size_t, Rng&);                                         \
  template NormLayer add_norm(ParameterSet<T>&, const std::string&, std::size_t);             \
  template Var<T> apply_linear(ParamBinding<T>&, const LinearLayer&, const Var<T>&);          \
  template Var<T> apply_norm(ParamBinding<T>&, const NormLayer&, const Var<T>&);

CTXSEG_INSTANTIATE_LAYERS(float)
CTXSEG_INSTANTIATE_LAYERS(double)

}  // namespace ctxseg
