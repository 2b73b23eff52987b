#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ctxseg/autodiff.hpp"

// Differentiable primitives. Every op validates shapes, checks its output for
// NaN/Inf (ErrorCode::non_finite) and records a backward closure on the tape
// of its first argument. All inputs must live on the same tape.
namespace ctxseg::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, double factor);
template <typename T> Var<T> add_scalar(const Var<T>& a, double c);

/// x + b where b's shape equals the trailing dimensions of x (e.g. a bias row).
template <typename T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& b);

/// [m x k] . [k x n]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// [m x k] . [n x k]^T
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
/// Batched [B x m x k] . [B x k x n]
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b);
/// Batched [B x m x k] . [B x n x k]^T
template <typename T> Var<T> bmm_nt(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> transpose(const Var<T>& a);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& axes);
template <typename T> Var<T> reshape(const Var<T>& x, const Shape& shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
/// Rows [start, start+count) along axis 0.
template <typename T> Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count);
/// Select rows along axis 0; index -1 produces a zero row. Backward scatter-adds.
template <typename T> Var<T> gather_rows(const Var<T>& x, std::span<const std::int64_t> index);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
/// Sum over the last axis: [.. x d] -> [..]; rank-1 input gives shape {1}.
template <typename T> Var<T> sum_last(const Var<T>& x);

template <typename T> Var<T> relu(const Var<T>& x);
/// tanh-free exact GELU: x * Phi(x).
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> square(const Var<T>& x);
/// sqrt with zero gradient at exactly 0 (used for distances that may vanish).
template <typename T> Var<T> sqrt(const Var<T>& x);

template <typename T> Var<T> softmax(const Var<T>& x, std::size_t axis);
/// Normalise over the last axis, then apply per-channel gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps = 1e-5);
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x, double eps = 1e-12);

/// Mean over rows of -log softmax(logits)[row, label[row]]. logits: [N x K].
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels,
                             std::span<const double> class_weights = {});

/// Forward-only softmax along the last axis of a plain tensor.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);

}  // namespace ctxseg::ops
