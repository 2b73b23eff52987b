#include "ctxseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace ctxseg::ops {
namespace {

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::shape_mismatch,
         std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Var<T>& a, std::size_t rank) {
  if (a.shape().size() != rank) {
    fail(ErrorCode::shape_mismatch, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_str(a.shape()));
  }
}

// C[m x n] += A[m x k] . B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[k x m]^T . B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] . B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(m, n, k, a, bt.data(), c);
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_strides = strides_of(in_shape);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[axes[i]];
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  const auto src = x.data();
  auto dst = out.data();
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    dst[flat] = src[offset];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        offset += step[d];
        break;
      }
      offset -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return out;
}

struct AxisSplit {
  std::size_t outer, axis, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
Var<T> unary(const char* op, const Var<T>& x, T (*f)(T), T (*df)(T)) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(op, std::move(out), {x}, [xid, df](Tape<T>& tape, std::size_t self) {
    if (!tape.requires_grad(xid)) return;
    const auto& g = tape.grad_of(self);
    const auto& xv = tape.value(xid);
    auto& gx = tape.accumulate_grad(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i]);
  });
}

template <typename T>
T relu_f(T x) { return x > T(0) ? x : T(0); }
template <typename T>
T relu_df(T x) { return x > T(0) ? T(1) : T(0); }

template <typename T>
T gelu_f(T x) {
  const double xd = x;
  return static_cast<T>(0.5 * xd * (1.0 + std::erf(xd / std::numbers::sqrt2)));
}
template <typename T>
T gelu_df(T x) {
  const double xd = x;
  const double cdf = 0.5 * (1.0 + std::erf(xd / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * std::numbers::pi);
  return static_cast<T>(cdf + xd * pdf);
}

template <typename T>
T square_f(T x) { return x * x; }
template <typename T>
T square_df(T x) { return T(2) * x; }

template <typename T>
T sqrt_f(T x) {
  if (x < T(0)) fail(ErrorCode::non_finite, "sqrt of negative value");
  return std::sqrt(x);
}
template <typename T>
T sqrt_df(T x) { return x > T(0) ? T(0.5) / std::sqrt(x) : T(0); }

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [aid, bid](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    for (const auto id : {aid, bid}) {
      if (!tape.requires_grad(id)) continue;
      auto& gi = tape.accumulate_grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().record("sub", std::move(out), {a, b}, [aid, bid](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    if (tape.requires_grad(aid)) {
      auto& ga = tape.accumulate_grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.requires_grad(bid)) {
      auto& gb = tape.accumulate_grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [aid, bid](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    if (tape.requires_grad(aid)) {
      const auto& bv = tape.value(bid);
      auto& ga = tape.accumulate_grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.requires_grad(bid)) {
      const auto& av = tape.value(aid);
      auto& gb = tape.accumulate_grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double factor) {
  const T f = static_cast<T>(factor);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * f;
  const auto aid = a.id();
  return a.tape().record("scale", std::move(out), {a}, [aid, f](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    auto& ga = tape.accumulate_grad(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double c) {
  const T cv = static_cast<T>(c);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + cv;
  const auto aid = a.id();
  return a.tape().record("add_scalar", std::move(out), {a}, [aid](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    auto& ga = tape.accumulate_grad(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& b) {
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    fail(ErrorCode::shape_mismatch,
         "add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  }
  const std::size_t inner = b.value().size();
  const std::size_t outer = x.value().size() / inner;
  Tensor<T> out(xs);
  const auto& xv = x.value();
  const auto& bv = b.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] + bv[i];
  }
  const auto xid = x.id(), bid = b.id();
  return x.tape().record("add_broadcast", std::move(out), {x, b},
                         [xid, bid, inner, outer](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad_of(self);
                           if (tape.requires_grad(xid)) {
                             auto& gx = tape.accumulate_grad(xid);
                             for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           }
                           if (tape.requires_grad(bid)) {
                             auto& gb = tape.accumulate_grad(bid);
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
                             }
                           }
                         });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    fail(ErrorCode::shape_mismatch, "matmul: " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  gemm_nn(m, n, k, a.value().data().data(), b.value().data().data(), out.data().data());
  const auto aid = a.id(), bid = b.id();
  return a.tape().record("matmul", std::move(out), {a, b},
                         [aid, bid, m, n, k](Tape<T>& tape, std::size_t self) {
                           const T* g = tape.grad_of(self).data().data();
                           if (tape.requires_grad(aid)) {
                             gemm_nt(m, k, n, g, tape.value(bid).data().data(),
                                     tape.accumulate_grad(aid).data().data());
                           }
                           if (tape.requires_grad(bid)) {
                             gemm_tn(k, n, m, tape.value(aid).data().data(), g,
                                     tape.accumulate_grad(bid).data().data());
                           }
                         });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    fail(ErrorCode::shape_mismatch,
         "matmul_nt: " + shape_str(a.shape()) + " . " + shape_str(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  gemm_nt(m, n, k, a.value().data().data(), b.value().data().data(), out.data().data());
  const auto aid = a.id(), bid = b.id();
  return a.tape().record("matmul_nt", std::move(out), {a, b},
                         [aid, bid, m, n, k](Tape<T>& tape, std::size_t self) {
                           const T* g = tape.grad_of(self).data().data();
                           if (tape.requires_grad(aid)) {
                             gemm_nn(m, k, n, g, tape.value(bid).data().data(),
                                     tape.accumulate_grad(aid).data().data());
                           }
                           if (tape.requires_grad(bid)) {
                             gemm_tn(n, k, m, g, tape.value(aid).data().data(),
                                     tape.accumulate_grad(bid).data().data());
                           }
                         });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  if (b.shape()[0] != batch || b.shape()[1] != k) {
    fail(ErrorCode::shape_mismatch, "bmm: " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nn(m, n, k, a.value().data().data() + i * m * k, b.value().data().data() + i * k * n,
            out.data().data() + i * m * n);
  }
  const auto aid = a.id(), bid = b.id();
  return a.tape().record(
      "bmm", std::move(out), {a, b}, [aid, bid, batch, m, n, k](Tape<T>& tape, std::size_t self) {
        const T* g = tape.grad_of(self).data().data();
        const bool ga = tape.requires_grad(aid), gb = tape.requires_grad(bid);
        T* da = ga ? tape.accumulate_grad(aid).data().data() : nullptr;
        T* db = gb ? tape.accumulate_grad(bid).data().data() : nullptr;
        const T* av = tape.value(aid).data().data();
        const T* bv = tape.value(bid).data().data();
        for (std::size_t i = 0; i < batch; ++i) {
          if (ga) gemm_nt(m, k, n, g + i * m * n, bv + i * k * n, da + i * m * k);
          if (gb) gemm_tn(k, n, m, av + i * m * k, g + i * m * n, db + i * k * n);
        }
      });
}

template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
  require_rank("bmm_nt", a, 3);
  require_rank("bmm_nt", b, 3);
  const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[1];
  if (b.shape()[0] != batch || b.shape()[2] != k) {
    fail(ErrorCode::shape_mismatch,
         "bmm_nt: " + shape_str(a.shape()) + " . " + shape_str(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nt(m, n, k, a.value().data().data() + i * m * k, b.value().data().data() + i * n * k,
            out.data().data() + i * m * n);
  }
  const auto aid = a.id(), bid = b.id();
  return a.tape().record(
      "bmm_nt", std::move(out), {a, b}, [aid, bid, batch, m, n, k](Tape<T>& tape, std::size_t self) {
        const T* g = tape.grad_of(self).data().data();
        const bool ga = tape.requires_grad(aid), gb = tape.requires_grad(bid);
        T* da = ga ? tape.accumulate_grad(aid).data().data() : nullptr;
        T* db = gb ? tape.accumulate_grad(bid).data().data() : nullptr;
        const T* av = tape.value(aid).data().data();
        const T* bv = tape.value(bid).data().data();
        for (std::size_t i = 0; i < batch; ++i) {
          if (ga) gemm_nn(m, k, n, g + i * m * n, bv + i * n * k, da + i * m * k);
          if (gb) gemm_tn(n, k, m, g + i * m * n, av + i * m * k, db + i * n * k);
        }
      });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank("transpose", a, 2);
  return permute(a, {1, 0});
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.shape().size();
  if (axes.size() != rank) fail(ErrorCode::shape_mismatch, "permute: axes/rank mismatch");
  std::vector<std::size_t> inverse(rank, rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || inverse[axes[i]] != rank) {
      fail(ErrorCode::invalid_argument, "permute: axes are not a permutation");
    }
    inverse[axes[i]] = i;
  }
  const auto xid = x.id();
  return x.tape().record("permute", permute_tensor(x.value(), axes), {x},
                         [xid, inverse](Tape<T>& tape, std::size_t self) {
                           const auto back = permute_tensor(tape.grad_of(self), inverse);
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
                         });
}

template <typename T>
Var<T> reshape(const Var<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.value().size()) {
    fail(ErrorCode::shape_mismatch, "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto xid = x.id();
  return x.tape().record("reshape", x.value().reshaped(shape), {x},
                         [xid](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad_of(self);
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::invalid_argument, "concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) fail(ErrorCode::invalid_argument, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) fail(ErrorCode::shape_mismatch, "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        fail(ErrorCode::shape_mismatch, "concat: " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit outs = split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, chunk, offset;
  std::size_t running = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.shape()[axis] * outs.inner;
    ids.push_back(p.id());
    chunk.push_back(c);
    offset.push_back(running);
    const auto& pv = p.value();
    for (std::size_t o = 0; o < outs.outer; ++o) {
      std::copy_n(pv.data().begin() + o * c, c,
                  out.data().begin() + o * outs.axis * outs.inner + running);
    }
    running += c;
  }
  const std::size_t row = outs.axis * outs.inner;
  const std::size_t outer = outs.outer;
  return parts[0].tape().record(
      "concat", std::move(out), parts, [ids, chunk, offset, row, outer](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad_of(self);
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (!tape.requires_grad(ids[p])) continue;
          auto& gp = tape.accumulate_grad(ids[p]);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < chunk[p]; ++i) gp[o * chunk[p] + i] += g[o * row + offset[p] + i];
          }
        }
      });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  const Shape& s = x.shape();
  if (count == 0 || start + count > s[0]) fail(ErrorCode::shape_mismatch, "slice_rows out of range");
  const std::size_t row = x.value().size() / s[0];
  Shape out_shape = s;
  out_shape[0] = count;
  std::vector<T> data(x.value().data().begin() + start * row,
                      x.value().data().begin() + (start + count) * row);
  const auto xid = x.id();
  const std::size_t base = start * row;
  return x.tape().record("slice_rows", Tensor<T>(out_shape, std::move(data)), {x},
                         [xid, base](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad_of(self);
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[base + i] += g[i];
                         });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::int64_t> index) {
  const Shape& s = x.shape();
  if (index.empty()) fail(ErrorCode::shape_mismatch, "gather_rows with no indices");
  const std::size_t rows = s[0];
  const std::size_t row = x.value().size() / rows;
  Shape out_shape = s;
  out_shape[0] = index.size();
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = index[i];
    if (r < -1 || r >= static_cast<std::int64_t>(rows)) {
      fail(ErrorCode::invalid_argument, "gather_rows: index " + std::to_string(r) + " out of range");
    }
    if (r >= 0) std::copy_n(xv.data().begin() + r * row, row, out.data().begin() + i * row);
  }
  const auto xid = x.id();
  std::vector<std::int64_t> idx(index.begin(), index.end());
  return x.tape().record("gather_rows", std::move(out), {x},
                         [xid, idx = std::move(idx), row](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad_of(self);
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t i = 0; i < idx.size(); ++i) {
                             if (idx[i] < 0) continue;
                             T* dst = gx.data().data() + idx[i] * row;
                             const T* src = g.data().data() + i * row;
                             for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
                           }
                         });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (const T v : x.value().data()) acc += v;
  const auto xid = x.id();
  return x.tape().record("sum", Tensor<T>::scalar(static_cast<T>(acc)), {x},
                         [xid](Tape<T>& tape, std::size_t self) {
                           const T g = tape.grad_of(self)[0];
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                         });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().size();
  double acc = 0.0;
  for (const T v : x.value().data()) acc += v;
  const auto xid = x.id();
  return x.tape().record("mean", Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {x},
                         [xid, n](Tape<T>& tape, std::size_t self) {
                           const T g = tape.grad_of(self)[0] / static_cast<T>(n);
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                         });
}

template <typename T>
Var<T> sum_last(const Var<T>& x) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  const std::size_t rows = x.value().size() / d;
  Shape out_shape(s.begin(), s.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += xv[r * d + j];
    out[r] = static_cast<T>(acc);
  }
  const auto xid = x.id();
  return x.tape().record("sum_last", std::move(out), {x}, [xid, d, rows](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    auto& gx = tape.accumulate_grad(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r];
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary<T>("relu", x, &relu_f<T>, &relu_df<T>);
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return unary<T>("gelu", x, &gelu_f<T>, &gelu_df<T>);
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary<T>("square", x, &square_f<T>, &square_df<T>);
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return unary<T>("sqrt", x, &sqrt_f<T>, &sqrt_df<T>);
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) fail(ErrorCode::invalid_argument, "softmax: axis out of range");
  const AxisSplit sp = split_axis(s, axis);
  const auto& xv = x.value();
  Tensor<T> out(s);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.axis * sp.inner + in;
      T mx = xv[base];
      for (std::size_t a = 1; a < sp.axis; ++a) mx = std::max(mx, xv[base + a * sp.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < sp.axis; ++a) {
        const double e = std::exp(static_cast<double>(xv[base + a * sp.inner] - mx));
        out[base + a * sp.inner] = static_cast<T>(e);
        z += e;
      }
      for (std::size_t a = 0; a < sp.axis; ++a) {
        out[base + a * sp.inner] = static_cast<T>(out[base + a * sp.inner] / z);
      }
    }
  }
  const auto xid = x.id();
  return x.tape().record("softmax", std::move(out), {x}, [xid, sp](Tape<T>& tape, std::size_t self) {
    const auto& g = tape.grad_of(self);
    const auto& y = tape.value(self);
    auto& gx = tape.accumulate_grad(xid);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.axis * sp.inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < sp.axis; ++a) {
          const std::size_t i = base + a * sp.inner;
          dot += static_cast<double>(g[i]) * y[i];
        }
        for (std::size_t a = 0; a < sp.axis; ++a) {
          const std::size_t i = base + a * sp.inner;
          gx[i] += static_cast<T>(y[i] * (g[i] - dot));
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
  const std::size_t c = x.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c}) {
    fail(ErrorCode::shape_mismatch, "layer_norm: gain/bias must be [" + std::to_string(c) + "]");
  }
  const std::size_t rows = x.value().size() / c;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.value().size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data().data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(rs);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = static_cast<T>((row[j] - mu) * rs);
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  const auto xid = x.id(), gid = gain.id(), bid = bias.id();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [xid, gid, bid, c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tape, std::size_t self) {
        const auto& g = tape.grad_of(self);
        const auto& gv = tape.value(gid);
        if (tape.requires_grad(gid)) {
          auto& gg = tape.accumulate_grad(gid);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[r * c + j] * xhat[r * c + j];
          }
        }
        if (tape.requires_grad(bid)) {
          auto& gb = tape.accumulate_grad(bid);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
          }
        }
        if (tape.requires_grad(xid)) {
          auto& gx = tape.accumulate_grad(xid);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = static_cast<double>(g[r * c + j]) * gv[j];
              m1 += dh;
              m2 += dh * xhat[r * c + j];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = static_cast<double>(g[r * c + j]) * gv[j];
              gx[r * c + j] += static_cast<T>(rstd[r] * (dh - m1 - xhat[r * c + j] * m2));
            }
          }
        }
      });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, double eps) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.value().size() / d;
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(xv[r * d + j]) * xv[r * d + j];
    const double n = std::max(std::sqrt(ss), eps);
    norms[r] = static_cast<T>(n);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<T>(xv[r * d + j] / n);
  }
  const auto xid = x.id();
  return x.tape().record("l2_normalize_rows", std::move(out), {x},
                         [xid, d, rows, norms = std::move(norms)](Tape<T>& tape, std::size_t self) {
                           const auto& g = tape.grad_of(self);
                           const auto& y = tape.value(self);
                           auto& gx = tape.accumulate_grad(xid);
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[r * d + j]) * y[r * d + j];
                             for (std::size_t j = 0; j < d; ++j) {
                               gx[r * d + j] += static_cast<T>((g[r * d + j] - y[r * d + j] * dot) / norms[r]);
                             }
                           }
                         });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels,
                             std::span<const double> class_weights) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) {
    fail(ErrorCode::shape_mismatch, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                        " labels for " + std::to_string(n) + " rows");
  }
  if (!class_weights.empty() && class_weights.size() != k) {
    fail(ErrorCode::shape_mismatch, "softmax_cross_entropy: " + std::to_string(class_weights.size()) +
                                        " class weights for " + std::to_string(k) + " classes");
  }
  const auto& z = logits.value();
  std::vector<T> probs(z.size());
  std::vector<double> row_weight(n, 1.0);
  double total = 0.0, weight_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      fail(ErrorCode::invalid_argument, "softmax_cross_entropy: label " + std::to_string(label) +
                                            " outside [0," + std::to_string(k) + ")");
    }
    if (!class_weights.empty()) row_weight[i] = class_weights[static_cast<std::size_t>(label)];
    const T* row = z.data().data() + i * k;
    const T mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(s) + mx;
    total += row_weight[i] * (lse - row[label]);
    weight_sum += row_weight[i];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  if (!(weight_sum > 0.0)) fail(ErrorCode::invalid_argument, "softmax_cross_entropy: total class weight is zero");
  const auto lid = logits.id();
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return logits.tape().record(
      "softmax_cross_entropy", Tensor<T>::scalar(static_cast<T>(total / weight_sum)), {logits},
      [lid, n, k, weight_sum, probs = std::move(probs), lab = std::move(lab),
       row_weight = std::move(row_weight)](Tape<T>& tape, std::size_t self) {
        const double g = static_cast<double>(tape.grad_of(self)[0]) / weight_sum;
        auto& gz = tape.accumulate_grad(lid);
        for (std::size_t i = 0; i < n; ++i) {
          const T gi = static_cast<T>(g * row_weight[i]);
          for (std::size_t j = 0; j < k; ++j) gz[i * k + j] += gi * probs[i * k + j];
          gz[i * k + static_cast<std::size_t>(lab[i])] -= gi;
        }
      });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.size() / k;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.data().data() + r * k;
    const T mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
  }
  return out;
}

#define CTXSEG_INSTANTIATE_OPS(T)                                                          \
  template Var<T> add(const Var<T>&, const Var<T>&);                                       \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                       \
  template Var<T> scale(const Var<T>&, double);                                            \
  template Var<T> add_scalar(const Var<T>&, double);                                       \
  template Var<T> add_broadcast(const Var<T>&, const Var<T>&);                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                    \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                 \
  template Var<T> bmm(const Var<T>&, const Var<T>&);                                       \
  template Var<T> bmm_nt(const Var<T>&, const Var<T>&);                                    \
  template Var<T> transpose(const Var<T>&);                                                \
  template Var<T> permute(const Var<T>&, const std::vector<std::size_t>&);                 \
  template Var<T> reshape(const Var<T>&, const Shape&);                                    \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                         \
  template Var<T> slice_rows(const Var<T>&, std::size_t, std::size_t);                     \
  template Var<T> gather_rows(const Var<T>&, std::span<const std::int64_t>);               \
  template Var<T> sum(const Var<T>&);                                                      \
  template Var<T> mean(const Var<T>&);                                                     \
  template Var<T> sum_last(const Var<T>&);                                                 \
  template Var<T> relu(const Var<T>&);                                                     \
  template Var<T> gelu(const Var<T>&);                                                     \
  template Var<T> square(const Var<T>&);                                                   \
  template Var<T> sqrt(const Var<T>&);                                                     \
  template Var<T> softmax(const Var<T>&, std::size_t);                                     \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);         \
  template Var<T> l2_normalize_rows(const Var<T>&, double);                                \
  template Var<T> softmax_cross_entropy(const Var<T>&, std::span<const std::int32_t>, std::span<const double>);     \
  template Tensor<T> softmax_rows(const Tensor<T>&);

CTXSEG_INSTANTIATE_OPS(float)
CTXSEG_INSTANTIATE_OPS(double)

}  // namespace ctxseg::ops
