#pragma once

// Forward operations with registered backward rules. There is no implicit
// broadcasting: apart from scalar-tensor multiplication, operands must have
// identical shapes, and `expand` is the explicit way to broadcast size-1 axes.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "graph.hpp"

namespace uldm {

inline constexpr double kLayerNormEps = 1e-6;

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m,n] (+)= op(A) * op(B) on row-major buffers.
template <class T>
void gemm(const T* A, bool ta, const T* B, bool tb, T* C, std::size_t m, std::size_t n, std::size_t k,
          bool accumulate) {
  using Map = Eigen::Map<RowMat<T>>;
  using CMap = Eigen::Map<const RowMat<T>>;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  Map c(C, M, N);
  CMap a(A, ta ? K : M, ta ? M : K);
  CMap b(B, tb ? N : K, tb ? K : N);
  if (!accumulate) c.setZero();
  if (!ta && !tb)
    c.noalias() += a * b;
  else if (ta && !tb)
    c.noalias() += a.transpose() * b;
  else if (!ta && tb)
    c.noalias() += a * b.transpose();
  else
    c.noalias() += a.transpose() * b.transpose();
}

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto N = static_cast<std::ptrdiff_t>(n);
  while (i < 0 || i >= N) {
    if (i < 0) i = -i;
    if (i >= N) i = 2 * (N - 1) - i;
  }
  return static_cast<std::size_t>(i);
}

inline void require(bool ok, OpKind k, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op_name(k)), detail);
}

template <class T>
void require_same(const DiffTensor<T>& a, const DiffTensor<T>& b, OpKind k) {
  require(a.shape() == b.shape(), k, to_string(a.shape()) + " vs " + to_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
DiffTensor<T> matmul(DiffTensor<T> a, DiffTensor<T> b) {
  using detail::require;
  require(a.shape().size() == 2 && b.shape().size() == 2, OpKind::MatMul,
          "expects rank-2 operands, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, OpKind::MatMul, "inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> out({m, n});
  detail::gemm(a.value().data(), false, b.value().data(), false, out.data(), m, n, k, false);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::MatMul, std::move(out), {a, b}, [ia, ib, m, n, k](Graph<T>& g, const auto& self) {
    const T* gy = self.grad.data();
    if (T* da = g.accumulate(ia)) detail::gemm(gy, false, g.value(ib).data(), true, da, m, k, n, true);
    if (T* db = g.accumulate(ib)) detail::gemm(g.value(ia).data(), true, gy, false, db, k, n, m, true);
  });
}

/// [..., m, k] x [..., k, n] with identical leading extents.
template <class T>
DiffTensor<T> batched_matmul(DiffTensor<T> a, DiffTensor<T> b) {
  using detail::require;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() >= 2 && sa.size() == sb.size(), OpKind::BatchedMatMul,
          "rank mismatch " + to_string(sa) + " x " + to_string(sb));
  const std::size_t r = sa.size();
  require(std::equal(sa.begin(), sa.end() - 2, sb.begin()), OpKind::BatchedMatMul,
          "leading extents differ " + to_string(sa) + " x " + to_string(sb));
  const std::size_t m = sa[r - 2], k = sa[r - 1], n = sb[r - 1];
  require(sb[r - 2] == k, OpKind::BatchedMatMul, "inner extents differ " + to_string(sa) + " x " + to_string(sb));
  const std::size_t batch = numel(Shape(sa.begin(), sa.end() - 2));
  Shape so(sa.begin(), sa.end() - 2);
  so.push_back(m);
  so.push_back(n);
  Tensor<T> out(so);
  const T* A = a.value().data();
  const T* B = b.value().data();
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm(A + i * m * k, false, B + i * k * n, false, out.data() + i * m * n, m, n, k, false);
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::BatchedMatMul, std::move(out), {a, b},
                          [ia, ib, m, n, k, batch](Graph<T>& g, const auto& self) {
                            const T* gy = self.grad.data();
                            const T* A = g.value(ia).data();
                            const T* B = g.value(ib).data();
                            T* da = g.accumulate(ia);
                            T* db = g.accumulate(ib);
                            for (std::size_t i = 0; i < batch; ++i) {
                              if (da) detail::gemm(gy + i * m * n, false, B + i * k * n, true, da + i * m * k, m, k, n, true);
                              if (db) detail::gemm(A + i * m * k, true, gy + i * m * n, false, db + i * k * n, k, n, m, true);
                            }
                          });
}

/// Swaps the last two axes.
template <class T>
DiffTensor<T> transpose(DiffTensor<T> x) {
  const Shape& s = x.shape();
  detail::require(s.size() >= 2, OpKind::Transpose, "needs rank >= 2, got " + to_string(s));
  const std::size_t r = s.size(), rows = s[r - 2], cols = s[r - 1];
  const std::size_t batch = x.size() / (rows * cols);
  Shape so = s;
  std::swap(so[r - 2], so[r - 1]);
  Tensor<T> out(so);
  const T* src = x.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[b * rows * cols + j * rows + i] = src[b * rows * cols + i * cols + j];
  const auto ix = x.id();
  return x.graph().record(OpKind::Transpose, std::move(out), {x}, [ix, rows, cols, batch](Graph<T>& g, const auto& self) {
    T* dx = g.accumulate(ix);
    const T* gy = self.grad.data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dx[b * rows * cols + i * cols + j] += gy[b * rows * cols + j * rows + i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
DiffTensor<T> reshape(DiffTensor<T> x, Shape shape) {
  detail::require(numel(shape) == x.size(), OpKind::Reshape, to_string(x.shape()) + " -> " + to_string(shape));
  Tensor<T> out(std::move(shape), x.value().values());
  const auto ix = x.id();
  return x.graph().record(OpKind::Reshape, std::move(out), {x}, [ix](Graph<T>& g, const auto& self) {
    T* dx = g.accumulate(ix);
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

template <class T>
DiffTensor<T> concat(const std::vector<DiffTensor<T>>& xs, std::size_t axis) {
  detail::require(!xs.empty(), OpKind::Concat, "no operands");
  const Shape& s0 = xs[0].shape();
  detail::require(axis < s0.size(), OpKind::Concat, "axis out of range for " + to_string(s0));
  Shape so = s0;
  so[axis] = 0;
  std::vector<std::size_t> lens;
  for (auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    detail::require(ok, OpKind::Concat, to_string(s0) + " vs " + to_string(s) + " along axis " + std::to_string(axis));
    so[axis] += s[axis];
    lens.push_back(s[axis]);
  }
  const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s0.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s0.end()));
  Tensor<T> out(so);
  const std::size_t total = so[axis];
  std::size_t off = 0;
  std::vector<std::uint32_t> ids;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T* src = xs[i].value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * lens[i] * inner, lens[i] * inner, out.data() + (o * total + off) * inner);
    off += lens[i];
    ids.push_back(xs[i].id());
  }
  return xs[0].graph().record(OpKind::Concat, std::move(out), xs,
                              [ids, lens, outer, inner, total](Graph<T>& g, const auto& self) {
                                std::size_t off = 0;
                                for (std::size_t i = 0; i < ids.size(); ++i) {
                                  if (T* dx = g.accumulate(ids[i]))
                                    for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t j = 0; j < lens[i] * inner; ++j)
                                        dx[o * lens[i] * inner + j] += self.grad[(o * total + off) * inner + j];
                                  off += lens[i];
                                }
                              });
}

/// Contiguous range [start, start+length) along `axis`.
template <class T>
DiffTensor<T> slice(DiffTensor<T> x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  detail::require(axis < s.size() && start + length <= s[axis], OpKind::Slice,
                  "range [" + std::to_string(start) + "," + std::to_string(start + length) + ") on axis " +
                      std::to_string(axis) + " of " + to_string(s));
  Shape so = s;
  so[axis] = length;
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t full = s[axis];
  Tensor<T> out(so);
  const T* src = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src + (o * full + start) * inner, length * inner, out.data() + o * length * inner);
  const auto ix = x.id();
  return x.graph().record(OpKind::Slice, std::move(out), {x},
                          [ix, outer, inner, full, start, length](Graph<T>& g, const auto& self) {
                            T* dx = g.accumulate(ix);
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < length * inner; ++j)
                                dx[(o * full + start) * inner + j] += self.grad[o * length * inner + j];
                          });
}

template <class T>
std::vector<DiffTensor<T>> split(DiffTensor<T> x, std::size_t axis, std::size_t parts) {
  detail::require(axis < x.shape().size() && parts > 0 && x.dim(axis) % parts == 0, OpKind::Slice,
                  "cannot split " + to_string(x.shape()) + " into " + std::to_string(parts) + " parts");
  const std::size_t len = x.dim(axis) / parts;
  std::vector<DiffTensor<T>> out;
  for (std::size_t p = 0; p < parts; ++p) out.push_back(slice(x, axis, p * len, len));
  return out;
}

/// Explicit broadcast: every axis of `x` equals the target extent or is 1.
template <class T>
DiffTensor<T> expand(DiffTensor<T> x, Shape shape) {
  const Shape& s = x.shape();
  bool ok = s.size() == shape.size();
  for (std::size_t d = 0; ok && d < s.size(); ++d) ok = s[d] == shape[d] || s[d] == 1;
  detail::require(ok, OpKind::Expand, to_string(s) + " -> " + to_string(shape));
  const std::size_t r = s.size();
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t st = 1;
  for (std::size_t d = r; d-- > 0;) {
    in_stride[d] = s[d] == 1 ? 0 : st;
    st *= s[d];
  }
  // Map each output element to its source offset once.
  Tensor<T> out(shape);
  std::vector<std::size_t> src_index(out.size());
  {
    std::vector<std::size_t> ctr(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      src_index[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        if (++ctr[d] < shape[d]) {
          off += in_stride[d];
          break;
        }
        off -= in_stride[d] * (shape[d] - 1);
        ctr[d] = 0;
      }
    }
  }
  const T* src = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[src_index[i]];
  const auto ix = x.id();
  return x.graph().record(OpKind::Expand, std::move(out), {x},
                          [ix, idx = std::move(src_index)](Graph<T>& g, const auto& self) {
                            T* dx = g.accumulate(ix);
                            for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += self.grad[i];
                          });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
DiffTensor<T> add(DiffTensor<T> a, DiffTensor<T> b) {
  detail::require_same(a, b, OpKind::Add);
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Add, std::move(out), {a, b}, [ia, ib](Graph<T>& g, const auto& self) {
    for (auto id : {ia, ib})
      if (T* d = g.accumulate(id))
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <class T>
DiffTensor<T> sub(DiffTensor<T> a, DiffTensor<T> b) {
  detail::require_same(a, b, OpKind::Sub);
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Sub, std::move(out), {a, b}, [ia, ib](Graph<T>& g, const auto& self) {
    if (T* d = g.accumulate(ia))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    if (T* d = g.accumulate(ib))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
  });
}

template <class T>
DiffTensor<T> mul(DiffTensor<T> a, DiffTensor<T> b) {
  detail::require_same(a, b, OpKind::Mul);
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Mul, std::move(out), {a, b}, [ia, ib](Graph<T>& g, const auto& self) {
    const T* va = g.value(ia).data();
    const T* vb = g.value(ib).data();
    if (T* d = g.accumulate(ia))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * vb[i];
    if (T* d = g.accumulate(ib))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * va[i];
  });
}

template <class T>
DiffTensor<T> div(DiffTensor<T> a, DiffTensor<T> b) {
  detail::require_same(a, b, OpKind::Div);
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= pb[i];
  const auto ia = a.id(), ib = b.id();
  return a.graph().record(OpKind::Div, std::move(out), {a, b}, [ia, ib](Graph<T>& g, const auto& self) {
    const T* va = g.value(ia).data();
    const T* vb = g.value(ib).data();
    if (T* d = g.accumulate(ia))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] / vb[i];
    if (T* d = g.accumulate(ib))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i] * va[i] / (vb[i] * vb[i]);
  });
}

template <class T>
DiffTensor<T> scalar_mul(DiffTensor<T> x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= c;
  const auto ix = x.id();
  return x.graph().record(OpKind::ScalarMul, std::move(out), {x}, [ix, c](Graph<T>& g, const auto& self) {
    T* d = g.accumulate(ix);
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += c * self.grad[i];
  });
}

template <class T>
DiffTensor<T> add_scalar(DiffTensor<T> x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v += c;
  const auto ix = x.id();
  return x.graph().record(OpKind::AddScalar, std::move(out), {x}, [ix](Graph<T>& g, const auto& self) {
    T* d = g.accumulate(ix);
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

/// s * x where s holds a single element (the one permitted broadcast).
template <class T>
DiffTensor<T> scalar_tensor_mul(DiffTensor<T> s, DiffTensor<T> x) {
  detail::require(s.size() == 1, OpKind::ScalarTensorMul, "scale operand must have one element, got " + to_string(s.shape()));
  const T c = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= c;
  const auto is = s.id(), ix = x.id();
  return x.graph().record(OpKind::ScalarTensorMul, std::move(out), {s, x}, [is, ix](Graph<T>& g, const auto& self) {
    const T c = g.value(is)[0];
    const T* vx = g.value(ix).data();
    if (T* ds = g.accumulate(is)) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * vx[i];
      ds[0] += acc;
    }
    if (T* dx = g.accumulate(ix))
      for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += c * self.grad[i];
  });
}

/// Softmax over the last axis.
template <class T>
DiffTensor<T> softmax(DiffTensor<T> x) {
  detail::require(!x.shape().empty(), OpKind::Softmax, "scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= s;
  }
  const auto ix = x.id();
  return x.graph().record(OpKind::Softmax, std::move(out), {x}, [ix, n, rows](Graph<T>& g, const auto& self) {
    const T* y = self.value.data();
    T* dx = g.accumulate(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y + r * n;
      const T* gr = self.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) dx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Exact GELU, x * Phi(x).
template <class T>
DiffTensor<T> gelu(DiffTensor<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = T(0.5) * v * (T(1) + std::erf(v * T(M_SQRT1_2)));
  const auto ix = x.id();
  return x.graph().record(OpKind::Gelu, std::move(out), {x}, [ix](Graph<T>& g, const auto& self) {
    const T* vx = g.value(ix).data();
    T* dx = g.accumulate(ix);
    const T inv_sqrt_2pi = T(0.3989422804014327);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = vx[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
      const T pdf = inv_sqrt_2pi * std::exp(-T(0.5) * v * v);
      dx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <class T>
T softplus_value(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}

template <class T>
DiffTensor<T> softplus(DiffTensor<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = softplus_value(v);
  const auto ix = x.id();
  return x.graph().record(OpKind::Softplus, std::move(out), {x}, [ix](Graph<T>& g, const auto& self) {
    const T* vx = g.value(ix).data();
    T* dx = g.accumulate(ix);
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] / (T(1) + std::exp(-vx[i]));
  });
}

/// Normalises along `axis` with per-position affine gain and bias of length dim(axis).
template <class T>
DiffTensor<T> layer_norm(DiffTensor<T> x, std::size_t axis, DiffTensor<T> gamma, DiffTensor<T> beta) {
  const Shape& s = x.shape();
  detail::require(axis < s.size(), OpKind::LayerNorm, "axis out of range for " + to_string(s));
  const std::size_t len = s[axis];
  detail::require(gamma.shape() == Shape{len} && beta.shape() == Shape{len}, OpKind::LayerNorm,
                  "affine parameters must be [" + std::to_string(len) + "], got " + to_string(gamma.shape()) + " and " +
                      to_string(beta.shape()));
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const T* px = x.value().data();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(outer * inner);
  Tensor<T> out(s);
  std::vector<T> mean(inner), var(inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * len * inner;
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t a = 0; a < len; ++a)
      for (std::size_t p = 0; p < inner; ++p) mean[p] += px[base + a * inner + p];
    for (auto& m : mean) m /= T(len);
    for (std::size_t a = 0; a < len; ++a)
      for (std::size_t p = 0; p < inner; ++p) {
        const T d = px[base + a * inner + p] - mean[p];
        var[p] += d * d;
      }
    for (std::size_t p = 0; p < inner; ++p) inv_std[o * inner + p] = T(1) / std::sqrt(var[p] / T(len) + T(kLayerNormEps));
    for (std::size_t a = 0; a < len; ++a)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = base + a * inner + p;
        xhat[i] = (px[i] - mean[p]) * inv_std[o * inner + p];
        out[i] = gm[a] * xhat[i] + bt[a];
      }
  }
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(
      OpKind::LayerNorm, std::move(out), {x, gamma, beta},
      [ix, ig, ib, outer, len, inner, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g, const auto& self) {
        const T* gy = self.grad.data();
        const T* gm = g.value(ig).data();
        if (T* dg = g.accumulate(ig))
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < len; ++a)
              for (std::size_t p = 0; p < inner; ++p) {
                const std::size_t i = (o * len + a) * inner + p;
                dg[a] += gy[i] * xhat[i];
              }
        if (T* db = g.accumulate(ib))
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < len; ++a)
              for (std::size_t p = 0; p < inner; ++p) db[a] += gy[(o * len + a) * inner + p];
        if (T* dx = g.accumulate(ix)) {
          std::vector<T> m1(inner), m2(inner);
          for (std::size_t o = 0; o < outer; ++o) {
            std::fill(m1.begin(), m1.end(), T(0));
            std::fill(m2.begin(), m2.end(), T(0));
            for (std::size_t a = 0; a < len; ++a)
              for (std::size_t p = 0; p < inner; ++p) {
                const std::size_t i = (o * len + a) * inner + p;
                const T dxh = gy[i] * gm[a];
                m1[p] += dxh;
                m2[p] += dxh * xhat[i];
              }
            for (std::size_t a = 0; a < len; ++a)
              for (std::size_t p = 0; p < inner; ++p) {
                const std::size_t i = (o * len + a) * inner + p;
                const T dxh = gy[i] * gm[a];
                dx[i] += inv_std[o * inner + p] * (dxh - m1[p] / T(len) - xhat[i] * m2[p] / T(len));
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

/// Mean over the last two axes: [..., H, W] -> [...].
template <class T>
DiffTensor<T> mean_pool(DiffTensor<T> x) {
  const Shape& s = x.shape();
  detail::require(s.size() >= 3, OpKind::MeanPool, "needs rank >= 3, got " + to_string(s));
  const std::size_t area = s[s.size() - 2] * s[s.size() - 1];
  Shape so(s.begin(), s.end() - 2);
  Tensor<T> out(so);
  const T* px = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < area; ++p) acc += px[i * area + p];
    out[i] = acc / T(area);
  }
  const auto ix = x.id();
  return x.graph().record(OpKind::MeanPool, std::move(out), {x}, [ix, area](Graph<T>& g, const auto& self) {
    T* dx = g.accumulate(ix);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T v = self.grad[i] / T(area);
      for (std::size_t p = 0; p < area; ++p) dx[i * area + p] += v;
    }
  });
}

template <class T>
DiffTensor<T> sum(DiffTensor<T> x) {
  T acc = 0;
  for (T v : x.value().values()) acc += v;
  const auto ix = x.id();
  return x.graph().record(OpKind::Sum, Tensor<T>({1}, {acc}), {x}, [ix](Graph<T>& g, const auto& self) {
    T* dx = g.accumulate(ix);
    const std::size_t n = g.value(ix).size();
    for (std::size_t i = 0; i < n; ++i) dx[i] += self.grad[0];
  });
}

/// Sum of absolute values.
template <class T>
DiffTensor<T> l1_sum(DiffTensor<T> x) {
  T acc = 0;
  for (T v : x.value().values()) acc += std::abs(v);
  const auto ix = x.id();
  return x.graph().record(OpKind::L1Sum, Tensor<T>({1}, {acc}), {x}, [ix](Graph<T>& g, const auto& self) {
    T* dx = g.accumulate(ix);
    const T* vx = g.value(ix).data();
    const std::size_t n = g.value(ix).size();
    for (std::size_t i = 0; i < n; ++i) dx[i] += self.grad[0] * T((vx[i] > 0) - (vx[i] < 0));
  });
}

/// Euclidean norm over the trailing `trailing` axes: [..., a, b] -> [...].
template <class T>
DiffTensor<T> l2_norm(DiffTensor<T> x, std::size_t trailing) {
  const Shape& s = x.shape();
  detail::require(trailing >= 1 && trailing <= s.size(), OpKind::L2Norm,
                  "cannot reduce " + std::to_string(trailing) + " axes of " + to_string(s));
  Shape so(s.begin(), s.end() - static_cast<std::ptrdiff_t>(trailing));
  if (so.empty()) so.push_back(1);
  const std::size_t block = numel(Shape(s.end() - static_cast<std::ptrdiff_t>(trailing), s.end()));
  Tensor<T> out(so);
  const T* px = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < block; ++p) acc += px[i * block + p] * px[i * block + p];
    out[i] = std::sqrt(acc);
  }
  const auto ix = x.id();
  return x.graph().record(OpKind::L2Norm, std::move(out), {x}, [ix, block](Graph<T>& g, const auto& self) {
    T* dx = g.accumulate(ix);
    const T* vx = g.value(ix).data();
    const T* nrm = self.value.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (nrm[i] == T(0)) continue;
      const T sc = self.grad[i] / nrm[i];
      for (std::size_t p = 0; p < block; ++p) dx[i * block + p] += sc * vx[i * block + p];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions on [N, C, H, W] with reflect padding.

/// Dense convolution, weight [Co, Ci, k, k], optional bias [Co].
template <class T>
DiffTensor<T> conv2d(DiffTensor<T> x, DiffTensor<T> w, std::optional<DiffTensor<T>> bias, std::size_t stride,
                     std::size_t pad) {
  using detail::require;
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(sx.size() == 4, OpKind::Conv2d, "input must be [N,C,H,W], got " + to_string(sx));
  require(sw.size() == 4 && sw[2] == sw[3] && sw[1] == sx[1], OpKind::Conv2d,
          "weight " + to_string(sw) + " does not fit input " + to_string(sx));
  require(stride >= 1, OpKind::Conv2d, "stride must be positive");
  const std::size_t N = sx[0], Ci = sx[1], H = sx[2], W = sx[3], Co = sw[0], k = sw[2];
  require(H + 2 * pad >= k && W + 2 * pad >= k, OpKind::Conv2d, "kernel larger than padded input " + to_string(sx));
  if (bias) require(bias->shape() == Shape{Co}, OpKind::Conv2d, "bias must be [" + std::to_string(Co) + "]");
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const std::size_t rows = Ci * k * k, P = Ho * Wo;

  std::vector<std::size_t> ridx(k * Ho), cidx(k * Wo);
  for (std::size_t ki = 0; ki < k; ++ki)
    for (std::size_t o = 0; o < Ho; ++o)
      ridx[ki * Ho + o] = detail::reflect_index(static_cast<std::ptrdiff_t>(o * stride + ki) - static_cast<std::ptrdiff_t>(pad), H);
  for (std::size_t kj = 0; kj < k; ++kj)
    for (std::size_t o = 0; o < Wo; ++o)
      cidx[kj * Wo + o] = detail::reflect_index(static_cast<std::ptrdiff_t>(o * stride + kj) - static_cast<std::ptrdiff_t>(pad), W);

  // cols[n] is [Ci*k*k, Ho*Wo]; element (r, p) gathers from src_of(r, p).
  std::vector<T> cols(N * rows * P);
  const T* px = x.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ci = 0; ci < Ci; ++ci)
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          T* dst = cols.data() + (n * rows + (ci * k + ki) * k + kj) * P;
          const T* plane = px + (n * Ci + ci) * H * W;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const T* row = plane + ridx[ki * Ho + oh] * W;
            for (std::size_t ow = 0; ow < Wo; ++ow) dst[oh * Wo + ow] = row[cidx[kj * Wo + ow]];
          }
        }
  Tensor<T> out({N, Co, Ho, Wo});
  const T* pw = w.value().data();
  for (std::size_t n = 0; n < N; ++n) {
    T* o = out.data() + n * Co * P;
    detail::gemm(pw, false, cols.data() + n * rows * P, false, o, Co, P, rows, false);
    if (bias) {
      const T* pb = bias->value().data();
      for (std::size_t c = 0; c < Co; ++c)
        for (std::size_t p = 0; p < P; ++p) o[c * P + p] += pb[c];
    }
  }
  std::vector<DiffTensor<T>> ins{x, w};
  if (bias) ins.push_back(*bias);
  const auto ix = x.id(), iw = w.id();
  const std::optional<std::uint32_t> ib = bias ? std::optional<std::uint32_t>(bias->id()) : std::nullopt;
  return x.graph().record(
      OpKind::Conv2d, std::move(out), ins,
      [=, cols = std::move(cols), ridx = std::move(ridx), cidx = std::move(cidx)](Graph<T>& g, const auto& self) {
        const T* gy = self.grad.data();
        if (T* dw = g.accumulate(iw))
          for (std::size_t n = 0; n < N; ++n)
            detail::gemm(gy + n * Co * P, false, cols.data() + n * rows * P, true, dw, Co, rows, P, true);
        if (ib)
          if (T* db = g.accumulate(*ib))
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t c = 0; c < Co; ++c)
                for (std::size_t p = 0; p < P; ++p) db[c] += gy[(n * Co + c) * P + p];
        if (T* dx = g.accumulate(ix)) {
          std::vector<T> dcols(rows * P);
          const T* pw = g.value(iw).data();
          for (std::size_t n = 0; n < N; ++n) {
            detail::gemm(pw, true, gy + n * Co * P, false, dcols.data(), rows, P, Co, false);
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (std::size_t ki = 0; ki < k; ++ki)
                for (std::size_t kj = 0; kj < k; ++kj) {
                  const T* src = dcols.data() + ((ci * k + ki) * k + kj) * P;
                  T* plane = dx + (n * Ci + ci) * H * W;
                  for (std::size_t oh = 0; oh < Ho; ++oh) {
                    T* row = plane + ridx[ki * Ho + oh] * W;
                    for (std::size_t ow = 0; ow < Wo; ++ow) row[cidx[kj * Wo + ow]] += src[oh * Wo + ow];
                  }
                }
          }
        }
      });
}

/// Per-channel k x k convolution (k odd, stride 1, same size), weight [C, 1, k, k], optional bias [C].
template <class T>
DiffTensor<T> depthwise_conv2d(DiffTensor<T> x, DiffTensor<T> w, std::optional<DiffTensor<T>> bias) {
  using detail::require;
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(sx.size() == 4, OpKind::DepthwiseConv2d, "input must be [N,C,H,W], got " + to_string(sx));
  require(sw.size() == 4 && sw[0] == sx[1] && sw[1] == 1 && sw[2] == sw[3] && sw[2] % 2 == 1, OpKind::DepthwiseConv2d,
          "weight " + to_string(sw) + " does not fit input " + to_string(sx));
  const std::size_t N = sx[0], C = sx[1], H = sx[2], W = sx[3], k = sw[2], p = k / 2;
  if (bias) require(bias->shape() == Shape{C}, OpKind::DepthwiseConv2d, "bias must be [" + std::to_string(C) + "]");
  const std::size_t Hp = H + 2 * p, Wp = W + 2 * p;
  std::vector<std::size_t> ridx(Hp), cidx(Wp);
  for (std::size_t i = 0; i < Hp; ++i) ridx[i] = detail::reflect_index(static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(p), H);
  for (std::size_t j = 0; j < Wp; ++j) cidx[j] = detail::reflect_index(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(p), W);

  auto pad_plane = [=](const T* plane, std::vector<T>& buf) {
    for (std::size_t i = 0; i < Hp; ++i)
      for (std::size_t j = 0; j < Wp; ++j) buf[i * Wp + j] = plane[ridx[i] * W + cidx[j]];
  };

  Tensor<T> out(sx);
  std::vector<T> buf(Hp * Wp);
  const T* px = x.value().data();
  const T* pw = w.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      pad_plane(px + (n * C + c) * H * W, buf);
      T* o = out.data() + (n * C + c) * H * W;
      const T b = bias ? bias->value()[c] : T(0);
      std::fill(o, o + H * W, b);
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          const T wv = pw[(c * k + ki) * k + kj];
          for (std::size_t i = 0; i < H; ++i) {
            const T* src = buf.data() + (i + ki) * Wp + kj;
            T* dst = o + i * W;
            for (std::size_t j = 0; j < W; ++j) dst[j] += wv * src[j];
          }
        }
    }
  std::vector<DiffTensor<T>> ins{x, w};
  if (bias) ins.push_back(*bias);
  const auto ix = x.id(), iw = w.id();
  const std::optional<std::uint32_t> ib = bias ? std::optional<std::uint32_t>(bias->id()) : std::nullopt;
  return x.graph().record(OpKind::DepthwiseConv2d, std::move(out), ins, [=](Graph<T>& g, const auto& self) {
    const T* gy = self.grad.data();
    const T* px = g.value(ix).data();
    const T* pw = g.value(iw).data();
    T* dx = g.accumulate(ix);
    T* dw = g.accumulate(iw);
    T* db = ib ? g.accumulate(*ib) : nullptr;
    std::vector<T> buf(Hp * Wp), dbuf(Hp * Wp);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* go = gy + (n * C + c) * H * W;
        if (db)
          for (std::size_t i = 0; i < H * W; ++i) db[c] += go[i];
        if (dw) {
          pad_plane(px + (n * C + c) * H * W, buf);
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
              T acc = 0;
              for (std::size_t i = 0; i < H; ++i) {
                const T* src = buf.data() + (i + ki) * Wp + kj;
                const T* gr = go + i * W;
                for (std::size_t j = 0; j < W; ++j) acc += gr[j] * src[j];
              }
              dw[(c * k + ki) * k + kj] += acc;
            }
        }
        if (dx) {
          std::fill(dbuf.begin(), dbuf.end(), T(0));
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj) {
              const T wv = pw[(c * k + ki) * k + kj];
              for (std::size_t i = 0; i < H; ++i) {
                T* dst = dbuf.data() + (i + ki) * Wp + kj;
                const T* gr = go + i * W;
                for (std::size_t j = 0; j < W; ++j) dst[j] += wv * gr[j];
              }
            }
          T* plane = dx + (n * C + c) * H * W;
          for (std::size_t i = 0; i < Hp; ++i)
            for (std::size_t j = 0; j < Wp; ++j) plane[ridx[i] * W + cidx[j]] += dbuf[i * Wp + j];
        }
      }
  });
}

/// 2x upsampling transposed convolution (kernel 2, stride 2), weight [Ci, Co, 2, 2], optional bias [Co].
template <class T>
DiffTensor<T> conv_transpose2d(DiffTensor<T> x, DiffTensor<T> w, std::optional<DiffTensor<T>> bias) {
  using detail::require;
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  require(sx.size() == 4, OpKind::ConvTranspose2d, "input must be [N,C,H,W], got " + to_string(sx));
  require(sw.size() == 4 && sw[0] == sx[1] && sw[2] == 2 && sw[3] == 2, OpKind::ConvTranspose2d,
          "weight " + to_string(sw) + " does not fit input " + to_string(sx));
  const std::size_t N = sx[0], Ci = sx[1], H = sx[2], W = sx[3], Co = sw[1], P = H * W;
  if (bias) require(bias->shape() == Shape{Co}, OpKind::ConvTranspose2d, "bias must be [" + std::to_string(Co) + "]");
  // taps[d] is the [Co, Ci] matrix for output offset d = di*2+dj.
  auto taps_of = [=](const T* pw) {
    std::vector<T> taps(4 * Co * Ci);
    for (std::size_t ci = 0; ci < Ci; ++ci)
      for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t d = 0; d < 4; ++d) taps[(d * Co + co) * Ci + ci] = pw[(ci * Co + co) * 4 + d];
    return taps;
  };
  const auto taps = taps_of(w.value().data());
  Tensor<T> out({N, Co, 2 * H, 2 * W});
  std::vector<T> tmp(Co * P);
  const T* px = x.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < 4; ++d) {
      detail::gemm(taps.data() + d * Co * Ci, false, px + n * Ci * P, false, tmp.data(), Co, P, Ci, false);
      const std::size_t di = d / 2, dj = d % 2;
      for (std::size_t co = 0; co < Co; ++co) {
        const T b = bias ? bias->value()[co] : T(0);
        T* o = out.data() + (n * Co + co) * 4 * P;
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) o[(2 * i + di) * 2 * W + 2 * j + dj] = tmp[co * P + i * W + j] + b;
      }
    }
  std::vector<DiffTensor<T>> ins{x, w};
  if (bias) ins.push_back(*bias);
  const auto ix = x.id(), iw = w.id();
  const std::optional<std::uint32_t> ib = bias ? std::optional<std::uint32_t>(bias->id()) : std::nullopt;
  return x.graph().record(OpKind::ConvTranspose2d, std::move(out), ins, [=](Graph<T>& g, const auto& self) {
    const T* gy = self.grad.data();
    const T* px = g.value(ix).data();
    const auto taps = taps_of(g.value(iw).data());
    T* dx = g.accumulate(ix);
    T* dw = g.accumulate(iw);
    T* db = ib ? g.accumulate(*ib) : nullptr;
    std::vector<T> gsub(Co * P), dtaps(4 * Co * Ci, T(0));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < 4; ++d) {
        const std::size_t di = d / 2, dj = d % 2;
        for (std::size_t co = 0; co < Co; ++co) {
          const T* o = gy + (n * Co + co) * 4 * P;
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) gsub[co * P + i * W + j] = o[(2 * i + di) * 2 * W + 2 * j + dj];
        }
        if (db)
          for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t p = 0; p < P; ++p) db[co] += gsub[co * P + p];
        if (dx) detail::gemm(taps.data() + d * Co * Ci, true, gsub.data(), false, dx + n * Ci * P, Ci, P, Co, true);
        if (dw) detail::gemm(gsub.data(), false, px + n * Ci * P, true, dtaps.data() + d * Co * Ci, Co, Ci, P, true);
      }
    if (dw)
      for (std::size_t ci = 0; ci < Ci; ++ci)
        for (std::size_t co = 0; co < Co; ++co)
          for (std::size_t d = 0; d < 4; ++d) dw[(ci * Co + co) * 4 + d] += dtaps[(d * Co + co) * Ci + ci];
  });
}

// ---------------------------------------------------------------------------
// Operator sugar for same-shape elementwise arithmetic.

template <class T>
DiffTensor<T> operator+(DiffTensor<T> a, DiffTensor<T> b) {
  return add(a, b);
}
template <class T>
DiffTensor<T> operator-(DiffTensor<T> a, DiffTensor<T> b) {
  return sub(a, b);
}
template <class T>
DiffTensor<T> operator*(DiffTensor<T> a, DiffTensor<T> b) {
  return mul(a, b);
}

/// Mean absolute value, the per-element l1 used by every loss.
template <class T>
DiffTensor<T> mean_abs(DiffTensor<T> x) {
  return scalar_mul(l1_sum(x), T(1) / T(x.size()));
}

}  // namespace uldm
