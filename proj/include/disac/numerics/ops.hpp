#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "disac/numerics/tensor.hpp"

// Differentiable primitives. Every op checks its operand shapes, computes the
// forward value eagerly and, when grad mode is on and an input requires
// grad, records a backward rule on the result node.

namespace disac::nn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
using AlignedVec = std::vector<T, Eigen::aligned_allocator<T>>;

inline bool is_aligned(const void* p) { return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0; }

// Eigen's vectorized kernels peel an address-dependent prologue, which
// changes rounding. Operands are moved to aligned storage first so results
// depend on values only.
template <typename T>
const T* aligned_view(const T* p, std::size_t n, AlignedVec<T>& scratch) {
  if (is_aligned(p)) return p;
  scratch.assign(p, p + n);
  return scratch.data();
}

// C[m,n] (+)= op(A) * op(B), row-major, op = transpose when flagged.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Idx = Eigen::Index;
  thread_local AlignedVec<T> sa, sb, sc;
  // The blocked kernel packs its operands, so only the coefficient-wise and
  // matrix-vector paths see the caller's addresses.
  const bool small = m + n + k < EIGEN_GEMM_TO_COEFFBASED_THRESHOLD || m == 1 || n == 1;
  if (small) {
    a = aligned_view(a, m * k, sa);
    b = aligned_view(b, k * n, sb);
  }
  T* dst = c;
  if (small && !is_aligned(c)) {
    if (accumulate)
      sc.assign(c, c + m * n);
    else
      sc.resize(m * n);
    dst = sc.data();
  }
  MutMap<T> C(dst, Idx(m), Idx(n));
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, Idx(m), Idx(k)) * ConstMap<T>(b, Idx(k), Idx(n));
  } else if (!trans_a && trans_b) {
    C.noalias() += ConstMap<T>(a, Idx(m), Idx(k)) * ConstMap<T>(b, Idx(n), Idx(k)).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, Idx(k), Idx(m)).transpose() * ConstMap<T>(b, Idx(k), Idx(n));
  } else {
    C.noalias() +=
        ConstMap<T>(a, Idx(k), Idx(m)).transpose() * ConstMap<T>(b, Idx(n), Idx(k)).transpose();
  }
  if (dst != c) std::copy(dst, dst + m * n, c);
}

/// out[i] = f(in)[i] for an element-wise Eigen array expression f, evaluated
/// on aligned copies.
template <typename T, typename F>
void aligned_apply(const T* in, T* out, std::size_t n, F f) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  thread_local AlignedVec<T> si, so;
  si.assign(in, in + n);
  so.resize(n);
  Eigen::Map<Arr, Eigen::Aligned>(so.data(), Eigen::Index(n)) =
      f(Eigen::Map<const Arr, Eigen::Aligned>(si.data(), Eigen::Index(n)));
  std::copy(so.begin(), so.end(), out);
}

inline bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T>
void require_rank(const std::string& op, const Tensor<T>& t, std::size_t r) {
  if (t.rank() != r)
    throw ContractError(op + ": expected rank " + std::to_string(r) + ", got " +
                        shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

/// a + b; b may equal a's shape or be a trailing-suffix broadcast (bias add).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) shape_error("add", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % inner];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn, inner](Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % inner] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) shape_error("sub", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i % inner];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn, inner](Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % inner] -= o.grad[i];
    }
  });
}

/// Element-wise product with the same suffix-broadcast rule as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) shape_error("mul", a.shape(), b.shape());
  const std::size_t inner = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i % inner];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn, inner](Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i % inner];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % inner] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a}, [an, s](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
}

namespace detail {
// Output positions [lo, hi) whose input index o*stride + t - pad lies in
// [0, n_in) for kernel tap t.
inline std::pair<std::size_t, std::size_t> tap_range(std::size_t t, std::size_t stride, std::size_t pad,
                                                     std::size_t n_in, std::size_t n_out) {
  const std::size_t lo = pad > t ? (pad - t + stride - 1) / stride : 0;
  if (n_in + pad < t + 1) return {lo, lo};
  const std::size_t hi = std::min(n_out, (n_in - 1 + pad - t) / stride + 1);
  return {lo, std::max(lo, hi)};
}

// Unary op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, F f, D dfdx) {
  auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a}, [an, dfdx](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * dfdx(an->value[i], o.value[i]);
  });
}
}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto ad = a.data();
  const std::size_t n = ad.size();
  auto cdf = std::make_shared<std::vector<T>>(n);
  detail::aligned_apply(ad.data(), cdf->data(), n,
                        [](const auto& x) { return T(0.5) * (T(1) + (x * T(0.70710678118654752440)).erf()); });
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * (*cdf)[i];
  auto an = a.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {a}, [an, cdf](Node<T>& o) {
    const std::size_t n = o.grad.size();
    std::vector<T> density(n);
    detail::aligned_apply(an->value.data(), density.data(), n,
                          [](const auto& x) { return T(0.39894228040143267794) * (T(-0.5) * x * x).exp(); });
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += o.grad[i] * ((*cdf)[i] + an->value[i] * density[i]);
  });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  auto an = a.node_ptr();
  return make_result<T>({}, {s}, {a}, [an](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (auto& v : g) v += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), T(1) / T(a.numel()));
}

/// Mean over one axis; the axis is removed from the shape.
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ContractError("mean_axis: axis out of range for " + shape_str(a.shape()));
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os.erase(os.begin() + std::ptrdiff_t(axis));
  std::vector<T> out(outer * inner, T(0));
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += ad[(o * n + j) * inner + i];
  const T inv = T(1) / T(n);
  for (auto& v : out) v *= inv;
  auto an = a.node_ptr();
  return make_result<T>(os, std::move(out), {a}, [an, outer, inner, n, inv](Node<T>& on) {
    auto& g = an->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < inner; ++i) g[(o * n + j) * inner + i] += on.grad[o * inner + i] * inv;
  });
}

// -------------------------------------------------------------- shape motion

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  auto an = a.node_ptr();
  return make_result<T>(std::move(shape), a.values(), {a}, [an](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

namespace detail {
// Maps each output linear index of permute(shape, perm) to its input index.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  std::vector<std::size_t> idx(numel(in));
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t lin = 0; lin < idx.size(); ++lin) {
    idx[lin] = offset;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      offset += in_stride[perm[d]];
      if (counter[d] < out[d]) break;
      offset -= in_stride[perm[d]] * out[d];
      counter[d] = 0;
    }
  }
  return idx;
}
}  // namespace detail

/// Generic axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  if (perm.size() != a.rank()) throw ContractError("permute: perm rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || used[p]) throw ContractError("permute: invalid permutation");
    used[p] = true;
  }
  Shape os(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) os[i] = a.shape()[perm[i]];
  auto idx = std::make_shared<std::vector<std::size_t>>(detail::permute_index(a.shape(), perm));
  auto ad = a.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[(*idx)[i]];
  auto an = a.node_ptr();
  return make_result<T>(os, std::move(out), {a}, [an, idx](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[(*idx)[i]] += o.grad[i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape os = parts[0].shape();
  if (axis >= os.size()) throw ContractError("concat: axis out of range for " + shape_str(os));
  os[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) shape_error("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) shape_error("concat", parts[0].shape(), p.shape());
    os[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
  for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
  std::vector<T> out(numel(os));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pd.begin() + std::ptrdiff_t(o * w), w,
                  out.begin() + std::ptrdiff_t(o * os[axis] * inner + off));
    widths.push_back(w);
    off += w;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  const std::size_t row = os[axis] * inner;
  return make_result<T>(os, std::move(out), parts, [nodes, widths, outer, row](Node<T>& o) {
    std::size_t off2 = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        auto& g = nodes[k]->ensure_grad();
        for (std::size_t r = 0; r < outer; ++r)
          for (std::size_t i = 0; i < widths[k]; ++i) g[r * widths[k] + i] += o.grad[r * row + off2 + i];
      }
      off2 += widths[k];
    }
  });
}

/// a[..., start:start+len, ...] along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const auto& s = a.shape();
  if (axis >= s.size() || start + len > s[axis])
    throw ContractError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") out of bounds for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = len;
  std::vector<T> out(numel(os));
  auto ad = a.data();
  const std::size_t src_row = s[axis] * inner, dst_row = len * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(ad.begin() + std::ptrdiff_t(o * src_row + start * inner), dst_row,
                out.begin() + std::ptrdiff_t(o * dst_row));
  auto an = a.node_ptr();
  return make_result<T>(os, std::move(out), {a}, [an, outer, src_row, dst_row, start, inner](Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t r = 0; r < outer; ++r)
      for (std::size_t i = 0; i < dst_row; ++i) g[r * src_row + start * inner + i] += o.grad[r * dst_row + i];
  });
}

// ------------------------------------------------------------ linear algebra

/// a[..., K] x b[K, N] -> [..., N]. b is shared across all leading rows.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", b, 2);
  if (a.rank() < 1 || a.shape().back() != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Shape os = a.shape();
  os.back() = n;
  std::vector<T> out(m * n);
  detail::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(os, std::move(out), {a, b}, [an, bn, m, n, k](Node<T>& o) {
    if (an->requires_grad)
      detail::gemm<T>(false, true, m, k, n, o.grad.data(), bn->value.data(), an->ensure_grad().data(), true);
    if (bn->requires_grad)
      detail::gemm<T>(true, false, k, n, m, an->value.data(), o.grad.data(), bn->ensure_grad().data(), true);
  });
}

/// Batched product over identical leading dims: a[...,M,K] x b[...,K,N]
/// (or b[...,N,K] when trans_b).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank()) shape_error("bmm", a.shape(), b.shape());
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i)) shape_error("bmm", a.shape(), b.shape());
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::size_t bk = trans_b ? b.dim(r - 1) : b.dim(r - 2);
  const std::size_t n = trans_b ? b.dim(r - 2) : b.dim(r - 1);
  if (bk != k) shape_error("bmm", a.shape(), b.shape());
  const std::size_t batch = a.numel() / (m * k);
  Shape os = a.shape();
  os[r - 1] = n;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm<T>(false, trans_b, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                    out.data() + i * m * n, false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(os, std::move(out), {a, b}, [an, bn, batch, m, n, k, trans_b](Node<T>& o) {
    for (std::size_t i = 0; i < batch; ++i) {
      const T* dy = o.grad.data() + i * m * n;
      if (an->requires_grad)
        detail::gemm<T>(false, !trans_b, m, k, n, dy, bn->value.data() + i * k * n,
                        an->ensure_grad().data() + i * m * k, true);
      if (bn->requires_grad) {
        if (trans_b)
          detail::gemm<T>(true, false, n, k, m, dy, an->value.data() + i * m * k,
                          bn->ensure_grad().data() + i * k * n, true);
        else
          detail::gemm<T>(true, false, k, n, m, an->value.data() + i * m * k, dy,
                          bn->ensure_grad().data() + i * k * n, true);
      }
    }
  });
}

/// x[..., in] W[out, in]^T + bias[out]; bias may be an empty handle.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank("linear", w, 2);
  if (x.rank() < 1 || x.shape().back() != w.dim(1)) shape_error("linear", x.shape(), w.shape());
  const std::size_t in = w.dim(1), outf = w.dim(0), m = x.numel() / in;
  if (bias && (bias.rank() != 1 || bias.dim(0) != outf)) shape_error("linear(bias)", w.shape(), bias.shape());
  Shape os = x.shape();
  os.back() = outf;
  std::vector<T> out(m * outf);
  detail::gemm<T>(false, true, m, outf, in, x.data().data(), w.data().data(), out.data(), false);
  if (bias) {
    auto bd = bias.data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < outf; ++j) out[r * outf + j] += bd[j];
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto bn = bias ? bias.node_ptr() : nullptr;
  return make_result<T>(os, std::move(out), {x, w, bias}, [xn, wn, bn, m, in, outf](Node<T>& o) {
    if (xn->requires_grad)
      detail::gemm<T>(false, false, m, in, outf, o.grad.data(), wn->value.data(), xn->ensure_grad().data(), true);
    if (wn->requires_grad)
      detail::gemm<T>(true, false, outf, in, m, o.grad.data(), xn->value.data(), wn->ensure_grad().data(), true);
    if (bn && bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < outf; ++j) g[j] += o.grad[r * outf + j];
    }
  });
}

// ---------------------------------------------------------------- convolution

struct Conv2dGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
};

namespace detail {
template <typename T>
void im2col(const T* x, const Conv2dGeometry& g, T* cols) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t y = 0; y < g.ho; ++y) {
          const std::ptrdiff_t iy = std::ptrdiff_t(y * g.stride + i) - std::ptrdiff_t(g.pad);
          for (std::size_t xo = 0; xo < g.wo; ++xo) {
            const std::ptrdiff_t ix = std::ptrdiff_t(xo * g.stride + j) - std::ptrdiff_t(g.pad);
            row[y * g.wo + xo] = (iy >= 0 && ix >= 0 && iy < std::ptrdiff_t(g.h) && ix < std::ptrdiff_t(g.w))
                                     ? x[(c * g.h + std::size_t(iy)) * g.w + std::size_t(ix)]
                                     : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const Conv2dGeometry& g, T* dx) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t y = 0; y < g.ho; ++y) {
          const std::ptrdiff_t iy = std::ptrdiff_t(y * g.stride + i) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          for (std::size_t xo = 0; xo < g.wo; ++xo) {
            const std::ptrdiff_t ix = std::ptrdiff_t(xo * g.stride + j) - std::ptrdiff_t(g.pad);
            if (ix < 0 || ix >= std::ptrdiff_t(g.w)) continue;
            dx[(c * g.h + std::size_t(iy)) * g.w + std::size_t(ix)] += row[y * g.wo + xo];
          }
        }
      }
}

template <typename T>
Conv2dGeometry conv_geometry(const std::string& op, const Tensor<T>& x, std::size_t kh, std::size_t kw,
                             std::size_t stride, std::size_t pad) {
  require_rank(op, x, 4);
  if (stride == 0) throw ConfigError(op + ": stride must be positive");
  Conv2dGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), 0, kh, kw, stride, pad, 0, 0};
  if (g.h + 2 * pad < kh || g.w + 2 * pad < kw)
    throw ContractError(op + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                        " larger than padded input " + shape_str(x.shape()));
  g.ho = (g.h + 2 * pad - kh) / stride + 1;
  g.wo = (g.w + 2 * pad - kw) / stride + 1;
  return g;
}
}  // namespace detail

/// x[N,C,H,W] * w[O,C,kh,kw] (+ bias[O]) -> [N,O,Ho,Wo], cross-correlation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t pad) {
  detail::require_rank("conv2d", w, 4);
  auto g = detail::conv_geometry("conv2d", x, w.dim(2), w.dim(3), stride, pad);
  if (w.dim(1) != g.c) shape_error("conv2d", x.shape(), w.shape());
  g.o = w.dim(0);
  if (bias && (bias.rank() != 1 || bias.dim(0) != g.o)) shape_error("conv2d(bias)", w.shape(), bias.shape());
  const std::size_t ckk = g.c * g.kh * g.kw, hw = g.ho * g.wo;
  std::vector<T> out(g.n * g.o * hw);
  std::vector<T> cols(ckk * hw);
  for (std::size_t s = 0; s < g.n; ++s) {
    detail::im2col(x.data().data() + s * g.c * g.h * g.w, g, cols.data());
    detail::gemm<T>(false, false, g.o, hw, ckk, w.data().data(), cols.data(), out.data() + s * g.o * hw, false);
    if (bias)
      for (std::size_t oc = 0; oc < g.o; ++oc)
        for (std::size_t p = 0; p < hw; ++p) out[(s * g.o + oc) * hw + p] += bias[oc];
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto bn = bias ? bias.node_ptr() : nullptr;
  return make_result<T>({g.n, g.o, g.ho, g.wo}, std::move(out), {x, w, bias},
                        [xn, wn, bn, g, ckk, hw](Node<T>& o) {
                          std::vector<T> cols2(ckk * hw), dcols(ckk * hw);
                          for (std::size_t s = 0; s < g.n; ++s) {
                            const T* dy = o.grad.data() + s * g.o * hw;
                            if (wn->requires_grad) {
                              detail::im2col(xn->value.data() + s * g.c * g.h * g.w, g, cols2.data());
                              detail::gemm<T>(false, true, g.o, ckk, hw, dy, cols2.data(),
                                              wn->ensure_grad().data(), true);
                            }
                            if (xn->requires_grad) {
                              detail::gemm<T>(true, false, ckk, hw, g.o, wn->value.data(), dy, dcols.data(), false);
                              detail::col2im(dcols.data(), g, xn->ensure_grad().data() + s * g.c * g.h * g.w);
                            }
                            if (bn && bn->requires_grad) {
                              auto& gb = bn->ensure_grad();
                              for (std::size_t oc = 0; oc < g.o; ++oc)
                                for (std::size_t p = 0; p < hw; ++p) gb[oc] += dy[oc * hw + p];
                            }
                          }
                        });
}

/// Per-channel convolution: x[N,C,H,W], w[C,1,kh,kw], bias[C] optional.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                           std::size_t pad) {
  detail::require_rank("depthwise_conv2d", w, 4);
  auto g = detail::conv_geometry("depthwise_conv2d", x, w.dim(2), w.dim(3), stride, pad);
  if (w.dim(0) != g.c || w.dim(1) != 1) shape_error("depthwise_conv2d", x.shape(), w.shape());
  if (bias && (bias.rank() != 1 || bias.dim(0) != g.c))
    shape_error("depthwise_conv2d(bias)", w.shape(), bias.shape());
  g.o = g.c;
  std::vector<T> out(g.n * g.c * g.ho * g.wo, T(0));
  // Visits every (tap, output row) pair whose input row is in range; `row`
  // receives the output/input row offsets, the valid output column span and
  // the input column of the first valid output.
  auto sweep = [g](auto&& row) {
    for (std::size_t s = 0; s < g.n; ++s)
      for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.kh; ++i) {
          const auto [ylo, yhi] = detail::tap_range(i, g.stride, g.pad, g.h, g.ho);
          for (std::size_t j = 0; j < g.kw; ++j) {
            const auto [xlo, xhi] = detail::tap_range(j, g.stride, g.pad, g.w, g.wo);
            if (xlo >= xhi) continue;
            const std::size_t wi = (c * g.kh + i) * g.kw + j;
            for (std::size_t y = ylo; y < yhi; ++y) {
              const std::size_t orow = ((s * g.c + c) * g.ho + y) * g.wo;
              const std::size_t irow = ((s * g.c + c) * g.h + (y * g.stride + i - g.pad)) * g.w;
              row(orow, irow + xlo * g.stride + j - g.pad, xlo, xhi, wi);
            }
          }
        }
  };
  {
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const std::size_t st = g.stride;
    sweep([&](std::size_t orow, std::size_t ix0, std::size_t xlo, std::size_t xhi, std::size_t wi) {
      const T wv = wd[wi];
      T* o = out.data() + orow + xlo;
      const T* in = xd + ix0;
      const std::size_t len = xhi - xlo;
      if (st == 1)
        for (std::size_t q = 0; q < len; ++q) o[q] += wv * in[q];
      else
        for (std::size_t q = 0; q < len; ++q) o[q] += wv * in[q * st];
    });
  }
  if (bias) {
    const std::size_t hw = g.ho * g.wo;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[(i / hw) % g.c];
  }
  auto xn = x.node_ptr(), wn = w.node_ptr();
  auto bn = bias ? bias.node_ptr() : nullptr;
  return make_result<T>({g.n, g.c, g.ho, g.wo}, std::move(out), {x, w, bias}, [xn, wn, bn, g, sweep](Node<T>& o) {
    const std::size_t st = g.stride;
    const T* go = o.grad.data();
    if (xn->requires_grad) {
      T* gx = xn->ensure_grad().data();
      const T* wd = wn->value.data();
      sweep([&](std::size_t orow, std::size_t ix0, std::size_t xlo, std::size_t xhi, std::size_t wi) {
        const T wv = wd[wi];
        T* dst = gx + ix0;
        const T* src = go + orow + xlo;
        const std::size_t len = xhi - xlo;
        if (st == 1)
          for (std::size_t q = 0; q < len; ++q) dst[q] += src[q] * wv;
        else
          for (std::size_t q = 0; q < len; ++q) dst[q * st] += src[q] * wv;
      });
    }
    if (wn->requires_grad) {
      T* gw = wn->ensure_grad().data();
      const T* xd = xn->value.data();
      sweep([&](std::size_t orow, std::size_t ix0, std::size_t xlo, std::size_t xhi, std::size_t wi) {
        const T* a = go + orow + xlo;
        const T* in = xd + ix0;
        const std::size_t len = xhi - xlo;
        T acc = T(0);
        if (st == 1)
          for (std::size_t q = 0; q < len; ++q) acc += a[q] * in[q];
        else
          for (std::size_t q = 0; q < len; ++q) acc += a[q] * in[q * st];
        gw[wi] += acc;
      });
    }
    if (bn && bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      const std::size_t hw = g.ho * g.wo;
      for (std::size_t i = 0; i < o.grad.size(); ++i) gb[(i / hw) % g.c] += o.grad[i];
    }
  });
}

/// Max-pool with window k and stride; output extent floor((H-k)/stride)+1.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  auto g = detail::conv_geometry("max_pool2d", x, k, k, stride, 0);
  auto arg = std::make_shared<std::vector<std::size_t>>(g.n * g.c * g.ho * g.wo);
  std::vector<T> out(arg->size());
  auto xd = x.data();
  for (std::size_t p = 0; p < g.n * g.c; ++p)
    for (std::size_t y = 0; y < g.ho; ++y)
      for (std::size_t xo = 0; xo < g.wo; ++xo) {
        std::size_t best = (p * g.h + y * stride) * g.w + xo * stride;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t idx = (p * g.h + y * stride + i) * g.w + xo * stride + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t oi = (p * g.ho + y) * g.wo + xo;
        (*arg)[oi] = best;
        out[oi] = xd[best];
      }
  auto xn = x.node_ptr();
  return make_result<T>({g.n, g.c, g.ho, g.wo}, std::move(out), {x}, [xn, arg](Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += o.grad[i];
  });
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Tensor<T> adaptive_avg_pool_1x1(const Tensor<T>& x) {
  detail::require_rank("adaptive_avg_pool_1x1", x, 4);
  return mean_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

// ------------------------------------------------------------- normalization

/// Normalizes over the last axis: (x - mean) / sqrt(var + eps).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.rank() < 1) throw ContractError("layer_norm: scalar input");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = (row[i] - mu) * is;
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, inv_std, rows, d](Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * d;
      const T* dy = o.grad.data() + r * d;
      T m1 = 0, m2 = 0;
      for (std::size_t i = 0; i < d; ++i) {
        m1 += dy[i];
        m2 += dy[i] * y[i];
      }
      m1 /= T(d);
      m2 /= T(d);
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += (*inv_std)[r] * (dy[i] - m1 - y[i] * m2);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  return add(mul(layer_norm(x, eps), gamma), beta);
}

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw ContractError("softmax: scalar input");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (out[r * d + i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] /= s;
  }
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, rows, d](Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * d;
      const T* dy = o.grad.data() + r * d;
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += dy[i] * y[i];
      for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[i] * (dy[i] - dot);
    }
  });
}

/// Softmax over the last axis of scores[B, ..., Lk] where key positions with
/// mask[b, j] == 0 get -inf. A row with every key masked yields all zeros.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const T> mask) {
  if (mask.empty()) return softmax(scores);
  if (scores.rank() < 2) throw ContractError("masked_softmax: rank < 2");
  const std::size_t b = scores.dim(0), lk = scores.shape().back();
  if (mask.size() != b * lk)
    throw ContractError("masked_softmax: mask holds " + std::to_string(mask.size()) + " entries for scores " +
                        shape_str(scores.shape()));
  const std::size_t rows = scores.numel() / lk, rows_per_batch = rows / b;
  std::vector<T> out(scores.numel(), T(0));
  auto sd = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* m = mask.data() + (r / rows_per_batch) * lk;
    const T* row = sd.data() + r * lk;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < lk; ++i)
      if (m[i] != T(0)) mx = std::max(mx, row[i]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T s = 0;
    for (std::size_t i = 0; i < lk; ++i)
      if (m[i] != T(0)) s += (out[r * lk + i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < lk; ++i) out[r * lk + i] /= s;
  }
  auto sn = scores.node_ptr();
  return make_result<T>(scores.shape(), std::move(out), {scores}, [sn, rows, lk](Node<T>& o) {
    auto& gx = sn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * lk;
      const T* dy = o.grad.data() + r * lk;
      T dot = 0;
      for (std::size_t i = 0; i < lk; ++i) dot += dy[i] * y[i];
      for (std::size_t i = 0; i < lk; ++i) gx[r * lk + i] += y[i] * (dy[i] - dot);
    }
  });
}

// ---------------------------------------------------------- stochastic layers

/// Inverted dropout. Identity when not training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

/// Stochastic depth: drops whole samples (axis 0), rescaling kept ones.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("drop_path: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  const std::size_t per = x.numel() / x.dim(0);
  std::vector<T> mask(x.numel());
  for (std::size_t b = 0; b < x.dim(0); ++b) std::fill_n(mask.begin() + std::ptrdiff_t(b * per), per, keep(rng) ? s : T(0));
  return mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

// ----------------------------------------------------------------- embeddings

/// Looks up rows of table[V, d] for integer ids; result shape ids_shape + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape ids_shape) {
  detail::require_rank("embedding", table, 2);
  if (numel(ids_shape) != ids.size()) throw ContractError("embedding: ids do not match " + shape_str(ids_shape));
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || std::size_t(ids[i]) >= v)
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(v));
    std::copy_n(td.begin() + std::ptrdiff_t(std::size_t(ids[i]) * d), d, out.begin() + std::ptrdiff_t(i * d));
  }
  ids_shape.push_back(d);
  auto tn = table.node_ptr();
  auto idv = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  return make_result<T>(std::move(ids_shape), std::move(out), {table}, [tn, idv, d](Node<T>& o) {
    auto& g = tn->ensure_grad();
    for (std::size_t i = 0; i < idv->size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[std::size_t((*idv)[i]) * d + j] += o.grad[i * d + j];
  });
}

// --------------------------------------------------------------------- losses

/// Mean of squared differences; target is treated as constant.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) shape_error("mse_loss", pred.shape(), target.shape());
  return mean(square(sub(pred, target.detach())));
}

/// Mean cross-entropy of logits[B, M] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t b = logits.dim(0), m = logits.dim(1);
  if (labels.size() != b)
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                        shape_str(logits.shape()));
  auto probs = std::make_shared<std::vector<T>>(b * m);
  T loss = 0;
  auto ld = logits.data();
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || std::size_t(labels[r]) >= m)
      throw ContractError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0," + std::to_string(m) + ")");
    const T* row = ld.data() + r * m;
    const T mx = *std::max_element(row, row + m);
    T s = 0;
    for (std::size_t i = 0; i < m; ++i) s += ((*probs)[r * m + i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < m; ++i) (*probs)[r * m + i] /= s;
    loss += -(row[labels[r]] - mx - std::log(s));
  }
  loss /= T(b);
  auto ln = logits.node_ptr();
  auto lab = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  return make_result<T>({}, {loss}, {logits}, [ln, probs, lab, b, m](Node<T>& o) {
    auto& g = ln->ensure_grad();
    const T s = o.grad[0] / T(b);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t i = 0; i < m; ++i)
        g[r * m + i] += s * ((*probs)[r * m + i] - (std::size_t((*lab)[r]) == i ? T(1) : T(0)));
  });
}

/// Element-wise sum of equally shaped tensors. At each position the terms
/// are added in ascending order, so the result does not depend on the order
/// of `parts`.
template <typename T>
Tensor<T> sum_sorted(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("sum_sorted: no operands");
  for (const auto& p : parts)
    if (p.shape() != parts[0].shape()) shape_error("sum_sorted", parts[0].shape(), p.shape());
  const std::size_t n = parts[0].numel(), k = parts.size();
  std::vector<T> out(n), terms(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) terms[j] = parts[j].data()[i];
    std::sort(terms.begin(), terms.end());
    T s = T(0);
    for (T t : terms) s += t;
    out[i] = s;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_result<T>(parts[0].shape(), std::move(out), parts, [nodes](Node<T>& o) {
    for (const auto& nd : nodes) {
      if (!nd->requires_grad) continue;
      auto& g = nd->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

}  // namespace disac::nn
