#pragma once

#include <cmath>
#include <span>

#include "disac/numerics/ops.hpp"

namespace disac::nn {

/// Scaled dot-product attention core. Projections belong to the caller.
///
/// Q[B,Lq,d], K[B,Lk,d], V[B,Lk,d] are split into `heads` slices of width
/// d/heads; each head computes softmax(Q K^T / sqrt(d/heads)) V and the
/// heads are concatenated back to [B,Lq,d]. `key_mask` is either empty or
/// holds B*Lk entries in {0,1}; masked keys receive zero weight.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               std::span<const T> key_mask = {}) {
  detail::require_rank("multi_head_attention(Q)", q, 3);
  detail::require_rank("multi_head_attention(K)", k, 3);
  detail::require_rank("multi_head_attention(V)", v, 3);
  if (k.shape() != v.shape()) shape_error("multi_head_attention(K,V)", k.shape(), v.shape());
  if (q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) shape_error("multi_head_attention(Q,K)", q.shape(), k.shape());
  const std::size_t b = q.dim(0), lq = q.dim(1), lk = k.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0)
    throw ConfigError("multi_head_attention: model dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  for (T m : key_mask)
    if (m != T(0) && m != T(1)) throw ContractError("multi_head_attention: mask entries must be 0 or 1");
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  auto split = [&](const Tensor<T>& t, std::size_t len) {
    if (heads == 1) return t;
    return permute(reshape(t, {b, len, heads, dh}), {0, 2, 1, 3});
  };
  auto qh = split(q, lq), kh = split(k, lk), vh = split(v, lk);
  auto scores = scale(bmm(qh, kh, /*trans_b=*/true), inv_scale);
  auto weights = masked_softmax(scores, key_mask);
  auto out = bmm(weights, vh);
  if (heads == 1) return out;
  return reshape(permute(out, {0, 2, 1, 3}), {b, lq, d});
}

}  // namespace disac::nn
