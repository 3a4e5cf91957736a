#pragma once

#include "disac/numerics/ops.hpp"

// Complex feature maps are carried as pairs of real tensors. Inside the RF
// extractor they are stacked along the channel axis, real parts first:
// [N, 2C, H, W].

namespace disac::nn {

template <typename T>
struct ComplexTensor {
  Tensor<T> real, imag;
};

/// Stacks [N,C,H,W] real and imaginary parts into [N,2C,H,W].
template <typename T>
Tensor<T> stack_complex(const ComplexTensor<T>& z) {
  if (z.real.shape() != z.imag.shape()) shape_error("stack_complex", z.real.shape(), z.imag.shape());
  return concat<T>({z.real, z.imag}, 1);
}

template <typename T>
ComplexTensor<T> unstack_complex(const Tensor<T>& s) {
  detail::require_rank("unstack_complex", s, 4);
  if (s.dim(1) % 2) throw ContractError("unstack_complex: odd channel count in " + shape_str(s.shape()));
  const std::size_t c = s.dim(1) / 2;
  return {slice(s, 1, 0, c), slice(s, 1, c, c)};
}

/// Real weight of the stacked form: [[Wr, -Wi], [Wi, Wr]] so that one real
/// convolution over [xr; xi] yields [Wr*xr - Wi*xi; Wi*xr + Wr*xi].
template <typename T>
Tensor<T> complex_weight(const Tensor<T>& w_real, const Tensor<T>& w_imag) {
  if (w_real.shape() != w_imag.shape()) shape_error("complex_weight", w_real.shape(), w_imag.shape());
  auto top = concat<T>({w_real, scale(w_imag, T(-1))}, 1);
  auto bottom = concat<T>({w_imag, w_real}, 1);
  return concat<T>({top, bottom}, 0);
}

/// Complex convolution on the stacked layout (no bias).
template <typename T>
Tensor<T> complex_conv_stacked(const Tensor<T>& x, const Tensor<T>& w_real, const Tensor<T>& w_imag,
                               std::size_t stride, std::size_t pad) {
  detail::require_rank("complex_conv", w_real, 4);
  if (x.rank() != 4 || x.dim(1) != 2 * w_real.dim(1)) shape_error("complex_conv", x.shape(), w_real.shape());
  return conv2d(x, complex_weight(w_real, w_imag), Tensor<T>(), stride, pad);
}

/// z_real = Wr*xr - Wi*xi, z_imag = Wr*xi + Wi*xr (pre-activation).
template <typename T>
ComplexTensor<T> complex_conv(const ComplexTensor<T>& x, const Tensor<T>& w_real, const Tensor<T>& w_imag,
                              std::size_t stride, std::size_t pad) {
  return unstack_complex(complex_conv_stacked(stack_complex(x), w_real, w_imag, stride, pad));
}

/// Split activation: ReLU on real and imaginary parts separately.
template <typename T>
ComplexTensor<T> complex_relu(const ComplexTensor<T>& z) {
  return {relu(z.real), relu(z.imag)};
}

/// Max-pool over a stacked complex map choosing, per window, the element of
/// largest modulus (first one on ties); both parts of that element pass.
template <typename T>
Tensor<T> complex_max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
  detail::require_rank("complex_max_pool2d", x, 4);
  if (x.dim(1) % 2) throw ContractError("complex_max_pool2d: odd channel count in " + shape_str(x.shape()));
  auto g = detail::conv_geometry("complex_max_pool2d", x, k, k, stride, 0);
  const std::size_t c = g.c / 2, plane = g.h * g.w, oplane = g.ho * g.wo;
  auto arg = std::make_shared<std::vector<std::size_t>>(g.n * c * oplane);
  std::vector<T> out(g.n * g.c * oplane);
  auto xd = x.data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* re = xd.data() + (n * g.c + ch) * plane;
      const T* im = xd.data() + (n * g.c + c + ch) * plane;
      for (std::size_t y = 0; y < g.ho; ++y)
        for (std::size_t xo = 0; xo < g.wo; ++xo) {
          std::size_t best = y * stride * g.w + xo * stride;
          T best_mod = re[best] * re[best] + im[best] * im[best];
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t idx = (y * stride + i) * g.w + xo * stride + j;
              const T mod = re[idx] * re[idx] + im[idx] * im[idx];
              if (mod > best_mod) best = idx, best_mod = mod;
            }
          const std::size_t o = y * g.wo + xo;
          (*arg)[(n * c + ch) * oplane + o] = best;
          out[(n * g.c + ch) * oplane + o] = re[best];
          out[(n * g.c + c + ch) * oplane + o] = im[best];
        }
    }
  auto xn = x.node_ptr();
  const std::size_t nn_ = g.n, cc = g.c;
  return make_result<T>({g.n, g.c, g.ho, g.wo}, std::move(out), {x}, [xn, arg, nn_, cc, c, plane, oplane](Node<T>& o) {
    auto& gx = xn->ensure_grad();
    for (std::size_t n = 0; n < nn_; ++n)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t q = 0; q < oplane; ++q) {
          const std::size_t src = (*arg)[(n * c + ch) * oplane + q];
          gx[(n * cc + ch) * plane + src] += o.grad[(n * cc + ch) * oplane + q];
          gx[(n * cc + c + ch) * plane + src] += o.grad[(n * cc + c + ch) * oplane + q];
        }
  });
}

}  // namespace disac::nn
