#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <string>
#include <type_traits>

#include "ettk/tensor.hpp"

namespace ettk {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Convolution geometry. groups=1 is a dense kernel, groups=in_channels is depthwise.
struct ConvSpec {
  std::int64_t out_channels = 1;
  std::int64_t in_channels = 1;
  std::int64_t kernel_size = 1;  // square, Z
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;

  void validate() const {
    if (out_channels < 1 || in_channels < 1 || kernel_size < 1 || stride < 1 || padding < 0 || groups < 1) {
      throw std::invalid_argument("conv spec: all sizes must be positive (padding >= 0)");
    }
    if (in_channels % groups != 0) {
      throw std::invalid_argument("conv spec: in_channels " + std::to_string(in_channels) +
                                  " not divisible by groups " + std::to_string(groups));
    }
    if (out_channels % groups != 0) {
      throw std::invalid_argument("conv spec: out_channels " + std::to_string(out_channels) +
                                  " not divisible by groups " + std::to_string(groups));
    }
  }
};

// "same" geometry: stride 1, output size = input size. Odd kernels only.
inline ConvSpec same_conv_spec(std::int64_t out_channels, std::int64_t in_channels, std::int64_t kernel_size,
                               std::int64_t groups = 1) {
  if (kernel_size % 2 == 0) {
    throw std::invalid_argument("same_conv_spec: kernel_size " + std::to_string(kernel_size) + " must be odd");
  }
  return ConvSpec{out_channels, in_channels, kernel_size, 1, (kernel_size - 1) / 2, groups};
}

inline std::int64_t conv_out_size(std::int64_t in, std::int64_t pad, std::int64_t kernel, std::int64_t stride,
                                  const char* axis) {
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0) {
    throw std::invalid_argument(std::string("conv2d: kernel larger than padded input along ") + axis);
  }
  if (span % stride != 0) {
    throw std::invalid_argument(std::string("conv2d: fractional output size along ") + axis + " (" +
                                std::to_string(in) + " + 2*" + std::to_string(pad) + " - " + std::to_string(kernel) +
                                " not divisible by stride " + std::to_string(stride) + ")");
  }
  return span / stride + 1;
}

namespace detail {

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernel,
                       std::type_identity_t<const Tensor<T>*> bias, const ConvSpec& spec) {
  spec.validate();
  if (input.rank() != 3) {
    throw std::invalid_argument("conv2d: input must be CxHxW, got " + shape_str(input.shape()));
  }
  if (kernel.rank() != 4) {
    throw std::invalid_argument("conv2d: kernel must be Ox(C/groups)xZxZ, got " + shape_str(kernel.shape()));
  }
  if (input.dim(0) != spec.in_channels) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(input.dim(0)) +
                                " do not match spec in_channels " + std::to_string(spec.in_channels));
  }
  if (kernel.dim(0) != spec.out_channels) {
    throw std::invalid_argument("conv2d: kernel out_channels " + std::to_string(kernel.dim(0)) +
                                " do not match spec out_channels " + std::to_string(spec.out_channels));
  }
  if (kernel.dim(1) != spec.in_channels / spec.groups) {
    throw std::invalid_argument("conv2d: kernel in_channels " + std::to_string(kernel.dim(1)) +
                                " do not match spec in_channels/groups " +
                                std::to_string(spec.in_channels / spec.groups));
  }
  if (kernel.dim(2) != spec.kernel_size || kernel.dim(3) != spec.kernel_size) {
    throw std::invalid_argument("conv2d: kernel spatial dims " + shape_str(kernel.shape()) +
                                " do not match spec kernel_size " + std::to_string(spec.kernel_size));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != spec.out_channels)) {
    throw std::invalid_argument("conv2d: bias must have shape [out_channels]");
  }
}

// Patch matrix for one group: (Cg*Z*Z) x (Ho*Wo). Out-of-bounds taps are zero.
template <typename T>
void im2col(const Tensor<T>& input, std::int64_t c0, std::int64_t cg, const ConvSpec& spec, std::int64_t ho,
            std::int64_t wo, std::vector<T>& cols) {
  const std::int64_t h = input.dim(1), w = input.dim(2), z = spec.kernel_size;
  cols.assign(static_cast<std::size_t>(cg * z * z * ho * wo), T(0));
  const std::int64_t ncols = ho * wo;
  for (std::int64_t c = 0; c < cg; ++c) {
    const T* src = input.data() + (c0 + c) * h * w;
    for (std::int64_t u = 0; u < z; ++u) {
      for (std::int64_t v = 0; v < z; ++v) {
        T* dst = cols.data() + ((c * z + u) * z + v) * ncols;
        for (std::int64_t i = 0; i < ho; ++i) {
          const std::int64_t y = i * spec.stride - spec.padding + u;
          if (y < 0 || y >= h) continue;
          const std::int64_t x0 = -spec.padding + v;
          for (std::int64_t j = 0; j < wo; ++j) {
            const std::int64_t x = x0 + j * spec.stride;
            if (x < 0 || x >= w) continue;
            dst[i * wo + j] = src[y * w + x];
          }
        }
      }
    }
  }
}

// Scatter-add of a patch-matrix gradient back onto the input gradient.
template <typename T>
void col2im_add(const std::vector<T>& cols, std::int64_t c0, std::int64_t cg, const ConvSpec& spec, std::int64_t ho,
                std::int64_t wo, Tensor<T>& grad_input) {
  const std::int64_t h = grad_input.dim(1), w = grad_input.dim(2), z = spec.kernel_size;
  const std::int64_t ncols = ho * wo;
  for (std::int64_t c = 0; c < cg; ++c) {
    T* dst = grad_input.data() + (c0 + c) * h * w;
    for (std::int64_t u = 0; u < z; ++u) {
      for (std::int64_t v = 0; v < z; ++v) {
        const T* src = cols.data() + ((c * z + u) * z + v) * ncols;
        for (std::int64_t i = 0; i < ho; ++i) {
          const std::int64_t y = i * spec.stride - spec.padding + u;
          if (y < 0 || y >= h) continue;
          const std::int64_t x0 = -spec.padding + v;
          for (std::int64_t j = 0; j < wo; ++j) {
            const std::int64_t x = x0 + j * spec.stride;
            if (x < 0 || x >= w) continue;
            dst[y * w + x] += src[i * wo + j];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation style convolution (no kernel flip), channels-first.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::type_identity_t<const Tensor<T>*> bias,
                 const ConvSpec& spec) {
  detail::check_conv_shapes(input, kernel, bias, spec);
  const std::int64_t ho = conv_out_size(input.dim(1), spec.padding, spec.kernel_size, spec.stride, "H");
  const std::int64_t wo = conv_out_size(input.dim(2), spec.padding, spec.kernel_size, spec.stride, "W");
  const std::int64_t cg = spec.in_channels / spec.groups;
  const std::int64_t og = spec.out_channels / spec.groups;
  const std::int64_t z = spec.kernel_size;

  Tensor<T> out({spec.out_channels, ho, wo});
  // scratch reused across calls to keep the hot loop off the allocator
  thread_local std::vector<T> cols;
  for (std::int64_t g = 0; g < spec.groups; ++g) {
    detail::im2col(input, g * cg, cg, spec, ho, wo, cols);
    ConstMatMap<T> kmat(kernel.data() + g * og * cg * z * z, og, cg * z * z);
    ConstMatMap<T> cmat(cols.data(), cg * z * z, ho * wo);
    MatMap<T> omat(out.data() + g * og * ho * wo, og, ho * wo);
    omat.noalias() = kmat * cmat;
  }
  if (bias) {
    for (std::int64_t o = 0; o < spec.out_channels; ++o) {
      T* row = out.data() + o * ho * wo;
      const T b = (*bias)[o];
      for (std::int64_t i = 0; i < ho * wo; ++i) row[i] += b;
    }
  }
  check_finite(out, "conv2d");
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const ConvSpec& spec) {
  return conv2d<T>(input, kernel, nullptr, spec);
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  Tensor<T> bias;  // empty when the forward had no bias
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& kernel,
                               const ConvSpec& spec, bool has_bias) {
  detail::check_conv_shapes(input, kernel, nullptr, spec);
  const std::int64_t ho = conv_out_size(input.dim(1), spec.padding, spec.kernel_size, spec.stride, "H");
  const std::int64_t wo = conv_out_size(input.dim(2), spec.padding, spec.kernel_size, spec.stride, "W");
  if (grad_out.shape() != std::vector<std::int64_t>{spec.out_channels, ho, wo}) {
    throw std::invalid_argument("conv2d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                                " does not match forward output");
  }
  const std::int64_t cg = spec.in_channels / spec.groups;
  const std::int64_t og = spec.out_channels / spec.groups;
  const std::int64_t z = spec.kernel_size;

  Conv2dGrads<T> grads;
  grads.input = Tensor<T>(input.shape());
  grads.kernel = Tensor<T>(kernel.shape());
  if (has_bias) grads.bias = Tensor<T>({spec.out_channels});

  std::vector<T> cols, col_grads(static_cast<std::size_t>(cg * z * z * ho * wo));
  for (std::int64_t g = 0; g < spec.groups; ++g) {
    detail::im2col(input, g * cg, cg, spec, ho, wo, cols);
    ConstMatMap<T> kmat(kernel.data() + g * og * cg * z * z, og, cg * z * z);
    ConstMatMap<T> cmat(cols.data(), cg * z * z, ho * wo);
    ConstMatMap<T> gmat(grad_out.data() + g * og * ho * wo, og, ho * wo);
    MatMap<T> dkmat(grads.kernel.data() + g * og * cg * z * z, og, cg * z * z);
    dkmat.noalias() = gmat * cmat.transpose();
    MatMap<T> dcmat(col_grads.data(), cg * z * z, ho * wo);
    dcmat.noalias() = kmat.transpose() * gmat;
    detail::col2im_add(col_grads, g * cg, cg, spec, ho, wo, grads.input);
  }
  if (has_bias) {
    for (std::int64_t o = 0; o < spec.out_channels; ++o) {
      const T* row = grad_out.data() + o * ho * wo;
      T s = 0;
      for (std::int64_t i = 0; i < ho * wo; ++i) s += row[i];
      grads.bias[o] = s;
    }
  }
  return grads;
}

// out = x W + b, rows are samples.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1) {
    throw std::invalid_argument("linear: expected x NxD_in, W D_inxD_out, b D_out");
  }
  if (x.dim(1) != w.dim(0)) {
    throw std::invalid_argument("linear: inner dimensions disagree, x " + shape_str(x.shape()) + " vs W " +
                                shape_str(w.shape()));
  }
  if (b.dim(0) != w.dim(1)) {
    throw std::invalid_argument("linear: bias length " + std::to_string(b.dim(0)) + " does not match W columns " +
                                std::to_string(w.dim(1)));
  }
  Tensor<T> out({x.dim(0), w.dim(1)});
  ConstMatMap<T> xm(x.data(), x.dim(0), x.dim(1));
  ConstMatMap<T> wm(w.data(), w.dim(0), w.dim(1));
  MatMap<T> om(out.data(), out.dim(0), out.dim(1));
  om.noalias() = xm * wm;
  for (std::int64_t i = 0; i < out.dim(0); ++i) {
    for (std::int64_t j = 0; j < out.dim(1); ++j) out(i, j) += b[j];
  }
  check_finite(out, "linear");
  return out;
}

template <typename T>
struct LinearGrads {
  Tensor<T> x;
  Tensor<T> w;
  Tensor<T> b;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& w) {
  if (grad_out.rank() != 2 || grad_out.dim(0) != x.dim(0) || grad_out.dim(1) != w.dim(1)) {
    throw std::invalid_argument("linear_backward: grad_out shape " + shape_str(grad_out.shape()) +
                                " does not match forward output");
  }
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({w.dim(1)})};
  ConstMatMap<T> gm(grad_out.data(), grad_out.dim(0), grad_out.dim(1));
  ConstMatMap<T> xm(x.data(), x.dim(0), x.dim(1));
  ConstMatMap<T> wm(w.data(), w.dim(0), w.dim(1));
  MatMap<T> dxm(g.x.data(), x.dim(0), x.dim(1));
  MatMap<T> dwm(g.w.data(), w.dim(0), w.dim(1));
  dxm.noalias() = gm * wm.transpose();
  dwm.noalias() = xm.transpose() * gm;
  for (std::int64_t j = 0; j < w.dim(1); ++j) {
    T s = 0;
    for (std::int64_t i = 0; i < grad_out.dim(0); ++i) s += grad_out(i, j);
    g.b[j] = s;
  }
  return g;
}

// Softmax over the trailing dimension of an arbitrary-rank tensor,
// stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax_lastdim: rank must be >= 1");
  const std::int64_t k = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / k;
  Tensor<T> out(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * k;
    T* o = out.data() + r * k;
    T m = in[0];
    for (std::int64_t i = 1; i < k; ++i) m = std::max(m, in[i]);
    T sum = 0;
    for (std::int64_t i = 0; i < k; ++i) {
      o[i] = std::exp(in[i] - m);
      sum += o[i];
    }
    for (std::int64_t i = 0; i < k; ++i) o[i] /= sum;
  }
  check_finite(out, "softmax_lastdim");
  return out;
}

// dx = p * (g - sum(p*g)) per slice, from the cached forward output p.
template <typename T>
Tensor<T> softmax_lastdim_backward(const Tensor<T>& grad_out, const Tensor<T>& softmax_out) {
  if (grad_out.shape() != softmax_out.shape()) {
    throw std::invalid_argument("softmax_lastdim_backward: grad/output shape mismatch");
  }
  const std::int64_t k = softmax_out.dim(softmax_out.rank() - 1);
  const std::int64_t rows = softmax_out.numel() / k;
  Tensor<T> dx(softmax_out.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = softmax_out.data() + r * k;
    const T* g = grad_out.data() + r * k;
    T dot = 0;
    for (std::int64_t i = 0; i < k; ++i) dot += p[i] * g[i];
    T* d = dx.data() + r * k;
    for (std::int64_t i = 0; i < k; ++i) d[i] = p[i] * (g[i] - dot);
  }
  return dx;
}

// Pooling window along one axis: cell i covers [floor(i*n/s), ceil((i+1)*n/s)).
inline std::pair<std::int64_t, std::int64_t> pool_window(std::int64_t i, std::int64_t n, std::int64_t s) {
  return {(i * n) / s, ((i + 1) * n + s - 1) / s};
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::int64_t s) {
  if (x.rank() != 3) throw std::invalid_argument("adaptive_avg_pool: input must be DxHxW");
  const std::int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (s < 1 || s > std::min(h, w)) {
    throw std::invalid_argument("adaptive_avg_pool: grid size " + std::to_string(s) + " out of range for " +
                                shape_str(x.shape()));
  }
  Tensor<T> out({d, s, s});
  for (std::int64_t i = 0; i < s; ++i) {
    auto [y0, y1] = pool_window(i, h, s);
    for (std::int64_t j = 0; j < s; ++j) {
      auto [x0, x1] = pool_window(j, w, s);
      const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
      for (std::int64_t c = 0; c < d; ++c) {
        T sum = 0;
        for (std::int64_t y = y0; y < y1; ++y) {
          for (std::int64_t xx = x0; xx < x1; ++xx) sum += x(c, y, xx);
        }
        out(c, i, j) = sum * inv;
      }
    }
  }
  check_finite(out, "adaptive_avg_pool");
  return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool_backward(const Tensor<T>& grad_out, const std::vector<std::int64_t>& input_shape,
                                     std::int64_t s) {
  if (input_shape.size() != 3) throw std::invalid_argument("adaptive_avg_pool_backward: input shape must be DxHxW");
  const std::int64_t d = input_shape[0], h = input_shape[1], w = input_shape[2];
  if (grad_out.shape() != std::vector<std::int64_t>{d, s, s}) {
    throw std::invalid_argument("adaptive_avg_pool_backward: grad_out shape mismatch");
  }
  Tensor<T> dx(input_shape);
  for (std::int64_t i = 0; i < s; ++i) {
    auto [y0, y1] = pool_window(i, h, s);
    for (std::int64_t j = 0; j < s; ++j) {
      auto [x0, x1] = pool_window(j, w, s);
      const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
      for (std::int64_t c = 0; c < d; ++c) {
        const T g = grad_out(c, i, j) * inv;
        for (std::int64_t y = y0; y < y1; ++y) {
          for (std::int64_t xx = x0; xx < x1; ++xx) dx(c, y, xx) += g;
        }
      }
    }
  }
  return dx;
}

// Per-row normalization with affine transform; rows are feature vectors.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() != 2) throw std::invalid_argument("layernorm: input must be NxD");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw std::invalid_argument("layernorm: gamma/beta length must equal feature dim " + std::to_string(d));
  }
  if (eps <= T(0)) throw std::invalid_argument("layernorm: eps must be positive");
  Tensor<T> out(x.shape());
  for (std::int64_t r = 0; r < n; ++r) {
    const T* in = x.data() + r * d;
    T* o = out.data() + r * d;
    T mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const T c = in[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (std::int64_t i = 0; i < d; ++i) o[i] = (in[i] - mean) * inv * gamma[i] + beta[i];
  }
  check_finite(out, "layernorm");
  return out;
}

template <typename T>
struct LayerNormGrads {
  Tensor<T> x;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
LayerNormGrads<T> layernorm_backward(const Tensor<T>& grad_out, const Tensor<T>& x, const Tensor<T>& gamma,
                                     T eps = T(1e-5)) {
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("layernorm_backward: grad/input shape mismatch");
  const std::int64_t n = x.dim(0), d = x.dim(1);
  LayerNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({d}), Tensor<T>({d})};
  for (std::int64_t r = 0; r < n; ++r) {
    const T* in = x.data() + r * d;
    const T* go = grad_out.data() + r * d;
    T* dx = g.x.data() + r * d;
    T mean = 0;
    for (std::int64_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const T c = in[i] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    T sum_gg = 0, sum_ggx = 0;
    for (std::int64_t i = 0; i < d; ++i) {
      const T xhat = (in[i] - mean) * inv;
      const T gg = go[i] * gamma[i];
      sum_gg += gg;
      sum_ggx += gg * xhat;
      g.gamma[i] += go[i] * xhat;
      g.beta[i] += go[i];
    }
    const T inv_d = T(1) / static_cast<T>(d);
    for (std::int64_t i = 0; i < d; ++i) {
      const T xhat = (in[i] - mean) * inv;
      dx[i] = inv * (go[i] * gamma[i] - inv_d * sum_gg - xhat * inv_d * sum_ggx);
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("relu_backward: grad/input shape mismatch");
  Tensor<T> dx(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return dx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T alpha) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * alpha;
  return out;
}

// Inference-mode batch norm over a CxHxW map with fixed per-channel statistics.
// There is no training-mode counterpart anywhere in this codebase.
template <typename T>
struct BatchNormParams {
  Tensor<T> mean;
  Tensor<T> var;
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-5);

  static BatchNormParams identity(std::int64_t channels) {
    BatchNormParams p;
    p.mean = Tensor<T>({channels});
    p.var = Tensor<T>::full({channels}, T(1));
    p.gamma = Tensor<T>::full({channels}, T(1));
    p.beta = Tensor<T>({channels});
    return p;
  }
};

template <typename T>
Tensor<T> batchnorm_inference(const Tensor<T>& x, const BatchNormParams<T>& p) {
  if (x.rank() != 3) throw std::invalid_argument("batchnorm_inference: input must be CxHxW");
  const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (p.mean.numel() != c || p.var.numel() != c || p.gamma.numel() != c || p.beta.numel() != c) {
    throw std::invalid_argument("batchnorm_inference: parameter channel count does not match input channels " +
                                std::to_string(c));
  }
  Tensor<T> out(x.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T inv = T(1) / std::sqrt(p.var[ch] + p.eps);
    const T a = p.gamma[ch] * inv;
    const T b = p.beta[ch] - p.mean[ch] * a;
    const T* in = x.data() + ch * hw;
    T* o = out.data() + ch * hw;
    for (std::int64_t i = 0; i < hw; ++i) o[i] = in[i] * a + b;
  }
  check_finite(out, "batchnorm_inference");
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> x;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_inference_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                                               const BatchNormParams<T>& p) {
  if (grad_out.shape() != x.shape()) throw std::invalid_argument("batchnorm_backward: grad/input shape mismatch");
  const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  BatchNormGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T inv = T(1) / std::sqrt(p.var[ch] + p.eps);
    const T a = p.gamma[ch] * inv;
    const T* in = x.data() + ch * hw;
    const T* go = grad_out.data() + ch * hw;
    T* dx = g.x.data() + ch * hw;
    T dgamma = 0, dbeta = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
      dx[i] = go[i] * a;
      dgamma += go[i] * (in[i] - p.mean[ch]) * inv;
      dbeta += go[i];
    }
    g.gamma[ch] = dgamma;
    g.beta[ch] = dbeta;
  }
  return g;
}

// Map helpers between CxHxW feature maps and (H*W)xC row matrices, used by the
// per-pixel layers (layernorm, FFN, standard attention).
template <typename T>
Tensor<T> chw_to_rows(const Tensor<T>& x) {
  if (x.rank() != 3) throw std::invalid_argument("chw_to_rows: input must be CxHxW");
  const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out({hw, c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* in = x.data() + ch * hw;
    for (std::int64_t i = 0; i < hw; ++i) out(i, ch) = in[i];
  }
  return out;
}

template <typename T>
Tensor<T> rows_to_chw(const Tensor<T>& rows, std::int64_t h, std::int64_t w) {
  if (rows.rank() != 2 || rows.dim(0) != h * w) {
    throw std::invalid_argument("rows_to_chw: row count does not match HxW");
  }
  const std::int64_t c = rows.dim(1);
  Tensor<T> out({c, h, w});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T* o = out.data() + ch * h * w;
    for (std::int64_t i = 0; i < h * w; ++i) o[i] = rows(i, ch);
  }
  return out;
}

}  // namespace ettk
