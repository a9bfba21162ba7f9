#pragma once

// Closed catalog of differentiable ops. Feature maps are stored channels-last
// ([N, H, W, C]) so that per-pixel channel vectors are contiguous; the only
// broadcasting supported is a trailing-axis vector ([C]) against [..., C].

#include <cmath>
#include <numbers>
#include <type_traits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mvheat/tensor.hpp"

namespace mvheat {

enum class Layout {
    planar,        ///< [..., H, W]
    channels_last  ///< [N, H, W, C]
};

/// A tensor viewed as outer x H x W x inner, with the spatial axes in the middle.
struct Planes {
    std::size_t outer = 1, h = 1, w = 1, inner = 1;

    std::size_t plane_size() const { return h * w * inner; }
    std::size_t size() const { return outer * plane_size(); }

    static Planes of(const Shape& s, Layout layout) {
        Planes p;
        if (layout == Layout::channels_last) {
            if (s.size() != 4) throw DimensionError("channels-last feature must be rank 4, got " + shape_str(s));
            p.outer = s[0];
            p.h = s[1];
            p.w = s[2];
            p.inner = s[3];
        } else {
            if (s.size() < 2) throw DimensionError("spatial tensor needs rank >= 2, got " + shape_str(s));
            p.h = s[s.size() - 2];
            p.w = s[s.size() - 1];
            for (std::size_t i = 0; i + 2 < s.size(); ++i) p.outer *= s[i];
        }
        return p;
    }
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, DF df) {
    const auto& xv = x.values();
    std::vector<T> y(xv.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
    return make_result<T>(x.shape(), std::move(y), {x}, name, [df](Node<T>& self) {
        T* gx = parent_grad(self, 0);
        if (!gx) return;
        const auto& xin = self.parents[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(xin[i], self.value[i]);
    });
}

template <class T>
T sigmoid_scalar(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_scalar(T x) {
    return std::log1p(std::exp(-std::abs(x))) + std::max(x, T(0));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
    return make_result<T>(a.shape(), std::move(y), {a, b}, "add", [](Node<T>& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (T* g = detail::parent_grad(self, p))
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
    return make_result<T>(a.shape(), std::move(y), {a, b}, "sub", [](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (T* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
    return make_result<T>(a.shape(), std::move(y), {a, b}, "mul", [](Node<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        if (T* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary<T>(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary<T>(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary<T>(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary<T>(
        x, "sigmoid", [](T v) { return detail::sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary<T>(
        x, "softplus", [](T v) { return detail::softplus_scalar(v); },
        [](T v, T) { return detail::sigmoid_scalar(v); });
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    return detail::unary<T>(
        x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
        [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v); });
}

enum class Elementwise { add, mul, exp, sigmoid, gelu, softplus };

/// Dispatch form of the elementwise family; `b` is used only by binary ops.
template <class T>
Tensor<T> elementwise(const Tensor<T>& a, Elementwise f, std::type_identity_t<const Tensor<T>*> b = nullptr) {
    switch (f) {
        case Elementwise::add:
        case Elementwise::mul:
            if (!b) throw DimensionError("elementwise: binary op needs a second operand");
            return f == Elementwise::add ? add(a, *b) : mul(a, *b);
        case Elementwise::exp: return exp(a);
        case Elementwise::sigmoid: return sigmoid(a);
        case Elementwise::gelu: return gelu(a);
        case Elementwise::softplus: return softplus(a);
    }
    throw ConfigError("elementwise: unknown function");
}

/// x[..., C] + b[C]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    const std::size_t c = b.size();
    if (x.rank() == 0 || x.shape().back() != c)
        throw DimensionError("add_bias: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> y(x.values());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % c];
    return make_result<T>(x.shape(), std::move(y), {x, b}, "add_bias", [c](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (T* g = detail::parent_grad(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
    });
}

// -------------------------------------------------------------- linear algebra

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    using detail::CMap;
    using detail::MMap;
    std::vector<T> y(m * n, T(0));
    MMap<T>(y.data(), m, n).noalias() = CMap<T>(a.data().data(), m, k) * CMap<T>(b.data().data(), k, n);
    return make_result<T>({m, n}, std::move(y), {a, b}, "matmul", [m, k, n](Node<T>& self) {
        const CMap<T> A(self.parents[0]->value.data(), m, k), B(self.parents[1]->value.data(), k, n);
        const CMap<T> G(self.grad.data(), m, n);
        if (T* ga = detail::parent_grad(self, 0)) MMap<T>(ga, m, k).noalias() += G * B.transpose();
        if (T* gb = detail::parent_grad(self, 1)) MMap<T>(gb, k, n).noalias() += A.transpose() * G;
    });
}

/// y[..., out] = x[..., in] W[in, out] (+ b[out]). Pass an empty tensor to skip the bias.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(0))
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    const std::size_t cin = weight.dim(0), cout = weight.dim(1), rows = x.size() / cin;
    const bool has_bias = bias.size() > 0;
    if (has_bias && bias.size() != cout)
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs " + std::to_string(cout) + " outputs");
    using detail::CMap;
    using detail::MMap;
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    std::vector<T> y(rows * cout, T(0));
    MMap<T> Y(y.data(), rows, cout);
    Y.noalias() = CMap<T>(x.data().data(), rows, cin) * CMap<T>(weight.data().data(), cin, cout);
    if (has_bias) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), cout);
    std::vector<Tensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result<T>(std::move(out_shape), std::move(y), inputs, "linear",
                          [rows, cin, cout, has_bias](Node<T>& self) {
                              const CMap<T> X(self.parents[0]->value.data(), rows, cin);
                              const CMap<T> W(self.parents[1]->value.data(), cin, cout);
                              const CMap<T> G(self.grad.data(), rows, cout);
                              if (T* gx = detail::parent_grad(self, 0)) MMap<T>(gx, rows, cin).noalias() += G * W.transpose();
                              if (T* gw = detail::parent_grad(self, 1)) MMap<T>(gw, cin, cout).noalias() += X.transpose() * G;
                              if (has_bias)
                                  if (T* gb = detail::parent_grad(self, 2))
                                      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, cout) += G.colwise().sum();
                          });
}

/// Normalizes over the trailing (channel) axis, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
    const std::size_t c = gamma.size();
    if (x.rank() == 0 || x.shape().back() != c || beta.size() != c)
        throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gamma " + shape_str(gamma.shape()) +
                             " / beta " + shape_str(beta.shape()));
    const std::size_t rows = x.size() / c;
    std::vector<T> y(x.size()), xhat(x.size()), inv_std(rows);
    const T* X = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = X + r * c;
        T mean = 0;
        for (std::size_t i = 0; i < c; ++i) mean += xr[i];
        mean /= T(c);
        T var = 0;
        for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= T(c);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t i = 0; i < c; ++i) {
            xhat[r * c + i] = (xr[i] - mean) * is;
            y[r * c + i] = xhat[r * c + i] * gamma[i] + beta[i];
        }
    }
    return make_result<T>(x.shape(), std::move(y), {x, gamma, beta}, "layer_norm",
                          [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                              const T* G = self.grad.data();
                              const T* gam = self.parents[1]->value.data();
                              T* gx = detail::parent_grad(self, 0);
                              T* gg = detail::parent_grad(self, 1);
                              T* gbeta = detail::parent_grad(self, 2);
                              std::vector<T> dxhat(c);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* gr = G + r * c;
                                  const T* xh = xhat.data() + r * c;
                                  if (gg)
                                      for (std::size_t i = 0; i < c; ++i) gg[i] += gr[i] * xh[i];
                                  if (gbeta)
                                      for (std::size_t i = 0; i < c; ++i) gbeta[i] += gr[i];
                                  if (!gx) continue;
                                  T s1 = 0, s2 = 0;
                                  for (std::size_t i = 0; i < c; ++i) {
                                      dxhat[i] = gr[i] * gam[i];
                                      s1 += dxhat[i];
                                      s2 += dxhat[i] * xh[i];
                                  }
                                  const T k = inv_std[r] / T(c);
                                  for (std::size_t i = 0; i < c; ++i)
                                      gx[r * c + i] += k * (T(c) * dxhat[i] - s1 - xh[i] * s2);
                              }
                          });
}

// --------------------------------------------------------------- convolutions

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   const char* op) {
    const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) - static_cast<long long>(k);
    if (stride == 0 || span < 0)
        throw ConfigError(std::string(op) + ": output extent < 1 (input " + std::to_string(in) + ", kernel " +
                          std::to_string(k) + ", padding " + std::to_string(pad) + ")");
    return static_cast<std::size_t>(span) / stride + 1;
}

}  // namespace detail

/// Dense convolution. x [N, H, W, Cin], weight [k, k, Cin, Cout], bias [Cout] or empty.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
    if (x.rank() != 4 || weight.rank() != 4 || weight.dim(0) != weight.dim(1) || weight.dim(2) != x.dim(3))
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
    const std::size_t k = weight.dim(0), co = weight.dim(3);
    const bool has_bias = bias.size() > 0;
    if (has_bias && bias.size() != co) throw DimensionError("conv2d: bias " + shape_str(bias.shape()));
    const std::size_t ho = detail::conv_out_extent(h, k, stride, padding, "conv2d");
    const std::size_t wo = detail::conv_out_extent(w, k, stride, padding, "conv2d");
    // im2col: one row per output pixel, columns ordered (ky, kx, ci) to match W[k, k, ci, co]
    const std::size_t rows = n * ho * wo, patch = k * k * ci;
    std::vector<T> cols(rows * patch, T(0));
    std::vector<long long> src(rows * k * k, -1);  // input pixel offset per (row, ky, kx), -1 for padding
    const T* X = x.data().data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::size_t r = (b * ho + oy) * wo + ox;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(padding);
                    if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const long long ix = static_cast<long long>(ox * stride + kx) - static_cast<long long>(padding);
                        if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                        const long long off = ((static_cast<long long>(b) * h + iy) * w + ix) * ci;
                        src[r * k * k + ky * k + kx] = off;
                        std::copy(X + off, X + off + ci, cols.data() + r * patch + (ky * k + kx) * ci);
                    }
                }
            }
    using detail::CMap;
    using detail::MMap;
    std::vector<T> y(rows * co);
    MMap<T> Y(y.data(), rows, co);
    Y.noalias() = CMap<T>(cols.data(), rows, patch) * CMap<T>(weight.data().data(), patch, co);
    if (has_bias) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), co);
    std::vector<Tensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result<T>({n, ho, wo, co}, std::move(y), inputs, "conv2d",
                          [=, cols = std::move(cols), src = std::move(src)](Node<T>& self) {
                              const CMap<T> G(self.grad.data(), rows, co);
                              if (T* gw = detail::parent_grad(self, 1))
                                  MMap<T>(gw, patch, co).noalias() += CMap<T>(cols.data(), rows, patch).transpose() * G;
                              if (has_bias)
                                  if (T* gb = detail::parent_grad(self, 2))
                                      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb, co) += G.colwise().sum();
                              if (T* gx = detail::parent_grad(self, 0)) {
                                  detail::RowMat<T> gcols =
                                      G * CMap<T>(self.parents[1]->value.data(), patch, co).transpose();
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t q = 0; q < k * k; ++q) {
                                          const long long off = src[r * k * k + q];
                                          if (off < 0) continue;
                                          const T* gc = gcols.data() + r * patch + q * ci;
                                          for (std::size_t i = 0; i < ci; ++i) gx[off + i] += gc[i];
                                      }
                              }
                          });
}

/// Per-channel convolution. x [N, H, W, C], weight [k, k, C], bias [C] or empty; k must be odd.
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding) {
    if (x.rank() != 4 || weight.rank() != 3 || weight.dim(0) != weight.dim(1) || weight.dim(2) != x.dim(3))
        throw DimensionError("depthwise_conv2d: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(weight.shape()));
    const std::size_t k = weight.dim(0);
    if (k % 2 == 0) throw ConfigError("depthwise_conv2d: kernel size must be odd, got " + std::to_string(k));
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const bool has_bias = bias.size() > 0;
    if (has_bias && bias.size() != c) throw DimensionError("depthwise_conv2d: bias " + shape_str(bias.shape()));
    const std::size_t ho = detail::conv_out_extent(h, k, stride, padding, "depthwise_conv2d");
    const std::size_t wo = detail::conv_out_extent(w, k, stride, padding, "depthwise_conv2d");
    std::vector<T> y(n * ho * wo * c, T(0));
    const T* X = x.data().data();
    const T* W = weight.data().data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T* acc = y.data() + ((b * ho + oy) * wo + ox) * c;
                if (has_bias)
                    for (std::size_t i = 0; i < c; ++i) acc[i] = bias[i];
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(padding);
                    if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const long long ix = static_cast<long long>(ox * stride + kx) - static_cast<long long>(padding);
                        if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                        const T* xp = X + ((b * h + iy) * w + ix) * c;
                        const T* wk = W + (ky * k + kx) * c;
                        for (std::size_t i = 0; i < c; ++i) acc[i] += xp[i] * wk[i];
                    }
                }
            }
    std::vector<Tensor<T>> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_result<T>({n, ho, wo, c}, std::move(y), inputs, "depthwise_conv2d", [=](Node<T>& self) {
        const T* X = self.parents[0]->value.data();
        const T* W = self.parents[1]->value.data();
        const T* G = self.grad.data();
        T* gx = detail::parent_grad(self, 0);
        T* gw = detail::parent_grad(self, 1);
        T* gb = has_bias ? detail::parent_grad(self, 2) : nullptr;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T* g = G + ((b * ho + oy) * wo + ox) * c;
                    if (gb)
                        for (std::size_t i = 0; i < c; ++i) gb[i] += g[i];
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(padding);
                        if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long long ix =
                                static_cast<long long>(ox * stride + kx) - static_cast<long long>(padding);
                            if (ix < 0 || ix >= static_cast<long long>(w)) continue;
                            const std::size_t xoff = ((b * h + iy) * w + ix) * c;
                            const std::size_t woff = (ky * k + kx) * c;
                            if (gx)
                                for (std::size_t i = 0; i < c; ++i) gx[xoff + i] += g[i] * W[woff + i];
                            if (gw)
                                for (std::size_t i = 0; i < c; ++i) gw[woff + i] += g[i] * X[xoff + i];
                        }
                    }
                }
    });
}

// ------------------------------------------------------------ reductions, views

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (auto v : x.data()) s += v;
    return make_result<T>({1}, {s}, {x}, "sum", [](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.size() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), T(1) / T(x.size()));
}

/// Global average pool: [N, H, W, C] -> [N, C].
template <class T>
Tensor<T> mean_spatial(const Tensor<T>& x) {
    if (x.rank() != 4) throw DimensionError("mean_spatial: expected [N,H,W,C], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    std::vector<T> y(n * c, T(0));
    const T inv = T(1) / T(hw);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t i = 0; i < c; ++i) y[b * c + i] += x[(b * hw + p) * c + i] * inv;
    return make_result<T>({n, c}, std::move(y), {x}, "mean_spatial", [n, hw, c, inv](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t p = 0; p < hw; ++p)
                    for (std::size_t i = 0; i < c; ++i) g[(b * hw + p) * c + i] += self.grad[b * c + i] * inv;
    });
}

/// Softmax along the trailing axis.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.rank() == 0) throw DimensionError("softmax_rows: scalar input");
    const std::size_t e = x.shape().back(), rows = x.size() / e;
    std::vector<T> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        T mx = x[r * e];
        for (std::size_t j = 1; j < e; ++j) mx = std::max(mx, x[r * e + j]);
        T s = 0;
        for (std::size_t j = 0; j < e; ++j) s += (y[r * e + j] = std::exp(x[r * e + j] - mx));
        for (std::size_t j = 0; j < e; ++j) y[r * e + j] /= s;
    }
    return make_result<T>(x.shape(), std::move(y), {x}, "softmax_rows", [rows, e](Node<T>& self) {
        T* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < e; ++j) dot += self.grad[r * e + j] * self.value[r * e + j];
            for (std::size_t j = 0; j < e; ++j)
                g[r * e + j] += self.value[r * e + j] * (self.grad[r * e + j] - dot);
        }
    });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    return make_result<T>(std::move(shape), x.values(), {x}, "reshape", [](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>(x.shape(), x.values());
}

/// Stack [n_i, D] row blocks into [sum n_i, D].
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t d = parts[0].shape().back();
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    std::vector<T> y;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != d)
            throw DimensionError("concat_rows: part " + shape_str(p.shape()) + " vs width " + std::to_string(d));
        offsets.push_back(y.size());
        y.insert(y.end(), p.data().begin(), p.data().end());
        rows += p.dim(0);
    }
    return make_result<T>({rows, d}, std::move(y), parts, "concat_rows", [offsets](Node<T>& self) {
        for (std::size_t p = 0; p < offsets.size(); ++p)
            if (T* g = detail::parent_grad(self, p)) {
                const std::size_t n = self.parents[p]->value.size();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offsets[p] + i];
            }
    });
}

/// Select rows of a [R, D] tensor.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
    if (x.rank() != 2) throw DimensionError("gather_rows: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t d = x.dim(1);
    std::vector<T> y(rows.size() * d);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= x.dim(0)) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(x.data().begin() + rows[r] * d, d, y.begin() + r * d);
    }
    return make_result<T>({rows.size(), d}, std::move(y), {x}, "gather_rows", [rows, d](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t r = 0; r < rows.size(); ++r)
                for (std::size_t j = 0; j < d; ++j) g[rows[r] * d + j] += self.grad[r * d + j];
    });
}

/// Columns [begin, end) of a [R, D] tensor.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (x.rank() != 2 || begin >= end || end > x.dim(1))
        throw DimensionError("slice_cols: bad range on " + shape_str(x.shape()));
    const std::size_t rows = x.dim(0), d = x.dim(1), w = end - begin;
    std::vector<T> y(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) y[r * w + j] = x[r * d + begin + j];
    return make_result<T>({rows, w}, std::move(y), {x}, "slice_cols", [=](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) g[r * d + begin + j] += self.grad[r * w + j];
    });
}

/// Zero-pad the spatial axes on the bottom/right to (h, w).
template <class T>
Tensor<T> pad_spatial(const Tensor<T>& x, Layout layout, std::size_t h, std::size_t w) {
    const Planes p = Planes::of(x.shape(), layout);
    if (h < p.h || w < p.w) throw DimensionError("pad_spatial: target smaller than input");
    if (h == p.h && w == p.w) return x;
    Shape s = x.shape();
    if (layout == Layout::channels_last) {
        s[1] = h;
        s[2] = w;
    } else {
        s[s.size() - 2] = h;
        s[s.size() - 1] = w;
    }
    std::vector<T> y(p.outer * h * w * p.inner, T(0));
    for (std::size_t o = 0; o < p.outer; ++o)
        for (std::size_t i = 0; i < p.h; ++i)
            std::copy_n(x.data().begin() + ((o * p.h + i) * p.w) * p.inner, p.w * p.inner,
                        y.begin() + ((o * h + i) * w) * p.inner);
    return make_result<T>(std::move(s), std::move(y), {x}, "pad_spatial", [p, h, w](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t o = 0; o < p.outer; ++o)
                for (std::size_t i = 0; i < p.h; ++i)
                    for (std::size_t j = 0; j < p.w * p.inner; ++j)
                        g[((o * p.h + i) * p.w) * p.inner + j] += self.grad[((o * h + i) * w) * p.inner + j];
    });
}

/// Keep the top-left (h, w) spatial window.
template <class T>
Tensor<T> crop_spatial(const Tensor<T>& x, Layout layout, std::size_t h, std::size_t w) {
    const Planes p = Planes::of(x.shape(), layout);
    if (h > p.h || w > p.w) throw DimensionError("crop_spatial: target larger than input");
    if (h == p.h && w == p.w) return x;
    Shape s = x.shape();
    if (layout == Layout::channels_last) {
        s[1] = h;
        s[2] = w;
    } else {
        s[s.size() - 2] = h;
        s[s.size() - 1] = w;
    }
    std::vector<T> y(p.outer * h * w * p.inner);
    for (std::size_t o = 0; o < p.outer; ++o)
        for (std::size_t i = 0; i < h; ++i)
            std::copy_n(x.data().begin() + ((o * p.h + i) * p.w) * p.inner, w * p.inner,
                        y.begin() + ((o * h + i) * w) * p.inner);
    return make_result<T>(std::move(s), std::move(y), {x}, "crop_spatial", [p, h, w](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t o = 0; o < p.outer; ++o)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w * p.inner; ++j)
                        g[((o * p.h + i) * p.w) * p.inner + j] += self.grad[((o * h + i) * w) * p.inner + j];
    });
}

/// Split [N, H, W, C] into non-overlapping win x win tiles: [N * (H/win) * (W/win), win, win, C].
template <class T>
Tensor<T> to_windows(const Tensor<T>& x, std::size_t win) {
    if (x.rank() != 4 || win == 0 || x.dim(1) % win || x.dim(2) % win)
        throw ConfigError("to_windows: window " + std::to_string(win) + " does not tile " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t th = h / win, tw = w / win;
    std::vector<std::size_t> src(x.size());
    std::vector<T> y(x.size());
    std::size_t out = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ty = 0; ty < th; ++ty)
            for (std::size_t tx = 0; tx < tw; ++tx)
                for (std::size_t i = 0; i < win; ++i)
                    for (std::size_t j = 0; j < win; ++j)
                        for (std::size_t ch = 0; ch < c; ++ch, ++out) {
                            src[out] = ((b * h + ty * win + i) * w + tx * win + j) * c + ch;
                            y[out] = x[src[out]];
                        }
    return make_result<T>({n * th * tw, win, win, c}, std::move(y), {x}, "to_windows",
                          [src = std::move(src)](Node<T>& self) {
                              if (T* g = detail::parent_grad(self, 0))
                                  for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                          });
}

/// Inverse of to_windows for a batch of n images of size (h, w).
template <class T>
Tensor<T> from_windows(const Tensor<T>& x, std::size_t n, std::size_t h, std::size_t w) {
    const std::size_t win = x.dim(1), c = x.dim(3);
    if (x.rank() != 4 || h % win || w % win || x.dim(0) != n * (h / win) * (w / win))
        throw DimensionError("from_windows: " + shape_str(x.shape()) + " does not tile " + std::to_string(h) + "x" +
                             std::to_string(w));
    const std::size_t th = h / win, tw = w / win;
    std::vector<std::size_t> dst(x.size());
    std::vector<T> y(x.size());
    std::size_t in = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ty = 0; ty < th; ++ty)
            for (std::size_t tx = 0; tx < tw; ++tx)
                for (std::size_t i = 0; i < win; ++i)
                    for (std::size_t j = 0; j < win; ++j)
                        for (std::size_t ch = 0; ch < c; ++ch, ++in) {
                            dst[in] = ((b * h + ty * win + i) * w + tx * win + j) * c + ch;
                            y[dst[in]] = x[in];
                        }
    return make_result<T>({n, h, w, c}, std::move(y), {x}, "from_windows", [dst = std::move(dst)](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < dst.size(); ++i) g[i] += self.grad[dst[i]];
    });
}

}  // namespace mvheat
