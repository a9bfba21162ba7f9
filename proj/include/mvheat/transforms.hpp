#pragma once

// Orthonormal 2D DCT-II and Haar, and the unnormalized 2D DFT, over the
// spatial axes of a tensor. Each axis is transformed with a dense matrix when
// its extent is <= 64 and with an O(n log n) (or O(n)) algorithm above; the
// two paths are interchangeable and tests hold one against the other.

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "mvheat/ops.hpp"

namespace mvheat {

enum class TransformPath { automatic, direct, fast };

inline constexpr std::size_t kDirectTransformLimit = 64;

enum class FrequencyConvention {
    cosine,  ///< DCT / Haar: v(i) = pi * i / n
    fourier  ///< DFT: v(i) = 2 pi * min(i, n - i) / n
};

/// Angular frequency (radians per sample) attached to each coefficient row/column.
struct FrequencyGrid {
    std::size_t height = 0, width = 0;
    FrequencyConvention convention = FrequencyConvention::cosine;
    std::vector<double> vx;  // per row
    std::vector<double> vy;  // per column

    static std::vector<double> axis(std::size_t n, FrequencyConvention c) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i)
            v[i] = c == FrequencyConvention::cosine
                       ? std::numbers::pi * double(i) / double(n)
                       : 2.0 * std::numbers::pi * double(std::min(i, n - i)) / double(n);
        return v;
    }

    static FrequencyGrid make(std::size_t h, std::size_t w, FrequencyConvention c) {
        return {h, w, c, axis(h, c), axis(w, c)};
    }

    double squared(std::size_t i, std::size_t j) const { return vx[i] * vx[i] + vy[j] * vy[j]; }
};

inline bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

inline std::size_t next_power_of_two(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

namespace spectral {

enum class Axis { rows, cols };

/// The line structure of one spatial axis: lines[a, i, b], i along the axis.
struct AxisView {
    std::size_t before, n, after;
};

inline AxisView view(const Planes& p, Axis axis) {
    return axis == Axis::rows ? AxisView{p.outer, p.h, p.w * p.inner} : AxisView{p.outer * p.h, p.w, p.inner};
}

// --------------------------------------------------------------- matrix cache

template <class T>
class MatrixCache {
public:
    using Matrix = std::shared_ptr<const std::vector<T>>;
    template <class Build>
    static Matrix get(int kind, std::size_t n, Build build) {
        static std::mutex mu;
        static std::map<std::pair<int, std::size_t>, Matrix> cache;
        std::lock_guard<std::mutex> lock(mu);
        auto& slot = cache[{kind, n}];
        if (!slot) slot = std::make_shared<const std::vector<T>>(build(n));
        return slot;
    }
};

/// Orthonormal DCT-II matrix, row k = frequency.
template <class T>
typename MatrixCache<T>::Matrix dct_matrix(std::size_t n) {
    return MatrixCache<T>::get(0, n, [](std::size_t n) {
        std::vector<T> m(n * n);
        for (std::size_t k = 0; k < n; ++k) {
            const double s = k == 0 ? std::sqrt(1.0 / double(n)) : std::sqrt(2.0 / double(n));
            for (std::size_t i = 0; i < n; ++i)
                m[k * n + i] = T(s * std::cos(std::numbers::pi * double(k) * (2.0 * double(i) + 1.0) / (2.0 * double(n))));
        }
        return m;
    });
}

template <class T>
typename MatrixCache<T>::Matrix dft_cos_matrix(std::size_t n) {
    return MatrixCache<T>::get(1, n, [](std::size_t n) {
        std::vector<T> m(n * n);
        for (std::size_t u = 0; u < n; ++u)
            for (std::size_t i = 0; i < n; ++i)
                m[u * n + i] = T(std::cos(2.0 * std::numbers::pi * double((u * i) % n) / double(n)));
        return m;
    });
}

template <class T>
typename MatrixCache<T>::Matrix dft_sin_matrix(std::size_t n) {
    return MatrixCache<T>::get(2, n, [](std::size_t n) {
        std::vector<T> m(n * n);
        for (std::size_t u = 0; u < n; ++u)
            for (std::size_t i = 0; i < n; ++i)
                m[u * n + i] = T(std::sin(2.0 * std::numbers::pi * double((u * i) % n) / double(n)));
        return m;
    });
}

/// One analysis level of the orthonormal Haar transform on n (even) samples:
/// rows [0, n/2) are averages, rows [n/2, n) are differences.
template <class T>
typename MatrixCache<T>::Matrix haar_level_matrix(std::size_t n) {
    return MatrixCache<T>::get(3, n, [](std::size_t n) {
        std::vector<T> m(n * n, T(0));
        const T r = T(std::numbers::sqrt2 / 2.0);
        for (std::size_t i = 0; i < n / 2; ++i) {
            m[i * n + 2 * i] = r;
            m[i * n + 2 * i + 1] = r;
            m[(n / 2 + i) * n + 2 * i] = r;
            m[(n / 2 + i) * n + 2 * i + 1] = -r;
        }
        return m;
    });
}

/// out[a, i, b] = sum_j M[i, j] in[a, j, b]  (or M[j, i] when transposed).
template <class T>
void apply_matrix(const T* in, T* out, AxisView v, const std::vector<T>& m, bool transpose) {
    using detail::CMap;
    using detail::MMap;
    const std::size_t n = v.n, b = v.after;
    const CMap<T> M(m.data(), n, n);
    for (std::size_t a = 0; a < v.before; ++a) {
        const CMap<T> src(in + a * n * b, n, b);
        MMap<T> dst(out + a * n * b, n, b);
        if (transpose)
            dst.noalias() = M.transpose() * src;
        else
            dst.noalias() = M * src;
    }
}

// ------------------------------------------------------------------------ FFT

template <class T>
using Cx = std::complex<T>;

/// Mixed-radix recursive DFT of arbitrary length. `tw` holds exp(sign*2*pi*i*j/N_top),
/// and W_n^j = tw[j * tw_step] for this sub-length n.
template <class T>
void fft_recursive(const Cx<T>* in, std::size_t stride, Cx<T>* out, std::size_t n, const Cx<T>* tw,
                   std::size_t tw_step, std::vector<Cx<T>>& scratch) {
    if (n == 1) {
        out[0] = in[0];
        return;
    }
    std::size_t p = 2;
    while (p * p <= n && n % p) ++p;
    if (n % p) p = n;
    const std::size_t m = n / p;
    for (std::size_t r = 0; r < p; ++r) fft_recursive(in + r * stride, stride * p, out + r * m, m, tw, tw_step * p, scratch);
    if (scratch.size() < n) scratch.resize(n);
    for (std::size_t k = 0; k < m; ++k)
        for (std::size_t q = 0; q < p; ++q) {
            const std::size_t idx = k + q * m;
            Cx<T> acc = out[k];
            for (std::size_t r = 1; r < p; ++r) acc += tw[((r * idx) % n) * tw_step] * out[r * m + k];
            scratch[idx] = acc;
        }
    std::copy_n(scratch.begin(), n, out);
}

/// Unnormalized DFT; sign = -1 forward, +1 inverse.
template <class T>
void fft(std::vector<Cx<T>>& data, int sign) {
    const std::size_t n = data.size();
    if (n <= 1) return;
    std::vector<Cx<T>> tw(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double ang = double(sign) * 2.0 * std::numbers::pi * double(j) / double(n);
        tw[j] = Cx<T>(T(std::cos(ang)), T(std::sin(ang)));
    }
    std::vector<Cx<T>> out(n), scratch(n);
    fft_recursive(data.data(), 1, out.data(), n, tw.data(), 1, scratch);
    data.swap(out);
}

template <class T>
void dct_line_fast(std::vector<T>& x) {
    const std::size_t n = x.size();
    std::vector<Cx<T>> v(n);
    for (std::size_t k = 0; 2 * k < n; ++k) v[k] = x[2 * k];
    for (std::size_t k = 0; 2 * k + 1 < n; ++k) v[n - 1 - k] = x[2 * k + 1];
    fft(v, -1);
    for (std::size_t k = 0; k < n; ++k) {
        const double ang = -std::numbers::pi * double(k) / (2.0 * double(n));
        const double s = k == 0 ? std::sqrt(1.0 / double(n)) : std::sqrt(2.0 / double(n));
        x[k] = T(s * (double(v[k].real()) * std::cos(ang) - double(v[k].imag()) * std::sin(ang)));
    }
}

template <class T>
void idct_line_fast(std::vector<T>& x) {
    const std::size_t n = x.size();
    std::vector<double> y(n + 1, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const double s = k == 0 ? std::sqrt(1.0 / double(n)) : std::sqrt(2.0 / double(n));
        y[k] = double(x[k]) / s;
    }
    std::vector<Cx<T>> v(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double ang = std::numbers::pi * double(k) / (2.0 * double(n));
        const std::complex<double> z = std::polar(1.0, ang) * std::complex<double>(y[k], -y[n - k]);
        v[k] = Cx<T>(T(z.real()), T(z.imag()));
    }
    fft(v, +1);
    for (std::size_t k = 0; 2 * k < n; ++k) x[2 * k] = v[k].real() / T(n);
    for (std::size_t k = 0; 2 * k + 1 < n; ++k) x[2 * k + 1] = v[n - 1 - k].real() / T(n);
}

template <class T, class Fn>
void for_each_line(T* data, AxisView v, Fn fn) {
    std::vector<T> line(v.n);
    for (std::size_t a = 0; a < v.before; ++a)
        for (std::size_t b = 0; b < v.after; ++b) {
            T* base = data + a * v.n * v.after + b;
            for (std::size_t i = 0; i < v.n; ++i) line[i] = base[i * v.after];
            fn(line);
            for (std::size_t i = 0; i < v.n; ++i) base[i * v.after] = line[i];
        }
}

inline bool use_fast(std::size_t n, TransformPath path) {
    return path == TransformPath::fast || (path == TransformPath::automatic && n > kDirectTransformLimit);
}

// ---------------------------------------------------------------- raw kernels

template <class T>
void dct_axis(std::vector<T>& buf, const Planes& p, Axis axis, bool inverse, TransformPath path) {
    const AxisView v = view(p, axis);
    if (v.n <= 1) return;
    if (use_fast(v.n, path)) {
        for_each_line(buf.data(), v, [inverse](std::vector<T>& line) {
            inverse ? idct_line_fast(line) : dct_line_fast(line);
        });
        return;
    }
    std::vector<T> out(buf.size());
    apply_matrix(buf.data(), out.data(), v, *dct_matrix<T>(v.n), inverse);
    buf.swap(out);
}

template <class T>
std::vector<T> dct2_raw(std::span<const T> in, const Planes& p, bool inverse, TransformPath path = TransformPath::automatic) {
    std::vector<T> buf(in.begin(), in.end());
    dct_axis(buf, p, Axis::rows, inverse, path);
    dct_axis(buf, p, Axis::cols, inverse, path);
    return buf;
}

/// Unnormalized complex DFT over both spatial axes; `im` may be empty for real input.
template <class T>
void dft2_raw(std::vector<T>& re, std::vector<T>& im, const Planes& p, int sign,
              TransformPath path = TransformPath::automatic) {
    if (im.empty()) im.assign(re.size(), T(0));
    for (Axis axis : {Axis::rows, Axis::cols}) {
        const AxisView v = view(p, axis);
        if (v.n <= 1) continue;
        if (use_fast(v.n, path)) {
            std::vector<Cx<T>> line(v.n);
            for (std::size_t a = 0; a < v.before; ++a)
                for (std::size_t b = 0; b < v.after; ++b) {
                    const std::size_t base = a * v.n * v.after + b;
                    for (std::size_t i = 0; i < v.n; ++i) line[i] = {re[base + i * v.after], im[base + i * v.after]};
                    fft(line, sign);
                    for (std::size_t i = 0; i < v.n; ++i) {
                        re[base + i * v.after] = line[i].real();
                        im[base + i * v.after] = line[i].imag();
                    }
                }
            continue;
        }
        const auto& c = *dft_cos_matrix<T>(v.n);
        const auto& s = *dft_sin_matrix<T>(v.n);
        std::vector<T> cr(re.size()), ci(re.size()), sr(re.size()), si(re.size());
        apply_matrix(re.data(), cr.data(), v, c, false);
        apply_matrix(im.data(), ci.data(), v, c, false);
        apply_matrix(re.data(), sr.data(), v, s, false);
        apply_matrix(im.data(), si.data(), v, s, false);
        // exp(sign * i * theta) = cos + sign * i * sin
        const T sg = T(sign);
        for (std::size_t q = 0; q < re.size(); ++q) {
            re[q] = cr[q] - sg * si[q];
            im[q] = ci[q] + sg * sr[q];
        }
    }
}

/// Full-depth 2D Haar: each level transforms rows then columns of the current
/// low-low band, whose extent halves along every axis still longer than 1.
template <class T>
std::vector<T> haar2_raw(std::span<const T> in, const Planes& p, bool inverse,
                         TransformPath path = TransformPath::automatic) {
    if (!is_power_of_two(p.h) || !is_power_of_two(p.w))
        throw ConfigError("haar2: extents must be powers of two, got " + std::to_string(p.h) + "x" +
                          std::to_string(p.w));
    std::vector<T> buf(in.begin(), in.end());
    std::vector<std::pair<std::size_t, std::size_t>> bands;
    for (std::size_t bh = p.h, bw = p.w; bh > 1 || bw > 1; bh = std::max<std::size_t>(1, bh / 2), bw = std::max<std::size_t>(1, bw / 2))
        bands.emplace_back(bh, bw);
    if (inverse) std::reverse(bands.begin(), bands.end());

    const T r = T(std::numbers::sqrt2 / 2.0);
    std::vector<T> line, tmp;
    // butterfly on one strided line of length n, in place
    auto level_line = [&](T* base, std::size_t n, std::size_t stride) {
        line.resize(n);
        tmp.assign(n, T(0));
        for (std::size_t i = 0; i < n; ++i) line[i] = base[i * stride];
        const std::size_t half = n / 2;
        for (std::size_t i = 0; i < half; ++i) {
            if (!inverse) {
                tmp[i] = r * (line[2 * i] + line[2 * i + 1]);
                tmp[half + i] = r * (line[2 * i] - line[2 * i + 1]);
            } else {
                tmp[2 * i] = r * (line[i] + line[half + i]);
                tmp[2 * i + 1] = r * (line[i] - line[half + i]);
            }
        }
        for (std::size_t i = 0; i < n; ++i) base[i * stride] = tmp[i];
    };

    const std::size_t row_stride = p.w * p.inner;
    using Strided = Eigen::Map<detail::RowMat<T>, 0, Eigen::OuterStride<>>;
    for (auto [bh, bw] : bands) {
        const bool direct_rows = bh > 1 && !use_fast(bh, path), direct_cols = bw > 1 && !use_fast(bw, path);
        const auto mrows = direct_rows ? haar_level_matrix<T>(bh) : nullptr;
        const auto mcols = direct_cols ? haar_level_matrix<T>(bw) : nullptr;
        // band-sized level matrix times a [n, cols] block, in place
        auto apply_level = [&](const std::vector<T>& m, std::size_t n, Strided block) {
            const detail::CMap<T> M(m.data(), n, n);
            detail::RowMat<T> out = inverse ? detail::RowMat<T>(M.transpose() * block) : detail::RowMat<T>(M * block);
            block = out;
        };
        for (std::size_t o = 0; o < p.outer; ++o) {
            T* plane = buf.data() + o * p.plane_size();
            if (bh > 1) {
                if (direct_rows)
                    apply_level(*mrows, bh, Strided(plane, bh, bw * p.inner, Eigen::OuterStride<>(row_stride)));
                else
                    for (std::size_t j = 0; j < bw; ++j)
                        for (std::size_t c = 0; c < p.inner; ++c) level_line(plane + j * p.inner + c, bh, row_stride);
            }
            if (bw > 1)
                for (std::size_t i = 0; i < bh; ++i) {
                    if (direct_cols)
                        apply_level(*mcols, bw, Strided(plane + i * row_stride, bw, p.inner, Eigen::OuterStride<>(p.inner)));
                    else
                        for (std::size_t c = 0; c < p.inner; ++c) level_line(plane + i * row_stride + c, bw, p.inner);
                }
        }
    }
    return buf;
}

}  // namespace spectral

// ------------------------------------------------------- differentiable forms

template <class T>
struct ComplexPair {
    Tensor<T> real;
    Tensor<T> imag;
};

template <class T>
Tensor<T> dct2(const Tensor<T>& x, Layout layout = Layout::planar, TransformPath path = TransformPath::automatic);
template <class T>
Tensor<T> idct2(const Tensor<T>& x, Layout layout = Layout::planar, TransformPath path = TransformPath::automatic);

/// Orthonormal type-II DCT along both spatial axes.
template <class T>
Tensor<T> dct2(const Tensor<T>& x, Layout layout, TransformPath path) {
    const Planes p = Planes::of(x.shape(), layout);
    return make_result<T>(x.shape(), spectral::dct2_raw<T>(x.data(), p, false, path), {x}, "dct2",
                          [p, path](Node<T>& self) {
                              if (T* g = detail::parent_grad(self, 0)) {
                                  auto back = spectral::dct2_raw<T>(self.grad, p, true, path);
                                  for (std::size_t i = 0; i < back.size(); ++i) g[i] += back[i];
                              }
                          });
}

/// Type-III inverse of dct2.
template <class T>
Tensor<T> idct2(const Tensor<T>& x, Layout layout, TransformPath path) {
    const Planes p = Planes::of(x.shape(), layout);
    return make_result<T>(x.shape(), spectral::dct2_raw<T>(x.data(), p, true, path), {x}, "idct2",
                          [p, path](Node<T>& self) {
                              if (T* g = detail::parent_grad(self, 0)) {
                                  auto back = spectral::dct2_raw<T>(self.grad, p, false, path);
                                  for (std::size_t i = 0; i < back.size(); ++i) g[i] += back[i];
                              }
                          });
}

template <class T>
Tensor<T> haar2(const Tensor<T>& x, Layout layout = Layout::planar, TransformPath path = TransformPath::automatic) {
    const Planes p = Planes::of(x.shape(), layout);
    return make_result<T>(x.shape(), spectral::haar2_raw<T>(x.data(), p, false, path), {x}, "haar2",
                          [p, path](Node<T>& self) {
                              if (T* g = detail::parent_grad(self, 0)) {
                                  auto back = spectral::haar2_raw<T>(self.grad, p, true, path);
                                  for (std::size_t i = 0; i < back.size(); ++i) g[i] += back[i];
                              }
                          });
}

template <class T>
Tensor<T> ihaar2(const Tensor<T>& x, Layout layout = Layout::planar, TransformPath path = TransformPath::automatic) {
    const Planes p = Planes::of(x.shape(), layout);
    return make_result<T>(x.shape(), spectral::haar2_raw<T>(x.data(), p, true, path), {x}, "ihaar2",
                          [p, path](Node<T>& self) {
                              if (T* g = detail::parent_grad(self, 0)) {
                                  auto back = spectral::haar2_raw<T>(self.grad, p, false, path);
                                  for (std::size_t i = 0; i < back.size(); ++i) g[i] += back[i];
                              }
                          });
}

/// Unnormalized forward DFT of a real field. The real and imaginary outputs
/// are separate graph nodes; for F = R + iI (both symmetric), their adjoints
/// are Re(F g_re) and Im(F g_im).
template <class T>
ComplexPair<T> dft2(const Tensor<T>& x, Layout layout = Layout::planar, TransformPath path = TransformPath::automatic) {
    const Planes p = Planes::of(x.shape(), layout);
    std::vector<T> re(x.values()), im;
    spectral::dft2_raw(re, im, p, -1, path);
    auto back = [p, path](bool take_imag) {
        return [p, path, take_imag](Node<T>& self) {
            if (T* g = detail::parent_grad(self, 0)) {
                std::vector<T> r(self.grad), i;
                spectral::dft2_raw(r, i, p, -1, path);
                const auto& src = take_imag ? i : r;
                for (std::size_t q = 0; q < src.size(); ++q) g[q] += src[q];
            }
        };
    };
    auto real = make_result<T>(x.shape(), std::move(re), {x}, "dft2.real", back(false));
    auto imag = make_result<T>(x.shape(), std::move(im), {x}, "dft2.imag", back(true));
    return {real, imag};
}

/// Largest violation of X(i, j) = conj X(-i mod H, -j mod W), over all planes.
template <class T>
double hermitian_defect(const ComplexPair<T>& x, Layout layout = Layout::planar) {
    const Planes p = Planes::of(x.real.shape(), layout);
    double worst = 0;
    for (std::size_t o = 0; o < p.outer; ++o)
        for (std::size_t i = 0; i < p.h; ++i)
            for (std::size_t j = 0; j < p.w; ++j)
                for (std::size_t c = 0; c < p.inner; ++c) {
                    const std::size_t a = ((o * p.h + i) * p.w + j) * p.inner + c;
                    const std::size_t b = ((o * p.h + (p.h - i) % p.h) * p.w + (p.w - j) % p.w) * p.inner + c;
                    worst = std::max(worst, std::abs(double(x.real[a]) - double(x.real[b])));
                    worst = std::max(worst, std::abs(double(x.imag[a]) + double(x.imag[b])));
                }
    return worst;
}

inline constexpr double kHermitianTolerance = 1e-6;

/// Inverse DFT with 1/(H*W) normalization, returning the real field. The
/// spectrum must be Hermitian (relative tolerance 1e-6) unless the check is
/// disabled, in which case the real part of the inverse is returned.
template <class T>
Tensor<T> idft2(const ComplexPair<T>& x, Layout layout = Layout::planar, TransformPath path = TransformPath::automatic,
                bool require_hermitian = true) {
    detail::require_same_shape(x.real, x.imag, "idft2");
    const Planes p = Planes::of(x.real.shape(), layout);
    if (require_hermitian) {
        double scale = 1.0;
        for (auto v : x.real.data()) scale = std::max(scale, std::abs(double(v)));
        for (auto v : x.imag.data()) scale = std::max(scale, std::abs(double(v)));
        const double defect = hermitian_defect(x, layout);
        if (defect > kHermitianTolerance * scale)
            throw SymmetryError("idft2: spectrum is not Hermitian (defect " + std::to_string(defect) +
                                "); a real inverse is undefined");
    }
    std::vector<T> re(x.real.values()), im(x.imag.values());
    spectral::dft2_raw(re, im, p, +1, path);
    const T inv = T(1) / T(p.h * p.w);
    for (auto& v : re) v *= inv;
    return make_result<T>(x.real.shape(), std::move(re), {x.real, x.imag}, "idft2", [p, path, inv](Node<T>& self) {
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        if (!ga && !gb) return;
        std::vector<T> r(self.grad), i;
        spectral::dft2_raw(r, i, p, -1, path);
        for (std::size_t q = 0; q < r.size(); ++q) {
            if (ga) ga[q] += r[q] * inv;
            if (gb) gb[q] += i[q] * inv;
        }
    });
}

}  // namespace mvheat
