#pragma once

// Heat conduction operator: U_t = T^-1( T(U_0) * exp(-k (vx^2 + vy^2) t) ),
// for T in {DCT, DFT, Haar}; plus an explicit finite-difference integrator of
// u_t = k (u_xx + u_yy) that serves as an independent oracle for it.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mvheat/transforms.hpp"

namespace mvheat {

/// Expert order is fixed; routing rows index into it.
enum class Expert { dct = 0, dft = 1, haar = 2 };

inline const char* to_string(Expert e) {
    switch (e) {
        case Expert::dct: return "dct";
        case Expert::dft: return "dft";
        case Expert::haar: return "haar";
    }
    return "?";
}

inline Expert parse_expert(const std::string& s) {
    if (s == "dct" || s == "DCT") return Expert::dct;
    if (s == "dft" || s == "DFT") return Expert::dft;
    if (s == "haar" || s == "HAAR" || s == "ht" || s == "HT") return Expert::haar;
    throw ConfigError("unknown expert '" + s + "' (expected dct, dft or haar)");
}

inline FrequencyConvention convention_for(Expert e) {
    return e == Expert::dft ? FrequencyConvention::fourier : FrequencyConvention::cosine;
}

/// Per-frequency thermal diffusivity, [H, W], every element >= 0.
template <class T>
class DiffusivityMap {
public:
    explicit DiffusivityMap(Tensor<T> k) : k_(std::move(k)) {
        if (k_.rank() != 2) throw DimensionError("diffusivity map must be [H, W], got " + shape_str(k_.shape()));
        for (auto v : k_.data())
            if (!(v >= T(0))) throw InvariantError("diffusivity map has a negative or NaN element");
    }
    static DiffusivityMap constant(std::size_t h, std::size_t w, T value) {
        return DiffusivityMap(Tensor<T>::full({h, w}, value));
    }
    const Tensor<T>& tensor() const { return k_; }
    std::size_t height() const { return k_.dim(0); }
    std::size_t width() const { return k_.dim(1); }

private:
    Tensor<T> k_;
};

enum class KMode { fixed, learnable_scalar, predicted };

inline KMode parse_k_mode(const std::string& s) {
    if (s == "fixed") return KMode::fixed;
    if (s == "learnable_scalar" || s == "learnable") return KMode::learnable_scalar;
    if (s == "predicted" || s == "predicted_from_fes" || s == "fes") return KMode::predicted;
    throw ConfigError("unknown k_mode '" + s + "' (expected fixed, learnable_scalar or predicted)");
}

inline const char* to_string(KMode m) {
    switch (m) {
        case KMode::fixed: return "fixed";
        case KMode::learnable_scalar: return "learnable_scalar";
        case KMode::predicted: return "predicted";
    }
    return "?";
}

struct HCOConfig {
    double t = 1.0;  // diffusion time, never trained
    KMode k_mode = KMode::predicted;
    double k_fixed = 0.6931471805599453;  // softplus(0), the predicted-mode starting point

    void validate() const {
        if (!(t > 0)) throw ConfigError("model.t: diffusion time must be positive");
        if (!(k_fixed >= 0)) throw ConfigError("model.k_fixed: diffusivity must be nonnegative");
    }
};

/// M(i, j) = exp(-k(i, j) (vx(i)^2 + vy(j)^2) t); differentiable in k.
template <class T>
Tensor<T> heat_multiplier(const Tensor<T>& k, double t, const FrequencyGrid& grid) {
    if (!(t > 0)) throw ConfigError("heat_multiplier: t must be positive");
    if (k.rank() != 2 || k.dim(0) != grid.height || k.dim(1) != grid.width)
        throw DimensionError("heat_multiplier: k " + shape_str(k.shape()) + " vs grid " + std::to_string(grid.height) +
                             "x" + std::to_string(grid.width));
    const std::size_t h = grid.height, w = grid.width;
    std::vector<T> rate(h * w), m(h * w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const T kv = k[i * w + j];
            if (kv < T(0)) throw InvariantError("heat_multiplier: negative diffusivity at (" + std::to_string(i) + ", " +
                                                std::to_string(j) + ")");
            rate[i * w + j] = T(grid.squared(i, j) * t);
            m[i * w + j] = std::exp(-kv * rate[i * w + j]);
        }
    return make_result<T>({h, w}, std::move(m), {k}, "heat_multiplier", [rate = std::move(rate)](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < rate.size(); ++i) g[i] -= self.grad[i] * self.value[i] * rate[i];
    });
}

template <class T>
Tensor<T> heat_multiplier(const DiffusivityMap<T>& k, double t, const FrequencyGrid& grid) {
    return heat_multiplier(k.tensor(), t, grid);
}

/// x * m broadcast over everything but the spatial axes; m is [H, W].
template <class T>
Tensor<T> mul_spatial(const Tensor<T>& x, const Tensor<T>& m, Layout layout) {
    const Planes p = Planes::of(x.shape(), layout);
    if (m.rank() != 2 || m.dim(0) != p.h || m.dim(1) != p.w)
        throw DimensionError("mul_spatial: field " + shape_str(x.shape()) + " vs multiplier " + shape_str(m.shape()));
    std::vector<T> y(x.size());
    for (std::size_t o = 0; o < p.outer; ++o)
        for (std::size_t s = 0; s < p.h * p.w; ++s) {
            const std::size_t base = (o * p.h * p.w + s) * p.inner;
            for (std::size_t c = 0; c < p.inner; ++c) y[base + c] = x[base + c] * m[s];
        }
    return make_result<T>(x.shape(), std::move(y), {x, m}, "mul_spatial", [p](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& mv = self.parents[1]->value;
        T* gx = detail::parent_grad(self, 0);
        T* gm = detail::parent_grad(self, 1);
        for (std::size_t o = 0; o < p.outer; ++o)
            for (std::size_t s = 0; s < p.h * p.w; ++s) {
                const std::size_t base = (o * p.h * p.w + s) * p.inner;
                for (std::size_t c = 0; c < p.inner; ++c) {
                    if (gx) gx[base + c] += self.grad[base + c] * mv[s];
                    if (gm) gm[s] += self.grad[base + c] * xv[base + c];
                }
            }
    });
}

/// (k(i, j) + k(-i mod H, -j mod W)) / 2, so a DFT multiplier keeps real fields real.
template <class T>
Tensor<T> symmetrize_fourier(const Tensor<T>& k) {
    const std::size_t h = k.dim(0), w = k.dim(1);
    auto mirror = [h, w](std::size_t i, std::size_t j) { return ((h - i) % h) * w + (w - j) % w; };
    std::vector<T> y(k.size());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) y[i * w + j] = T(0.5) * (k[i * w + j] + k[mirror(i, j)]);
    return make_result<T>(k.shape(), std::move(y), {k}, "symmetrize_fourier", [h, w, mirror](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    g[i * w + j] += T(0.5) * self.grad[i * w + j];
                    g[mirror(i, j)] += T(0.5) * self.grad[i * w + j];
                }
    });
}

/// One expert's heat conduction over the spatial axes of U0, channel by channel.
template <class T>
Tensor<T> hco_apply(const Tensor<T>& u0, Expert expert, const DiffusivityMap<T>& k, double t,
                    Layout layout = Layout::planar, TransformPath path = TransformPath::automatic) {
    const Planes p = Planes::of(u0.shape(), layout);
    if (p.h != k.height() || p.w != k.width())
        throw DimensionError("hco_apply: field " + shape_str(u0.shape()) + " vs diffusivity " +
                             shape_str(k.tensor().shape()));
    if (expert == Expert::haar && (!is_power_of_two(p.h) || !is_power_of_two(p.w)))
        throw ConfigError("hco_apply: Haar expert needs power-of-two extents, got " + std::to_string(p.h) + "x" +
                          std::to_string(p.w));
    const auto grid = FrequencyGrid::make(p.h, p.w, convention_for(expert));
    switch (expert) {
        case Expert::dct: {
            const auto m = heat_multiplier(k.tensor(), t, grid);
            return idct2(mul_spatial(dct2(u0, layout, path), m, layout), layout, path);
        }
        case Expert::haar: {
            const auto m = heat_multiplier(k.tensor(), t, grid);
            return ihaar2(mul_spatial(haar2(u0, layout, path), m, layout), layout, path);
        }
        case Expert::dft: {
            const auto m = heat_multiplier(symmetrize_fourier(k.tensor()), t, grid);
            auto spec = dft2(u0, layout, path);
            ComplexPair<T> damped{mul_spatial(spec.real, m, layout), mul_spatial(spec.imag, m, layout)};
            return idft2(damped, layout, path);
        }
    }
    throw ConfigError("hco_apply: unknown expert");
}

// ---------------------------------------------------------------- diffusivity

/// Learnable tensor shaped like the stage's frequency representation, [H, W, C].
template <class T>
struct FrequencyEmbedding {
    Parameter<T> fes;

    static FrequencyEmbedding init(std::string name, std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng,
                                   double stddev = 0.02) {
        std::normal_distribution<double> dist(0.0, stddev);
        std::vector<T> v(h * w * c);
        for (auto& x : v) x = T(dist(rng));
        return {Parameter<T>(std::move(name), {h, w, c}, std::move(v))};
    }
};

/// k = softplus(FEs . w + b), one map shared by all channels.
template <class T>
DiffusivityMap<T> predict_diffusivity(const Tensor<T>& fes, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (fes.rank() != 3) throw DimensionError("predict_diffusivity: FEs must be [H, W, C], got " + shape_str(fes.shape()));
    if (weight.rank() != 2 || weight.dim(1) != 1)
        throw DimensionError("predict_diffusivity: projection must map C -> 1, got " + shape_str(weight.shape()));
    const auto logits = linear(fes, weight, bias);
    return DiffusivityMap<T>(softplus(reshape(logits, {fes.dim(0), fes.dim(1)})));
}

// ---------------------------------------------------------------------- oracle

enum class Boundary { neumann, periodic };

/// Initial temperature field for the finite-difference oracle. `refine`
/// subdivides every unit cell so the scheme can converge towards the
/// continuous solution; the initial data on the fine grid is the band-limited
/// (cosine for Neumann, Fourier for periodic) interpolant of `u`.
struct OracleGrid {
    std::size_t height = 0, width = 0;
    std::vector<double> u;
    Boundary boundary = Boundary::neumann;
    double dx = 1.0;
    double dt_fd = 0.05;
    std::size_t refine = 1;

    double fine_spacing() const { return dx / double(refine); }

    /// Largest stable explicit-Euler step, scaled by cfl in (0, 1].
    double stable_step(double k, double cfl = 1.0) const {
        const double h = fine_spacing();
        return k > 0 ? cfl * h * h / (4.0 * k) : 1.0;
    }
};

namespace detail {

/// Basis functions of the interpolant evaluated at the fine cell centres, [n * r x n].
inline std::vector<std::complex<double>> interpolation_basis(std::size_t n, std::size_t r, Boundary b) {
    std::vector<std::complex<double>> basis(n * r * n);
    for (std::size_t m = 0; m < n * r; ++m) {
        const double x = (double(m) + 0.5) / double(r) - 0.5;
        for (std::size_t i = 0; i < n; ++i) {
            std::complex<double> v;
            if (b == Boundary::neumann) {
                const double s = i == 0 ? std::sqrt(1.0 / double(n)) : std::sqrt(2.0 / double(n));
                v = s * std::cos(std::numbers::pi * double(i) * (x + 0.5) / double(n));
            } else if (2 * i == n) {
                v = std::cos(std::numbers::pi * x) / double(n);
            } else {
                const double freq = 2 * i < n ? double(i) : double(i) - double(n);
                v = std::polar(1.0 / double(n), 2.0 * std::numbers::pi * freq * x / double(n));
            }
            basis[m * n + i] = v;
        }
    }
    return basis;
}

inline std::vector<double> refine_field(const OracleGrid& g) {
    const std::size_t h = g.height, w = g.width, r = g.refine;
    if (r == 1) return g.u;
    std::vector<double> re(g.u), im;
    const Planes p{1, h, w, 1};
    std::vector<std::complex<double>> coeff(h * w);
    if (g.boundary == Boundary::neumann) {
        auto c = spectral::dct2_raw<double>(g.u, p, false);
        for (std::size_t i = 0; i < c.size(); ++i) coeff[i] = c[i];
    } else {
        spectral::dft2_raw(re, im, p, -1);
        for (std::size_t i = 0; i < re.size(); ++i) coeff[i] = {re[i], im[i]};
    }
    const auto bh = interpolation_basis(h, r, g.boundary);
    const auto bw = interpolation_basis(w, r, g.boundary);
    const std::size_t fh = h * r, fw = w * r;
    // tmp = Bh * coeff  [fh x w], fine = tmp * Bw^T  [fh x fw]
    std::vector<std::complex<double>> tmp(fh * w);
    for (std::size_t m = 0; m < fh; ++m)
        for (std::size_t i = 0; i < h; ++i) {
            const auto b = bh[m * h + i];
            for (std::size_t j = 0; j < w; ++j) tmp[m * w + j] += b * coeff[i * w + j];
        }
    std::vector<double> fine(fh * fw);
    for (std::size_t m = 0; m < fh; ++m)
        for (std::size_t q = 0; q < fw; ++q) {
            std::complex<double> acc;
            for (std::size_t j = 0; j < w; ++j) acc += tmp[m * w + j] * bw[q * w + j];
            fine[m * fw + q] = acc.real();
        }
    return fine;
}

/// Value at each coarse cell centre: the fine centre itself for odd r,
/// the mean of the four surrounding fine centres for even r.
inline std::vector<double> restrict_field(const std::vector<double>& fine, std::size_t h, std::size_t w,
                                          std::size_t r) {
    if (r == 1) return fine;
    const std::size_t fw = w * r;
    std::vector<double> out(h * w);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            if (r % 2) {
                out[i * w + j] = fine[(i * r + r / 2) * fw + j * r + r / 2];
            } else {
                const std::size_t a = i * r + r / 2 - 1, b = j * r + r / 2 - 1;
                out[i * w + j] = 0.25 * (fine[a * fw + b] + fine[a * fw + b + 1] + fine[(a + 1) * fw + b] +
                                         fine[(a + 1) * fw + b + 1]);
            }
        }
    return out;
}

}  // namespace detail

/// Explicit Euler with the 5-point Laplacian from u(., ., 0) = f to time t.
/// Neumann edges mirror the edge cell (zero normal flux); periodic edges wrap.
/// Returns the field on the coarse H x W grid.
inline Tensor<double> pde_oracle_solve(const OracleGrid& grid, double k, double t) {
    if (grid.height == 0 || grid.width == 0 || grid.u.size() != grid.height * grid.width)
        throw DimensionError("pde_oracle_solve: field does not match " + std::to_string(grid.height) + "x" +
                             std::to_string(grid.width));
    if (grid.refine == 0) throw ConfigError("pde_oracle_solve: refine must be >= 1");
    if (!(k >= 0)) throw ConfigError("pde_oracle_solve: k must be nonnegative");
    if (!(t >= 0)) throw ConfigError("pde_oracle_solve: t must be nonnegative");
    const double hs = grid.fine_spacing();
    if (!(grid.dt_fd > 0) || (k > 0 && grid.dt_fd > hs * hs / (4.0 * k) * (1.0 + 1e-12)))
        throw ConfigError("pde_oracle_solve: dt_fd = " + std::to_string(grid.dt_fd) +
                          " violates the stability bound dx^2 / (4k) = " + std::to_string(hs * hs / (4.0 * k)));

    const std::size_t r = grid.refine, fh = grid.height * r, fw = grid.width * r;
    std::vector<double> u = detail::refine_field(grid), next(u.size());
    const std::size_t steps = t > 0 ? static_cast<std::size_t>(std::ceil(t / grid.dt_fd - 1e-9)) : 0;
    const double dt = steps ? t / double(steps) : 0.0;
    const double c = k * dt / (hs * hs);
    const bool periodic = grid.boundary == Boundary::periodic;
    auto at = [&](long long i, long long j) {
        if (periodic) {
            i = (i + static_cast<long long>(fh)) % static_cast<long long>(fh);
            j = (j + static_cast<long long>(fw)) % static_cast<long long>(fw);
        } else {
            i = std::clamp<long long>(i, 0, static_cast<long long>(fh) - 1);
            j = std::clamp<long long>(j, 0, static_cast<long long>(fw) - 1);
        }
        return u[static_cast<std::size_t>(i) * fw + static_cast<std::size_t>(j)];
    };
    for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t i = 0; i < fh; ++i) {
            const bool edge_row = i == 0 || i + 1 == fh;
            for (std::size_t j = 0; j < fw; ++j) {
                const double centre = u[i * fw + j];
                double lap;
                if (edge_row || j == 0 || j + 1 == fw) {
                    const long long ii = static_cast<long long>(i), jj = static_cast<long long>(j);
                    lap = at(ii - 1, jj) + at(ii + 1, jj) + at(ii, jj - 1) + at(ii, jj + 1) - 4.0 * centre;
                } else {
                    lap = u[(i - 1) * fw + j] + u[(i + 1) * fw + j] + u[i * fw + j - 1] + u[i * fw + j + 1] -
                          4.0 * centre;
                }
                next[i * fw + j] = centre + c * lap;
            }
        }
        u.swap(next);
    }
    return Tensor<double>({grid.height, grid.width}, detail::restrict_field(u, grid.height, grid.width, r));
}

inline double relative_l2(std::span<const double> a, std::span<const double> b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

/// Relative L2 distance between the spectral solution of one expert (constant k)
/// and the oracle at each refinement level. DCT pairs with Neumann, DFT with periodic.
inline std::vector<double> oracle_convergence(const std::vector<double>& f, std::size_t h, std::size_t w,
                                              Expert expert, double k, double t,
                                              const std::vector<std::size_t>& refinements, double cfl = 1.0) {
    if (expert == Expert::haar) throw ConfigError("oracle_convergence: Haar has no finite-difference counterpart");
    const Tensor<double> u0({h, w}, f);
    const auto spectral = hco_apply(u0, expert, DiffusivityMap<double>::constant(h, w, k), t);
    std::vector<double> errs;
    for (std::size_t r : refinements) {
        OracleGrid g{h, w, f, expert == Expert::dct ? Boundary::neumann : Boundary::periodic, 1.0, 0.0, r};
        g.dt_fd = g.stable_step(k, cfl);
        const auto fd = pde_oracle_solve(g, k, t);
        errs.push_back(relative_l2(fd.data(), spectral.data()));
    }
    return errs;
}

}  // namespace mvheat
