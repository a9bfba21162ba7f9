#pragma once

// Policy-routed heat-conduction layers and the four-stage backbone. Feature
// maps are channels-last [N, H, W, C].

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mvheat/heat.hpp"
#include "mvheat/ops.hpp"

namespace mvheat {

template <class T>
using ParamVisitor = std::function<void(Parameter<T>&)>;

template <class T>
Parameter<T> normal_parameter(std::string name, Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, stddev);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = T(d(rng));
    return Parameter<T>(std::move(name), std::move(shape), std::move(v));
}

// --------------------------------------------------------------------- routing

/// Standard Gumbel samples, one per logit, drawn row-major.
template <class T>
std::vector<T> gumbel_noise(std::size_t count, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<T> g(count);
    for (auto& v : g) {
        double s = u(rng);
        while (s <= 0.0) s = u(rng);
        v = T(-std::log(-std::log(s)));
    }
    return g;
}

/// Forward: one-hot of each row's argmax. Backward: identity (straight-through).
template <class T>
Tensor<T> straight_through_one_hot(const Tensor<T>& soft) {
    if (soft.rank() != 2) throw DimensionError("straight_through_one_hot: need [N, E], got " + shape_str(soft.shape()));
    const std::size_t n = soft.dim(0), e = soft.dim(1);
    std::vector<T> y(n * e, T(0));
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < e; ++j)
            if (soft[r * e + j] > soft[r * e + best]) best = j;
        y[r * e + best] = T(1);
    }
    return make_result<T>(soft.shape(), std::move(y), {soft}, "straight_through", [](Node<T>& self) {
        if (T* g = detail::parent_grad(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

/// Gumbel-Softmax with caller-supplied noise, so the op is a pure function.
template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, const std::vector<T>& noise, double temperature, bool hard) {
    if (!(temperature > 0)) throw ConfigError("gumbel_softmax: temperature must be positive");
    if (logits.rank() != 2) throw DimensionError("gumbel_softmax: need [N, E], got " + shape_str(logits.shape()));
    if (noise.size() != logits.size()) throw DimensionError("gumbel_softmax: noise does not match logits");
    const auto perturbed = scale(add(logits, Tensor<T>(logits.shape(), noise)), T(1.0 / temperature));
    const auto soft = softmax_rows(perturbed);
    return hard ? straight_through_one_hot(soft) : soft;
}

template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, double temperature, bool hard, std::mt19937_64& rng) {
    if (!(temperature > 0)) throw ConfigError("gumbel_softmax: temperature must be positive");
    return gumbel_softmax(logits, gumbel_noise<T>(logits.size(), rng), temperature, hard);
}

/// Constant one-hot route from each row's argmax (first index on ties).
template <class T>
Tensor<T> argmax_route(const Tensor<T>& logits) {
    const std::size_t n = logits.dim(0), e = logits.dim(1);
    std::vector<T> y(n * e, T(0));
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < e; ++j)
            if (logits[r * e + j] > logits[r * e + best]) best = j;
        y[r * e + best] = T(1);
    }
    return Tensor<T>(logits.shape(), std::move(y));
}

/// Global average pool then one linear layer: [N, H, W, C] -> [N, E].
template <class T>
Tensor<T> policy_score(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    return linear(mean_spatial(x), weight, bias);
}

/// sum_e weights[n, e] * branches[e][n, ...]
template <class T>
Tensor<T> route_mix(const std::vector<Tensor<T>>& branches, const Tensor<T>& weights) {
    const std::size_t e = branches.size();
    if (e == 0 || weights.rank() != 2 || weights.dim(1) != e)
        throw DimensionError("route_mix: " + std::to_string(e) + " branches vs weights " + shape_str(weights.shape()));
    const Shape& s = branches[0].shape();
    for (const auto& b : branches)
        if (b.shape() != s) throw DimensionError("route_mix: branch shapes differ");
    const std::size_t n = weights.dim(0);
    if (s.empty() || s[0] != n) throw DimensionError("route_mix: batch " + shape_str(s) + " vs " + std::to_string(n));
    const std::size_t per = numel(s) / n;
    std::vector<T> y(numel(s), T(0));
    for (std::size_t j = 0; j < e; ++j)
        for (std::size_t r = 0; r < n; ++r) {
            const T w = weights[r * e + j];
            if (w == T(0)) continue;
            const T* src = branches[j].data().data() + r * per;
            T* dst = y.data() + r * per;
            for (std::size_t i = 0; i < per; ++i) dst[i] += w * src[i];
        }
    std::vector<Tensor<T>> inputs(branches);
    inputs.push_back(weights);
    return make_result<T>(s, std::move(y), inputs, "route_mix", [e, n, per](Node<T>& self) {
        const auto& w = self.parents[e]->value;
        T* gw = detail::parent_grad(self, e);
        for (std::size_t j = 0; j < e; ++j) {
            T* gb = detail::parent_grad(self, j);
            const auto& bv = self.parents[j]->value;
            for (std::size_t r = 0; r < n; ++r) {
                const T* g = self.grad.data() + r * per;
                if (gb) {
                    const T wr = w[r * e + j];
                    if (wr != T(0))
                        for (std::size_t i = 0; i < per; ++i) gb[r * per + i] += wr * g[i];
                }
                if (gw) {
                    T acc = 0;
                    for (std::size_t i = 0; i < per; ++i) acc += g[i] * bv[r * per + i];
                    gw[r * e + j] += acc;
                }
            }
        }
    });
}

enum class RouteMode {
    eval,       ///< argmax of the policy logits, no sampling
    train_hard, ///< straight-through Gumbel-Softmax
    train_soft  ///< plain Gumbel-Softmax weights
};

/// Per-forward routing state. Layers draw Gumbel noise from `rng` in call order.
struct RouteContext {
    RouteMode mode = RouteMode::eval;
    double temperature = 1.0;
    std::mt19937_64* rng = nullptr;
    /// When set, receives the selected expert index per sample for every layer.
    std::vector<std::vector<std::size_t>>* choices = nullptr;
};

// ---------------------------------------------------------------------- config

struct BackboneConfig {
    std::size_t in_channels = 2;
    std::size_t input_height = 64, input_width = 64;
    std::array<std::size_t, 4> depths{2, 2, 12, 2};
    std::array<std::size_t, 4> channels{96, 192, 384, 768};
    std::vector<Expert> experts{Expert::dct, Expert::dft, Expert::haar};
    HCOConfig hco;
    std::size_t window = 0;  ///< 0: the HCO acts on the full map; otherwise on win x win tiles
    std::size_t mlp_ratio = 4;

    bool has_expert(Expert e) const { return std::find(experts.begin(), experts.end(), e) != experts.end(); }

    std::size_t stage_height(std::size_t s) const { return input_height >> (s + 2); }
    std::size_t stage_width(std::size_t s) const { return input_width >> (s + 2); }

    void validate() const {
        hco.validate();
        if (experts.empty() || experts.size() > 3) throw ConfigError("backbone: between 1 and 3 experts required");
        for (std::size_t i = 0; i < experts.size(); ++i)
            for (std::size_t j = 0; j < i; ++j)
                if (experts[i] == experts[j]) throw ConfigError("backbone: duplicate expert " + std::string(to_string(experts[i])));
        if (in_channels == 0) throw ConfigError("backbone: in_channels must be positive");
        if (input_height == 0 || input_width == 0 || input_height % 32 || input_width % 32)
            throw ConfigError("backbone: input extents must be positive multiples of 32, got " +
                              std::to_string(input_height) + "x" + std::to_string(input_width));
        for (std::size_t s = 0; s < 4; ++s) {
            if (depths[s] == 0) throw ConfigError("backbone: stage depth must be positive");
            if (channels[s] == 0) throw ConfigError("backbone: stage channels must be positive");
            if (window && (stage_height(s) % window || stage_width(s) % window))
                throw ConfigError("backbone: window " + std::to_string(window) + " does not tile stage " +
                                  std::to_string(s + 1));
        }
        if (channels[0] < 2) throw ConfigError("backbone: first stage needs at least 2 channels");
        if (mlp_ratio == 0) throw ConfigError("backbone: mlp_ratio must be positive");
    }
};

/// Extent of the map the HCO branch operates on for a stage of size h x w.
inline std::pair<std::size_t, std::size_t> hco_extent(const BackboneConfig& cfg, std::size_t h, std::size_t w) {
    if (cfg.window) return {cfg.window, cfg.window};
    if (cfg.has_expert(Expert::haar)) return {next_power_of_two(h), next_power_of_two(w)};
    return {h, w};
}

// ----------------------------------------------------------------------- layers

template <class T>
struct LayerNormParams {
    Parameter<T> gamma, beta;

    LayerNormParams() = default;
    LayerNormParams(const std::string& name, std::size_t c)
        : gamma(name + ".gamma", {c}, T(1)), beta(name + ".beta", {c}, T(0)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma.tensor(), beta.tensor()); }
    void visit(const ParamVisitor<T>& f) {
        f(gamma);
        f(beta);
    }
};

template <class T>
struct LinearParams {
    Parameter<T> weight, bias;

    LinearParams() = default;
    LinearParams(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, double stddev = -1)
        : weight(normal_parameter<T>(name + ".weight", {in, out}, stddev < 0 ? 1.0 / std::sqrt(double(in)) : stddev,
                                     rng)),
          bias(name + ".bias", {out}, T(0)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight.tensor(), bias.tensor()); }
    void visit(const ParamVisitor<T>& f) {
        f(weight);
        f(bias);
    }
};

template <class T>
struct ConvParams {
    Parameter<T> weight, bias;
    std::size_t stride = 1, padding = 0;

    ConvParams() = default;
    ConvParams(const std::string& name, std::size_t k, std::size_t in, std::size_t out, std::size_t stride_,
               std::size_t padding_, std::mt19937_64& rng)
        : weight(normal_parameter<T>(name + ".weight", {k, k, in, out}, std::sqrt(2.0 / double(k * k * in)), rng)),
          bias(name + ".bias", {out}, T(0)),
          stride(stride_),
          padding(padding_) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        return conv2d(x, weight.tensor(), bias.tensor(), stride, padding);
    }
    void visit(const ParamVisitor<T>& f) {
        f(weight);
        f(bias);
    }
};

/// Replaces the heat-conduction step, e.g. with an identity for ablations and tests.
template <class T>
using HcoOverride = std::function<Tensor<T>(const Tensor<T>& u0, Expert, const DiffusivityMap<T>&)>;

/// Residual block: y = x + proj(mix_e w_e HCO_e(dwconv(LN(x)))); y = y + MLP(LN(y)).
template <class T>
class MHCOLayer {
public:
    MHCOLayer() = default;
    MHCOLayer(const std::string& name, std::size_t c, const BackboneConfig& cfg, std::mt19937_64& rng)
        : cfg_(cfg),
          channels_(c),
          norm1_(name + ".norm1", c),
          dw_weight_(normal_parameter<T>(name + ".dwconv.weight", {3, 3, c}, 1.0 / 3.0, rng)),
          dw_bias_(name + ".dwconv.bias", {c}, T(0)),
          policy_(name + ".policy", c, cfg.experts.size(), rng, 0.02),
          kproj_(name + ".kproj", c, 1, rng, 0.02),
          k_scalar_(name + ".k_scalar", {1}, T(cfg.hco.k_fixed > 1e-8 ? std::log(std::expm1(cfg.hco.k_fixed)) : -20.0)),
          proj_(name + ".proj", c, c, rng),
          norm2_(name + ".norm2", c),
          fc1_(name + ".mlp.fc1", c, c * cfg.mlp_ratio, rng),
          fc2_(name + ".mlp.fc2", c * cfg.mlp_ratio, c, rng) {}

    /// `fes` is the stage's frequency embedding [h, w, C] (used when k is predicted).
    Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& fes, RouteContext& ctx,
                      const HcoOverride<T>* hco_override = nullptr) const {
        if (x.rank() != 4 || x.dim(3) != channels_)
            throw DimensionError("mhco_layer: expected [N, H, W, " + std::to_string(channels_) + "], got " +
                                 shape_str(x.shape()));
        const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
        const auto u0 = depthwise_conv2d(norm1_(x), dw_weight_.tensor(), dw_bias_.tensor(), 1, 1);
        const auto route = route_weights(u0, ctx);

        const auto [hh, ww] = hco_extent(cfg_, h, w);
        Tensor<T> field = u0;
        if (cfg_.window) field = to_windows(u0, cfg_.window);
        else if (hh != h || ww != w) field = pad_spatial(u0, Layout::channels_last, hh, ww);
        const auto k = diffusivity(fes, hh, ww);

        const std::size_t e = cfg_.experts.size();
        std::vector<Tensor<T>> branches;
        branches.reserve(e);
        for (std::size_t j = 0; j < e; ++j) {
            const bool used = ctx.mode != RouteMode::eval || any_column(route, j);
            if (!used) {
                branches.push_back(Tensor<T>::zeros(u0.shape()));
                continue;
            }
            auto out = hco_override ? (*hco_override)(field, cfg_.experts[j], k)
                                    : hco_apply(field, cfg_.experts[j], k, cfg_.hco.t, Layout::channels_last);
            if (cfg_.window) out = from_windows(out, n, h, w);
            else if (hh != h || ww != w) out = crop_spatial(out, Layout::channels_last, h, w);
            branches.push_back(out);
        }
        const auto mixed = e == 1 ? branches[0] : route_mix(branches, route);
        const auto y = add(x, proj_(mixed));
        return add(y, fc2_(gelu(fc1_(norm2_(y)))));
    }

    /// [N, E] route weights; a single expert always gets weight 1 and never consults the policy.
    Tensor<T> route_weights(const Tensor<T>& u0, RouteContext& ctx) const {
        const std::size_t n = u0.dim(0), e = cfg_.experts.size();
        Tensor<T> route;
        if (e == 1) {
            route = Tensor<T>::full({n, 1}, T(1));
        } else {
            const auto logits = policy_score(u0, policy_.weight.tensor(), policy_.bias.tensor());
            if (ctx.mode == RouteMode::eval) {
                route = argmax_route(logits);
            } else {
                if (!ctx.rng) throw ConfigError("mhco_layer: training-mode routing needs a random source");
                route = gumbel_softmax(logits, ctx.temperature, ctx.mode == RouteMode::train_hard, *ctx.rng);
            }
        }
        if (ctx.choices) {
            std::vector<std::size_t> pick(n);
            for (std::size_t r = 0; r < n; ++r) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < e; ++j)
                    if (route[r * e + j] > route[r * e + best]) best = j;
                pick[r] = best;
            }
            ctx.choices->push_back(std::move(pick));
        }
        return route;
    }

    DiffusivityMap<T> diffusivity(const Tensor<T>& fes, std::size_t h, std::size_t w) const {
        switch (cfg_.hco.k_mode) {
            case KMode::fixed: return DiffusivityMap<T>::constant(h, w, T(cfg_.hco.k_fixed));
            case KMode::learnable_scalar: {
                const auto k = softplus(k_scalar_.tensor());
                return DiffusivityMap<T>(reshape(linear(Tensor<T>::full({h * w, 1}, T(1)), reshape(k, {1, 1}), Tensor<T>()),
                                                 {h, w}));
            }
            case KMode::predicted:
                if (fes.rank() != 3 || fes.dim(0) != h || fes.dim(1) != w)
                    throw DimensionError("mhco_layer: FEs " + shape_str(fes.shape()) + " vs HCO extent " +
                                         std::to_string(h) + "x" + std::to_string(w));
                return predict_diffusivity(fes, kproj_.weight.tensor(), kproj_.bias.tensor());
        }
        throw ConfigError("mhco_layer: unknown k mode");
    }

    void visit(const ParamVisitor<T>& f) {
        norm1_.visit(f);
        f(dw_weight_);
        f(dw_bias_);
        policy_.visit(f);
        if (cfg_.hco.k_mode == KMode::predicted) kproj_.visit(f);
        if (cfg_.hco.k_mode == KMode::learnable_scalar) f(k_scalar_);
        proj_.visit(f);
        norm2_.visit(f);
        fc1_.visit(f);
        fc2_.visit(f);
    }

    LinearParams<T>& policy() { return policy_; }
    LinearParams<T>& kproj() { return kproj_; }

private:
    static bool any_column(const Tensor<T>& route, std::size_t j) {
        const std::size_t n = route.dim(0), e = route.dim(1);
        for (std::size_t r = 0; r < n; ++r)
            if (route[r * e + j] != T(0)) return true;
        return false;
    }

    BackboneConfig cfg_;
    std::size_t channels_ = 0;
    LayerNormParams<T> norm1_;
    Parameter<T> dw_weight_, dw_bias_;
    LinearParams<T> policy_;
    LinearParams<T> kproj_;
    Parameter<T> k_scalar_;
    LinearParams<T> proj_;
    LayerNormParams<T> norm2_;
    LinearParams<T> fc1_, fc2_;
};

/// Two stride-2 3x3 convolutions with GELU between: [N, H, W, Cin] -> [N, H/4, W/4, C1].
template <class T>
class Stem {
public:
    Stem() = default;
    Stem(std::size_t in, std::size_t out, std::mt19937_64& rng)
        : conv1_("stem.conv1", 3, in, out / 2, 2, 1, rng), conv2_("stem.conv2", 3, out / 2, out, 2, 1, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) % 4 || x.dim(2) % 4)
            throw ConfigError("stem: input extents must be divisible by 4, got " + shape_str(x.shape()));
        return conv2_(gelu(conv1_(x)));
    }
    void visit(const ParamVisitor<T>& f) {
        conv1_.visit(f);
        conv2_.visit(f);
    }

private:
    ConvParams<T> conv1_, conv2_;
};

/// Stride-2 3x3 convolution followed by layer norm.
template <class T>
class Downsample {
public:
    Downsample() = default;
    Downsample(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng)
        : conv_(name + ".conv", 3, in, out, 2, 1, rng), norm_(name + ".norm", out) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return norm_(conv_(x)); }
    void visit(const ParamVisitor<T>& f) {
        conv_.visit(f);
        norm_.visit(f);
    }

private:
    ConvParams<T> conv_;
    LayerNormParams<T> norm_;
};

template <class T>
struct Stage {
    std::optional<Downsample<T>> down;
    std::optional<FrequencyEmbedding<T>> fes;
    std::vector<MHCOLayer<T>> layers;
};

template <class T>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
        cfg_.validate();
        stem_ = Stem<T>(cfg.in_channels, cfg.channels[0], rng);
        for (std::size_t s = 0; s < 4; ++s) {
            Stage<T> st;
            const std::string base = "stage" + std::to_string(s + 1);
            if (s > 0) st.down.emplace(base + ".down", cfg.channels[s - 1], cfg.channels[s], rng);
            if (cfg.hco.k_mode == KMode::predicted) {
                const auto [hh, ww] = hco_extent(cfg, cfg.stage_height(s), cfg.stage_width(s));
                st.fes = FrequencyEmbedding<T>::init(base + ".fes", hh, ww, cfg.channels[s], rng);
            }
            for (std::size_t l = 0; l < cfg.depths[s]; ++l)
                st.layers.emplace_back(base + ".layer" + std::to_string(l), cfg.channels[s], cfg, rng);
            stages_.push_back(std::move(st));
        }
    }

    /// Per-stage features at strides 4, 8, 16, 32.
    std::vector<Tensor<T>> forward(const Tensor<T>& frames, RouteContext& ctx,
                                   const HcoOverride<T>* hco_override = nullptr) const {
        if (frames.rank() != 4 || frames.dim(3) != cfg_.in_channels)
            throw DimensionError("backbone: expected [N, H, W, " + std::to_string(cfg_.in_channels) + "], got " +
                                 shape_str(frames.shape()));
        if (frames.dim(1) % 32 || frames.dim(2) % 32)
            throw ConfigError("backbone: input extents must be divisible by 32, got " + shape_str(frames.shape()));
        if (frames.dim(1) != cfg_.input_height || frames.dim(2) != cfg_.input_width)
            throw DimensionError("backbone: built for " + std::to_string(cfg_.input_height) + "x" +
                                 std::to_string(cfg_.input_width) + " input, got " + shape_str(frames.shape()));
        std::vector<Tensor<T>> outs;
        Tensor<T> x = stem_(frames);
        for (const auto& st : stages_) {
            if (st.down) x = (*st.down)(x);
            const Tensor<T> fes = st.fes ? st.fes->fes.tensor() : Tensor<T>();
            for (const auto& layer : st.layers) x = layer.forward(x, fes, ctx, hco_override);
            outs.push_back(x);
        }
        return outs;
    }

    void visit(const ParamVisitor<T>& f) {
        stem_.visit(f);
        for (auto& st : stages_) {
            if (st.down) st.down->visit(f);
            if (st.fes) f(st.fes->fes);
            for (auto& l : st.layers) l.visit(f);
        }
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        visit([&](Parameter<T>& p) { n += p.size(); });
        return n;
    }

    const BackboneConfig& config() const { return cfg_; }
    std::vector<Stage<T>>& stages() { return stages_; }

private:
    BackboneConfig cfg_;
    Stem<T> stem_;
    std::vector<Stage<T>> stages_;
};

}  // namespace mvheat
