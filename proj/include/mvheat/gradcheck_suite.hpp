#pragma once

// The registered gradient checks: every differentiable op, one MHCO layer and
// a one-layer-per-stage detector chain through the set loss, all at 64-bit.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mvheat/detect.hpp"
#include "mvheat/gradcheck.hpp"
#include "mvheat/heat.hpp"
#include "mvheat/model.hpp"
#include "mvheat/moe.hpp"

namespace mvheat {

struct GradCheckCase {
    std::string name;
    std::function<GradCheckReport(const GradCheckOptions&)> run;
};

namespace detail {

inline Tensor<double> gc_leaf(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = d(rng);
    return Tensor<double>(s, std::move(v), true);
}

inline GradCheckCase unary_case(std::string name, std::function<Tensor<double>(const Tensor<double>&)> op, Shape shape,
                                std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    return {name, [=](const GradCheckOptions& opt) {
                std::mt19937_64 rng(seed);
                const auto x = gc_leaf(shape, rng, lo, hi);
                return grad_check(name, [&] { return op(x); }, {x}, opt);
            }};
}

inline BackboneConfig gc_tiny_backbone() {
    BackboneConfig cfg;
    cfg.in_channels = 2;
    cfg.input_height = cfg.input_width = 32;
    cfg.depths = {1, 1, 1, 1};
    cfg.channels = {4, 4, 4, 4};
    cfg.mlp_ratio = 2;
    return cfg;
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_registry() {
    using T64 = Tensor<double>;
    using detail::gc_leaf;
    using detail::unary_case;
    std::vector<GradCheckCase> cases;

    // elementwise and reductions
    cases.push_back(unary_case("exp", [](const T64& x) { return exp(x); }, {2, 5}, 1));
    cases.push_back(unary_case("sigmoid", [](const T64& x) { return sigmoid(x); }, {2, 5}, 2, -4, 4));
    cases.push_back(unary_case("softplus", [](const T64& x) { return softplus(x); }, {2, 5}, 3, -4, 4));
    cases.push_back(unary_case("gelu", [](const T64& x) { return gelu(x); }, {2, 5}, 4, -3, 3));
    cases.push_back(unary_case("scale", [](const T64& x) { return scale(x, 1.7); }, {7}, 5));
    cases.push_back(unary_case("add_scalar", [](const T64& x) { return mul(add_scalar(x, 0.3), x); }, {7}, 6));
    cases.push_back(unary_case("sum", [](const T64& x) { return sum(mul(x, x)); }, {3, 4}, 7));
    cases.push_back(unary_case("mean", [](const T64& x) { return mean(mul(x, x)); }, {3, 4}, 8));
    cases.push_back(unary_case("mean_spatial", [](const T64& x) { return mean_spatial(x); }, {2, 3, 3, 2}, 9));
    cases.push_back(unary_case("softmax_rows", [](const T64& x) { return softmax_rows(x); }, {3, 4}, 10, -3, 3));
    cases.push_back({"add_sub_mul", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(11);
                         const auto a = gc_leaf({3, 4}, rng), b = gc_leaf({3, 4}, rng);
                         return grad_check("add_sub_mul", [&] { return mul(add(a, b), sub(a, b)); }, {a, b}, opt);
                     }});
    cases.push_back({"add_bias", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(12);
                         const auto x = gc_leaf({2, 3, 4}, rng), b = gc_leaf({4}, rng);
                         return grad_check("add_bias", [&] { return add_bias(x, b); }, {x, b}, opt);
                     }});

    // linear algebra and convolutions
    cases.push_back({"matmul", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(13);
                         const auto a = gc_leaf({4, 3}, rng), b = gc_leaf({3, 5}, rng);
                         return grad_check("matmul", [&] { return matmul(a, b); }, {a, b}, opt);
                     }});
    cases.push_back({"linear", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(14);
                         const auto x = gc_leaf({2, 3, 4}, rng), w = gc_leaf({4, 5}, rng), b = gc_leaf({5}, rng);
                         return grad_check("linear", [&] { return linear(x, w, b); }, {x, w, b}, opt);
                     }});
    cases.push_back({"layer_norm", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(15);
                         const auto x = gc_leaf({3, 5}, rng), g = gc_leaf({5}, rng), b = gc_leaf({5}, rng);
                         return grad_check("layer_norm", [&] { return layer_norm(x, g, b); }, {x, g, b}, opt);
                     }});
    cases.push_back({"conv2d", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(16);
                         const auto x = gc_leaf({2, 5, 5, 2}, rng), w = gc_leaf({3, 3, 2, 3}, rng), b = gc_leaf({3}, rng);
                         return grad_check("conv2d", [&] { return conv2d(x, w, b, 2, 1); }, {x, w, b}, opt);
                     }});
    cases.push_back({"depthwise_conv2d", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(17);
                         const auto x = gc_leaf({2, 5, 5, 3}, rng), w = gc_leaf({3, 3, 3}, rng), b = gc_leaf({3}, rng);
                         return grad_check("depthwise_conv2d", [&] { return depthwise_conv2d(x, w, b, 1, 1); }, {x, w, b},
                                           opt);
                     }});

    // shape plumbing
    cases.push_back(unary_case("reshape", [](const T64& x) { return mul(reshape(x, {4, 3}), reshape(x, {4, 3})); },
                               {3, 4}, 18));
    cases.push_back(unary_case("rows", [](const T64& x) {
        return slice_cols(gather_rows(concat_rows<double>({x, scale(x, 2.0)}), {0, 3, 5, 5}), 1, 3);
    }, {3, 4}, 19));
    cases.push_back(unary_case("pad_crop", [](const T64& x) {
        return crop_spatial(scale(pad_spatial(x, Layout::channels_last, 8, 8), 2.0), Layout::channels_last, 3, 3);
    }, {1, 5, 5, 2}, 20));
    cases.push_back(unary_case("windows", [](const T64& x) { return from_windows(scale(to_windows(x, 2), 3.0), 2, 4, 4); },
                               {2, 4, 4, 3}, 21));

    // transforms
    cases.push_back(unary_case("dct2", [](const T64& x) { return dct2(x); }, {2, 8, 4}, 22));
    cases.push_back(unary_case("idct2", [](const T64& x) { return idct2(x); }, {2, 8, 4}, 23));
    cases.push_back(unary_case("dct2.fast", [](const T64& x) { return dct2(x, Layout::planar, TransformPath::fast); },
                               {8, 8}, 24));
    cases.push_back(unary_case("haar2", [](const T64& x) { return haar2(x); }, {2, 8, 4}, 25));
    cases.push_back(unary_case("ihaar2", [](const T64& x) { return ihaar2(x); }, {2, 8, 4}, 26));
    cases.push_back(unary_case("dft2.real", [](const T64& x) { return dft2(x).real; }, {2, 6, 4}, 27));
    cases.push_back(unary_case("dft2.imag", [](const T64& x) { return dft2(x).imag; }, {2, 6, 4}, 28));
    cases.push_back(unary_case("dft2.fast", [](const T64& x) { return dft2(x, Layout::planar, TransformPath::fast).imag; },
                               {8, 8}, 29));
    cases.push_back({"idft2", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(30);
                         const auto re = gc_leaf({6, 4}, rng), im = gc_leaf({6, 4}, rng);
                         return grad_check("idft2",
                                           [&] {
                                               return idft2(ComplexPair<double>{re, im}, Layout::planar,
                                                            TransformPath::automatic, false);
                                           },
                                           {re, im}, opt);
                     }});

    // heat conduction
    cases.push_back({"heat_multiplier", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(31);
                         const auto k = gc_leaf({6, 5}, rng, 0.0, 1.0);
                         const auto grid = FrequencyGrid::make(6, 5, FrequencyConvention::cosine);
                         return grad_check("heat_multiplier", [&] { return heat_multiplier(k, 0.7, grid); }, {k}, opt);
                     }});
    cases.push_back({"mul_spatial", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(32);
                         const auto x = gc_leaf({2, 4, 3, 2}, rng), m = gc_leaf({4, 3}, rng);
                         return grad_check("mul_spatial", [&] { return mul_spatial(x, m, Layout::channels_last); }, {x, m},
                                           opt);
                     }});
    cases.push_back(unary_case("symmetrize_fourier", [](const T64& k) { return symmetrize_fourier(k); }, {5, 4}, 33));
    for (auto e : {Expert::dct, Expert::dft, Expert::haar}) {
        const std::string name = std::string("hco_apply.") + to_string(e);
        cases.push_back({name, [e, name](const GradCheckOptions& opt) {
                             std::mt19937_64 rng(34 + int(e));
                             const auto u = gc_leaf({2, 8, 8}, rng), fes = gc_leaf({8, 8, 3}, rng),
                                        w = gc_leaf({3, 1}, rng), b = gc_leaf({1}, rng);
                             return grad_check(name, [&] { return hco_apply(u, e, predict_diffusivity(fes, w, b), 1.0); },
                                               {u, fes, w, b}, opt);
                         }});
    }

    // routing
    cases.push_back({"gumbel_softmax", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(40);
                         const auto l = gc_leaf({5, 3}, rng);
                         const auto noise = gumbel_noise<double>(15, rng);
                         return grad_check("gumbel_softmax", [&] { return gumbel_softmax(l, noise, 0.6, false); }, {l}, opt);
                     }});
    // the hard forward is piecewise constant, so its backward is compared with the
    // finite-difference-checked soft path it passes gradients through to
    cases.push_back({"straight_through", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(41);
                         const auto l = gc_leaf({4, 3}, rng);
                         std::vector<double> w(12);
                         for (auto& v : w) v = std::uniform_real_distribution<double>(-1.5, 1.5)(rng);
                         auto grads = [&](bool hard) {
                             auto& g = l.node()->grad_buffer();
                             std::fill(g.begin(), g.end(), 0.0);
                             const auto s = softmax_rows(l);
                             (hard ? straight_through_one_hot(s) : s).backward(w);
                             return g;
                         };
                         const auto soft = grads(false), hard = grads(true);
                         auto rep = grad_check("straight_through", [&] { return softmax_rows(l); }, {l}, opt);
                         double scale = 0;
                         for (double v : soft) scale = std::max(scale, std::abs(v));
                         for (std::size_t i = 0; i < soft.size(); ++i) {
                             const double a = hard[i] * (1.0 + opt.corrupt);
                             const double d = std::max({std::abs(a), std::abs(soft[i]), 1e-3 * scale});
                             rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - soft[i]) / d);
                             rep.finite = rep.finite && std::isfinite(a);
                         }
                         rep.checked += soft.size();
                         return rep;
                     }});
    cases.push_back({"policy_score", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(42);
                         const auto x = gc_leaf({2, 4, 4, 3}, rng), w = gc_leaf({3, 3}, rng), b = gc_leaf({3}, rng);
                         return grad_check("policy_score", [&] { return policy_score(x, w, b); }, {x, w, b}, opt);
                     }});
    cases.push_back({"route_mix", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(43);
                         const auto a = gc_leaf({2, 3, 3, 2}, rng), b = gc_leaf({2, 3, 3, 2}, rng),
                                    w = gc_leaf({2, 2}, rng, 0.0, 1.0);
                         return grad_check("route_mix", [&] { return route_mix<double>({a, b}, w); }, {a, b, w}, opt);
                     }});

    // detection losses
    cases.push_back({"bce_with_logits", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(44);
                         const auto l = gc_leaf({3, 3}, rng, -3, 3);
                         std::vector<double> t{0, 0.4, 1, 0.2, 0, 0.9, 0, 0, 0.5};
                         return grad_check("bce_with_logits", [&] { return bce_with_logits_sum(l, t); }, {l}, opt);
                     }});
    cases.push_back({"matched_box_loss", [](const GradCheckOptions& opt) {
                         const Tensor<double> boxes({3, 4}, {0.31, 0.42, 0.23, 0.17, 0.12, 0.81, 0.09, 0.11, 0.55, 0.52,
                                                             0.41, 0.37},
                                                    true);
                         const std::vector<std::array<double, 4>> gt{
                             {0.35, 0.4, 0.2, 0.25}, {0.6, 0.3, 0.1, 0.1}, {0.53, 0.51, 0.2, 0.19}};
                         const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 0}, {1, 1}, {2, 2}};
                         return grad_check("matched_box_loss",
                                           [&] { return matched_box_loss(boxes, pairs, gt, BoxLossWeights{}); }, {boxes},
                                           opt);
                     }});

    // one MHCO layer, soft routing over all three experts
    cases.push_back({"mhco_layer", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(45);
                         auto cfg = detail::gc_tiny_backbone();
                         MHCOLayer<double> layer("layer", 3, cfg, rng);
                         std::vector<Tensor<double>> leaves;
                         layer.visit([&](Parameter<double>& p) { leaves.push_back(p.tensor()); });
                         const auto x = gc_leaf({2, 4, 4, 3}, rng), fes = gc_leaf({4, 4, 3}, rng);
                         leaves.push_back(x);
                         leaves.push_back(fes);
                         auto forward = [&] {
                             std::mt19937_64 noise(46);
                             RouteContext ctx{RouteMode::train_soft, 0.9, &noise};
                             return layer.forward(x, fes, ctx);
                         };
                         return grad_check("mhco_layer", forward, leaves, opt);
                     }});

    // frames -> stem -> one layer per stage -> head -> set loss
    cases.push_back({"end_to_end", [](const GradCheckOptions& opt) {
                         std::mt19937_64 rng(47);
                         const auto bcfg = detail::gc_tiny_backbone();
                         HeadConfig hc;
                         hc.classes = 2;
                         hc.hidden = 4;
                         hc.queries = 3;
                         hc.levels = {2, 3};
                         Detector<double> model(bcfg, hc, 48);
                         std::vector<Tensor<double>> leaves;
                         model.visit([&](Parameter<double>& p) { leaves.push_back(p.tensor()); });
                         const auto frames = gc_leaf({1, 32, 32, 2}, rng, 0.0, 1.0);
                         leaves.push_back(frames);
                         const std::vector<TargetBox> gt{{{0.4, 0.45, 0.3, 0.2}, 1}, {{0.7, 0.3, 0.2, 0.2}, 0}};
                         auto run = [&] {
                             std::mt19937_64 noise(49);
                             RouteContext ctx{RouteMode::train_soft, 0.9, &noise};
                             return model.forward(frames, ctx)[0];
                         };
                         const auto base = run();
                         const auto assignment = assign_targets(base.boxes, base.logits, gt);
                         auto forward = [&] {
                             const auto out = run();
                             return detection_loss(out.boxes, out.logits, gt, assignment).total;
                         };
                         return grad_check("end_to_end", forward, leaves, opt);
                     }});
    return cases;
}

}  // namespace mvheat
