#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mvheat/tensor.hpp"

namespace mvheat {

struct GradCheckReport {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    bool finite = true;
    std::string message;

    bool passed() const { return finite && max_rel_error < tolerance; }
};

struct GradCheckOptions {
    double tolerance = 1e-4;
    double step = 1e-5;
    std::uint64_t seed = 7;
    /// Multiplies every analytic gradient by (1 + corrupt); a negative control hook.
    double corrupt = 0.0;
};

/// Compares reverse-mode gradients of sum(w * forward()) against central
/// differences, for every element of every leaf in `leaves`. Each leaf must be
/// a requires_grad tensor the forward closure reads. The error of an element is
/// |a - n| / max(|a|, |n|, 1e-3 * max|n|), the max taken over all leaves, so
/// near-zero entries are judged against the gradient's overall scale.
inline GradCheckReport grad_check(const std::string& name, const std::function<Tensor<double>()>& forward,
                                  std::vector<Tensor<double>> leaves, const GradCheckOptions& opt = {}) {
    GradCheckReport rep;
    rep.name = name;
    rep.tolerance = opt.tolerance;

    auto probe = forward();
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    std::vector<double> weights(probe.size());
    for (auto& w : weights) w = dist(rng) * (rng() & 1 ? 1.0 : -1.0);
    auto objective = [&] {
        NoGradGuard ng;
        auto y = forward();
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += weights[i] * y[i];
        return s;
    };

    for (auto& leaf : leaves) {
        auto& g = leaf.node()->grad_buffer();
        std::fill(g.begin(), g.end(), 0.0);
    }
    forward().backward(weights);

    std::vector<std::vector<double>> analytic, numeric;
    for (auto& leaf : leaves) {
        auto& a = analytic.emplace_back(leaf.node()->grad_buffer());
        for (auto& v : a) v *= 1.0 + opt.corrupt;
        auto& num = numeric.emplace_back(a.size());
        auto values = leaf.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + opt.step;
            const double up = objective();
            values[i] = orig - opt.step;
            const double down = objective();
            values[i] = orig;
            num[i] = (up - down) / (2.0 * opt.step);
        }
    }
    double scale = 0;
    for (const auto& num : numeric)
        for (double v : num)
            if (std::isfinite(v)) scale = std::max(scale, std::abs(v));
    for (std::size_t l = 0; l < leaves.size(); ++l)
        for (std::size_t i = 0; i < analytic[l].size(); ++i) {
            const double a = analytic[l][i], n = numeric[l][i];
            if (!std::isfinite(a) || !std::isfinite(n)) {
                rep.finite = false;
                rep.message = "non-finite gradient in '" + name + "' at leaf " + std::to_string(l) + " element " +
                              std::to_string(i);
                continue;
            }
            const double denom = std::max({std::abs(a), std::abs(n), 1e-3 * scale, 1e-300});
            rep.max_rel_error = std::max(rep.max_rel_error, std::abs(a - n) / denom);
            ++rep.checked;
        }
    if (rep.message.empty()) rep.message = rep.passed() ? "ok" : "gradient mismatch in '" + name + "'";
    return rep;
}

/// Single-input convenience form.
inline GradCheckReport grad_check(const std::string& name,
                                  const std::function<Tensor<double>(const Tensor<double>&)>& op,
                                  const Tensor<double>& input, const GradCheckOptions& opt = {}) {
    Tensor<double> leaf(input.shape(), input.values(), true);
    return grad_check(name, [&] { return op(leaf); }, {leaf}, opt);
}

}  // namespace mvheat
