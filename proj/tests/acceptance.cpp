// Acceptance gate: one PASS/FAIL line per criterion, exit code 1 if any fails.
//   acceptance [--only 1,4,7] [--configs DIR]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <sys/wait.h>

#include "mvheat/config.hpp"
#include "mvheat/gradcheck_suite.hpp"
#include "mvheat/train.hpp"

using namespace mvheat;
namespace fs = std::filesystem;
using T64 = Tensor<double>;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [violated: " << what << "]";
        }
    }
};

struct Criterion {
    int id;
    const char* title;
    double budget_s;
    std::function<void(Outcome&)> body;
};

T64 random_field(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    std::vector<double> v(numel(s));
    for (auto& x : v) x = d(rng);
    return T64(s, std::move(v));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double norm2(std::span<const double> a) {
    double s = 0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
}

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::string fixed(double v, int digits = 4) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// ---------------------------------------------------------------- 1. transforms

void transform_suite(Outcome& o) {
    std::mt19937_64 rng(101);
    double round_trip = 0, parseval = 0;
    const std::vector<std::pair<std::size_t, std::size_t>> sizes{{1, 1}, {2, 2}, {3, 5}, {8, 8}, {16, 32}, {48, 64},
                                                                 {64, 64}};
    for (auto [h, w] : sizes)
        for (int rep = 0; rep < 4; ++rep) {
            const auto x = random_field({h, w}, rng);
            const double nx = norm2(x.data());
            const auto d = dct2(x);
            round_trip = std::max(round_trip, max_abs_diff(idct2(d).data(), x.data()));
            parseval = std::max(parseval, std::abs(norm2(d.data()) - nx));
            const auto f = dft2(x);
            round_trip = std::max(round_trip, max_abs_diff(idft2(f).data(), x.data()));
            double e = 0;
            for (std::size_t i = 0; i < f.real.size(); ++i) e += f.real[i] * f.real[i] + f.imag[i] * f.imag[i];
            parseval = std::max(parseval, std::abs(std::sqrt(e / double(h * w)) - nx));
            if (is_power_of_two(h) && is_power_of_two(w)) {
                const auto hx = haar2(x);
                round_trip = std::max(round_trip, max_abs_diff(ihaar2(hx).data(), x.data()));
                parseval = std::max(parseval, std::abs(norm2(hx.data()) - nx));
            }
        }
    const T64 golden({2, 2}, {1, 2, 3, 4});
    const std::vector<double> dct_expect{5, -1, -2, 0}, dft_expect{10, -2, -4, 0};
    const auto gd = dct2(golden), gh = haar2(golden);
    const auto gf = dft2(golden);
    double golden_err = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        golden_err = std::max({golden_err, std::abs(gd[i] - dct_expect[i]), std::abs(gh[i] - dct_expect[i]),
                               std::abs(gf.real[i] - dft_expect[i]), std::abs(gf.imag[i])});
    }
    o.detail << "round-trip " << sci(round_trip) << " < 1e-9, Parseval " << sci(parseval)
             << " < 1e-9, 2x2 golden max deviation " << sci(golden_err) << " <= 1e-12";
    o.require(round_trip < 1e-9, "round trip");
    o.require(parseval < 1e-9, "Parseval");
    o.require(golden_err <= 1e-12, "golden values");
}

// ----------------------------------------------------------------- 2. oracle

void oracle_agreement(Outcome& o) {
    std::mt19937_64 rng(202);
    std::vector<double> delta(256, 0.0);
    delta[8 * 16 + 8] = 1.0;
    const auto smooth = random_field({16, 16}, rng);
    double worst = 0;
    std::size_t monotone = 0, cases = 0;
    const std::vector<double> smooth_values(smooth.data().begin(), smooth.data().end());
    const std::vector<double>* fields[] = {&delta, &smooth_values};
    for (const auto* f : fields)
        for (auto e : {Expert::dct, Expert::dft})
            for (double k : {0.1, 0.5, 1.0})
                for (double t : {0.5, 1.0}) {
                    const auto errs = oracle_convergence(*f, 16, 16, e, k, t, {2, 4, 8, 16});
                    bool dec = true;
                    for (std::size_t i = 1; i < errs.size(); ++i) dec = dec && errs[i] < errs[i - 1];
                    monotone += dec;
                    ++cases;
                    worst = std::max(worst, errs.back());
                }
    o.detail << "finest relative L2 " << sci(worst) << " < 1e-2, strictly decreasing over refinements 2/4/8/16 in "
             << monotone << "/" << cases << " cases (dct~Neumann, dft~periodic)";
    o.require(worst < 1e-2, "relative L2");
    o.require(monotone == cases, "monotone convergence");
}

// ---------------------------------------------------------------- 3. algebra

void hco_algebra(Outcome& o) {
    double semigroup = 0, contraction = 0, mean = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        const std::size_t h = seed % 2 ? 16 : 8, w = seed % 3 ? 8 : 16;
        const auto u = random_field({2, h, w}, rng);
        const DiffusivityMap<double> k(random_field({h, w}, rng, 0.0, 2.0));
        std::uniform_real_distribution<double> td(0.1, 1.5);
        const double t1 = td(rng), t2 = td(rng);
        for (auto e : {Expert::dct, Expert::dft, Expert::haar}) {
            const auto twice = hco_apply(hco_apply(u, e, k, t1), e, k, t2);
            const auto once = hco_apply(u, e, k, t1 + t2);
            semigroup = std::max(semigroup, max_abs_diff(twice.data(), once.data()));
            contraction = std::max(contraction, norm2(once.data()) - norm2(u.data()));
            for (std::size_t c = 0; c < 2; ++c) {
                const auto a = u.data().subspan(c * h * w, h * w), b = once.data().subspan(c * h * w, h * w);
                mean = std::max(mean, std::abs(std::accumulate(a.begin(), a.end(), 0.0) -
                                               std::accumulate(b.begin(), b.end(), 0.0)) /
                                          double(h * w));
            }
        }
    }
    o.detail << "100 seeds x 3 experts: semigroup " << sci(semigroup) << ", norm growth " << sci(contraction)
             << ", mean drift " << sci(mean) << " (all <= 1e-9)";
    o.require(semigroup <= 1e-9, "semigroup");
    o.require(contraction <= 1e-9, "contraction");
    o.require(mean <= 1e-9, "mean preservation");
}

// ------------------------------------------------------------------ 4. gradients

void gradient_gate(Outcome& o) {
    std::size_t passed = 0, total = 0;
    double worst = 0;
    std::string worst_name, failed;
    for (const auto& c : gradcheck_registry()) {
        const auto r = c.run({});
        ++total;
        if (r.passed())
            ++passed;
        else
            failed += " " + r.name;
        if (r.max_rel_error > worst || !std::isfinite(r.max_rel_error)) {
            worst = r.max_rel_error;
            worst_name = r.name;
        }
    }
    const std::string cmd = std::string("\"") + MVHEAT_CLI + "\" gradcheck >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.detail << passed << "/" << total << " registered checks < 1e-4 (worst " << worst_name << " " << sci(worst)
             << "), `mvheat gradcheck` exit " << code;
    o.require(passed == total, "failing:" + failed);
    o.require(code == 0, "cli exit code");
}

// -------------------------------------------------------------------- 5. routing

void routing_statistics(Outcome& o) {
    const std::vector<std::vector<double>> fixtures{{2, 0, 0}, {0, 0, 0}, {1, -1, 0.5}, {-2, 3, 0}, {0.3, 0.2}};
    std::mt19937_64 rng(505);
    double worst_z = 0;
    bool one_hot = true;
    for (const auto& f : fixtures) {
        const std::size_t e = f.size(), draws = 10000;
        std::vector<double> rows(draws * e);
        for (std::size_t i = 0; i < draws; ++i) std::copy(f.begin(), f.end(), rows.begin() + std::ptrdiff_t(i * e));
        const auto y = gumbel_softmax(T64({draws, e}, rows), 1.0, true, rng);
        double m = *std::max_element(f.begin(), f.end()), z = 0;
        std::vector<double> p(e);
        for (std::size_t j = 0; j < e; ++j) z += p[j] = std::exp(f[j] - m);
        for (auto& v : p) v /= z;
        std::vector<double> count(e, 0.0);
        for (std::size_t i = 0; i < draws; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < e; ++j) {
                const double v = y[i * e + j];
                one_hot = one_hot && (v == 0.0 || v == 1.0);
                s += v;
                count[j] += v;
            }
            one_hot = one_hot && s == 1.0;
        }
        for (std::size_t j = 0; j < e; ++j) {
            const double se = std::sqrt(p[j] * (1 - p[j]) / double(draws));
            worst_z = std::max(worst_z, std::abs(count[j] / double(draws) - p[j]) / se);
        }
    }
    o.detail << "5 fixtures x 10000 hard draws: worst |freq - softmax| = " << fixed(worst_z, 2)
             << " standard errors (<= 3), all rows one-hot: " << (one_hot ? "yes" : "no");
    o.require(worst_z <= 3.0, "frequency");
    o.require(one_hot, "one-hot");
}

// ------------------------------------------------------------------- 6. matching

double brute_force_cost(const std::vector<double>& c, std::size_t rows, std::size_t cols) {
    const bool t = rows > cols;
    const std::size_t n = t ? cols : rows, m = t ? rows : cols;
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) s += t ? c[perm[i] * cols + i] : c[i * cols + perm[i]];
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

void matching_and_metrics(Outcome& o) {
    std::mt19937_64 rng(606);
    std::uniform_int_distribution<std::size_t> dim(1, 5);
    std::uniform_real_distribution<double> u(-3, 3);
    std::size_t agree = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = dim(rng), c = dim(rng);
        std::vector<double> cost(r * c);
        for (auto& v : cost) v = u(rng);
        double total = 0;
        for (const auto& [i, j] : hungarian_match(cost, r, c)) total += cost[i * c + j];
        agree += std::abs(total - brute_force_cost(cost, r, c)) <= 1e-12;
    }
    const std::vector<Annotation> gt{{0, 0, 10, 10, 0}, {20, 20, 30, 30, 0}};
    const std::vector<ScoredBox> det{{{0, 0, 10, 6}, 0.9, 0}, {{0, 0, 10, 3}, 0.8, 0}, {{20, 20, 30, 25.5}, 0.7, 0}};
    const auto m = evaluate_map({det}, {gt}, 1, {0.5});
    const double ap_expect = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    const double pr_err = std::max({std::abs(m.map_50 - ap_expect), std::abs(m.precision - 2.0 / 3.0),
                                    std::abs(m.recall - 1.0)});
    const double golden = iou(BoxXYXY{0, 0, 2, 2}, BoxXYXY{1, 1, 3, 3});
    o.detail << "Hungarian = brute force on " << agree << "/100 matrices up to 5x5, PR fixture deviation " << sci(pr_err)
             << " <= 1e-12 (AP50 " << fixed(m.map_50, 6) << "), iou golden " << (golden == 1.0 / 7.0 ? "== 1/7" : "!= 1/7");
    o.require(agree == 100, "Hungarian optimality");
    o.require(pr_err <= 1e-12, "PR fixture");
    o.require(golden == 1.0 / 7.0, "iou golden");
}

// --------------------------------------------------------------- 7/8. toy runs

struct ToyRun {
    double map_50 = std::numeric_limits<double>::quiet_NaN();
    double reloaded_map_50 = std::numeric_limits<double>::quiet_NaN();
    std::size_t steps = 0;
    double seconds = 0;
};

template <class T>
ToyRun run_toy_t(const RunConfig& cfg) {
    const auto [tr, ev] = load_datasets<T>(cfg);
    auto model = make_detector<T>(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto rep = train(cfg, model, tr, ev);
    ToyRun out;
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.steps = rep.steps;
    if (rep.final_eval) out.map_50 = rep.final_eval->map_50;
    const auto path = (fs::temp_directory_path() / "mvheat_acceptance.hmoe").string();
    save_checkpoint(path, model);
    auto reloaded = make_detector<T>(cfg);
    load_checkpoint(path, reloaded);
    out.reloaded_map_50 = evaluate(reloaded, ev, cfg).map_50;
    fs::remove(path);
    return out;
}

ToyRun run_toy(const std::string& path) {
    const auto cfg = load_run_config(path);
    return cfg.precision == 64 ? run_toy_t<double>(cfg) : run_toy_t<float>(cfg);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::vector<int> only;
    std::string configs = std::string(MVHEAT_SOURCE_DIR) + "/configs";
    app.add_option("--only", only, "criteria to run")->delimiter(',');
    app.add_option("--configs", configs, "directory with toy.json and the ablation configs");
    CLI11_PARSE(app, argc, argv);

    std::optional<ToyRun> toy;
    auto toy_result = [&]() -> const ToyRun& {
        if (!toy) toy = run_toy(configs + "/toy.json");
        return *toy;
    };

    const std::vector<Criterion> criteria{
        {1, "transform suite", 5, transform_suite},
        {2, "PDE oracle agreement", 30, oracle_agreement},
        {3, "HCO algebra", 10, hco_algebra},
        {4, "gradient gate", 60, gradient_gate},
        {5, "routing statistics", 5, routing_statistics},
        {6, "matching and metrics", 10, matching_and_metrics},
        {7, "toy end-to-end", 900,
         [&](Outcome& o) {
             const auto& r = toy_result();
             o.detail << "configs/toy.json: mAP@50 " << fixed(r.map_50) << " >= 0.7 after " << r.steps
                      << " steps (<= 3000), training " << fixed(r.seconds, 1) << " s, reloaded checkpoint mAP@50 "
                      << fixed(r.reloaded_map_50) << " (|diff| <= 1e-9)";
             o.require(r.map_50 >= 0.7, "mAP@50");
             o.require(r.steps <= 3000, "step budget");
             o.require(std::abs(r.map_50 - r.reloaded_map_50) <= 1e-9, "checkpoint eval");
         }},
        {8, "ablation direction", 1800,
         [&](Outcome& o) {
             const auto& full = toy_result();
             const auto dct = run_toy(configs + "/ablation_dct_only.json");
             const auto fixed_k = run_toy(configs + "/ablation_fixed_k.json");
             o.detail << "3 experts " << fixed(full.map_50) << " vs DCT only " << fixed(dct.map_50)
                      << " (need >= -0.02 gap: " << fixed(full.map_50 - dct.map_50) << "); predicted k "
                      << fixed(full.map_50) << " vs fixed k " << fixed(fixed_k.map_50)
                      << " (gap " << fixed(full.map_50 - fixed_k.map_50) << ")";
             o.require(full.map_50 >= dct.map_50 - 0.02, "experts non-inferiority");
             o.require(full.map_50 >= fixed_k.map_50 - 0.02, "diffusivity non-inferiority");
         }},
    };

    bool all = true;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            c.body(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << " [" << error_kind(e) << " error: " << e.what() << "]";
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        o.require(s < c.budget_s, "runtime budget");
        std::printf("[%s] criterion %d %s: %s; %.1f s (budget %.0f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.title,
                    o.detail.str().c_str(), s, c.budget_s);
        std::fflush(stdout);
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
