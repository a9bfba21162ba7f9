#pragma once

// Datasets, decoupled-weight-decay Adam, the training loop and evaluation.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvheat/config.hpp"
#include "mvheat/model.hpp"

namespace mvheat {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(splitmix64(a) ^ b); }

// ------------------------------------------------------------------- dataset

template <class T>
struct Sample {
    std::vector<T> input;  ///< [H, W, 2B]
    std::vector<Annotation> boxes;
};

template <class T>
struct Dataset {
    std::size_t height = 0, width = 0, channels = 0;
    std::vector<Sample<T>> samples;

    std::size_t size() const { return samples.size(); }
};

/// Scenes [first, first + count) of the seed-fixed synthetic sequence; one sample per labeled frame.
template <class T>
Dataset<T> synthetic_dataset(const DataConfig& data, std::size_t first, std::size_t count) {
    const auto& sc = data.synth;
    Dataset<T> ds{sc.height, sc.width, 2 * data.bins, {}};
    const auto span = static_cast<std::uint64_t>(std::llround(sc.duration_ms * 1000.0 / double(sc.labeled_frames)));
    for (std::size_t i = 0; i < count; ++i) {
        auto cfg = sc;
        cfg.seed = mix_seed(data.seed, first + i);
        const auto scene = synth_generate(cfg);
        for (std::size_t j = 0; j < scene.label_us.size(); ++j) {
            const std::uint64_t t1 = scene.label_us[j], t0 = t1 > span ? t1 - span : 0;
            const auto frames = stack_events(scene.stream, t0, t1, data.bins, sc.height, sc.width);
            ds.samples.push_back({frames_to_input<T>(frames, data.clip), scene.labels.at(std::to_string(j))});
        }
    }
    return ds;
}

/// One sample per file pair; the stacking window covers the whole stream.
template <class T>
Dataset<T> file_dataset(const DataConfig& data, const std::vector<DataFile>& files) {
    const auto& sc = data.synth;
    Dataset<T> ds{sc.height, sc.width, 2 * data.bins, {}};
    for (const auto& f : files) {
        auto stream = load_events(f.events, event_format_for_path(f.events), std::uint16_t(sc.width),
                                  std::uint16_t(sc.height));
        if (stream.width != sc.width || stream.height != sc.height)
            throw DimensionError("'" + f.events + "' is " + std::to_string(stream.width) + "x" +
                                 std::to_string(stream.height) + ", config expects " + std::to_string(sc.width) + "x" +
                                 std::to_string(sc.height));
        const std::uint64_t t0 = stream.events.empty() ? 0 : stream.events.front().t;
        const std::uint64_t t1 = stream.events.empty() ? 1 : stream.events.back().t + 1;
        const auto frames = stack_events(stream, t0, t1, data.bins, sc.height, sc.width);
        std::vector<Annotation> boxes;
        if (!f.annotations.empty()) {
            const auto set = load_annotations(f.annotations);
            if (const auto it = set.find(f.frame); it != set.end()) boxes = it->second;
        }
        for (const auto& b : boxes)
            if (b.cls < 0 || std::size_t(b.cls) >= sc.classes)
                throw ValidationError("'" + f.annotations + "': class " + std::to_string(b.cls) + " out of range");
        ds.samples.push_back({frames_to_input<T>(frames, data.clip), std::move(boxes)});
    }
    return ds;
}

template <class T>
std::pair<Dataset<T>, Dataset<T>> load_datasets(const RunConfig& cfg) {
    if (cfg.data.source == "files")
        return {file_dataset<T>(cfg.data, cfg.data.train_files), file_dataset<T>(cfg.data, cfg.data.eval_files)};
    return {synthetic_dataset<T>(cfg.data, 0, cfg.data.train_scenes),
            synthetic_dataset<T>(cfg.data, cfg.data.train_scenes, cfg.data.eval_scenes)};
}

/// Stacks samples into [N, H, W, C], mirroring horizontally where flip[i] is set.
template <class T>
Tensor<T> make_batch(const Dataset<T>& ds, const std::vector<std::size_t>& idx, const std::vector<char>& flip = {}) {
    const std::size_t h = ds.height, w = ds.width, c = ds.channels, plane = h * w * c;
    std::vector<T> v(idx.size() * plane);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const auto& in = ds.samples[idx[b]].input;
        T* dst = v.data() + b * plane;
        const bool f = !flip.empty() && flip[b];
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t sx = f ? w - 1 - x : x;
                std::copy_n(in.data() + (y * w + sx) * c, c, dst + (y * w + x) * c);
            }
    }
    return Tensor<T>({idx.size(), h, w, c}, std::move(v));
}

inline std::vector<TargetBox> targets_for(const std::vector<Annotation>& boxes, double width, double height,
                                          bool flip) {
    std::vector<TargetBox> out;
    for (auto a : boxes) {
        if (flip) a = {width - a.x2, a.y1, width - a.x1, a.y2, a.cls};
        out.push_back(TargetBox::from(a, width, height));
    }
    return out;
}

// ----------------------------------------------------------------- optimizer

/// Adam with decoupled weight decay on parameters of rank >= 2.
template <class T>
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(Detector<T>& model, double lr, double weight_decay) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
        std::size_t slot = 0;
        model.visit([&](Parameter<T>& p) {
            if (slot == m_.size()) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
            auto& m = m_[slot];
            auto& v = v_[slot];
            ++slot;
            auto w = p.value();
            const auto g = p.gradient();
            const bool decay = p.shape().size() >= 2;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = double(g[i]);
                m[i] = b1_ * m[i] + (1 - b1_) * gi;
                v[i] = b2_ * v[i] + (1 - b2_) * gi * gi;
                double wi = double(w[i]);
                if (decay) wi -= lr * weight_decay * wi;
                wi -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
                w[i] = T(wi);
            }
        });
    }

private:
    double b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

inline double learning_rate(const TrainConfig& t, std::size_t step) {
    if (t.warmup && step < t.warmup) return t.lr * double(step + 1) / double(t.warmup);
    const double span = double(std::max<std::size_t>(1, t.steps - std::min(t.warmup, t.steps)));
    const double progress = std::min(1.0, double(step - std::min(step, t.warmup)) / span);
    return 0.5 * t.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Geometric anneal from tau_start to tau_end over the run.
inline double temperature(const TrainConfig& t, std::size_t step) {
    if (t.steps <= 1) return t.tau_end;
    const double f = double(step) / double(t.steps - 1);
    return t.tau_start * std::pow(t.tau_end / t.tau_start, f);
}

// ---------------------------------------------------------------- evaluation

/// Eval-mode pass (argmax routing) over a dataset.
template <class T>
MapMetrics evaluate(Detector<T>& model, const Dataset<T>& ds, const RunConfig& cfg) {
    NoGradGuard guard;
    std::vector<std::vector<ScoredBox>> dets;
    std::vector<std::vector<Annotation>> gts;
    for (std::size_t start = 0; start < ds.size(); start += cfg.eval.batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + cfg.eval.batch); ++i) idx.push_back(i);
        RouteContext ctx;
        const auto outs = model.forward(make_batch(ds, idx), ctx);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            dets.push_back(to_detections(outs[b], double(ds.width), double(ds.height)));
            gts.push_back(ds.samples[idx[b]].boxes);
        }
    }
    return evaluate_map(dets, gts, cfg.head.classes, cfg.eval.iou_thresholds, cfg.eval.score_threshold);
}

// ------------------------------------------------------------------ training

/// Fresh model for a run; initialization draws from the train seed.
template <class T>
Detector<T> make_detector(const RunConfig& cfg) {
    return Detector<T>(cfg.backbone, cfg.head, mix_seed(cfg.train.seed, 0x696e6974ull));
}

struct TrainReport {
    std::size_t steps = 0;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    std::optional<MapMetrics> final_eval;
    double seconds = 0;
};

struct TrainHooks {
    std::ostream* metrics = nullptr;  ///< JSON-lines sink
    std::string dump_dir;             ///< where a non-finite batch is described; empty: no file
    std::ostream* progress = nullptr;
};

template <class T>
TrainReport train(const RunConfig& cfg, Detector<T>& model, const Dataset<T>& train_set, const Dataset<T>& eval_set,
                  const TrainHooks& hooks = {}) {
    const auto& tc = cfg.train;
    TrainReport rep;
    if (tc.steps == 0) return rep;
    if (train_set.size() == 0) throw ConfigError("train: the training split is empty");
    const auto t_start = std::chrono::steady_clock::now();
    AdamW<T> opt;
    std::mt19937_64 order_rng(mix_seed(tc.seed, 0x6f72646572ull));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t cursor = 0;
    const double width = double(train_set.width), height = double(train_set.height);

    for (std::size_t step = 0; step < tc.steps; ++step) {
        std::vector<std::size_t> idx;
        for (std::size_t b = 0; b < tc.batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), order_rng);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        const std::uint64_t batch_seed = mix_seed(tc.seed, step + 1);
        std::mt19937_64 rng(batch_seed);
        std::vector<char> flip(idx.size(), 0);
        if (tc.flip)
            for (auto& f : flip) f = char(rng() & 1u);
        const double tau = temperature(tc, step), lr = learning_rate(tc, step);
        RouteContext ctx{RouteMode::train_hard, tau, &rng};
        Tensor<T> total;
        double bbox = 0, cls = 0, loss = std::numeric_limits<double>::quiet_NaN();
        std::string cause;
        try {
            const auto outs = model.forward(make_batch(train_set, idx, flip), ctx);
            for (std::size_t b = 0; b < idx.size(); ++b) {
                const auto gt = targets_for(train_set.samples[idx[b]].boxes, width, height, flip[b]);
                const auto l = detection_loss(outs[b].boxes, outs[b].logits, gt);
                bbox += l.bbox / double(idx.size());
                cls += l.cls / double(idx.size());
                total = b ? add(total, l.total) : l.total;
            }
            total = scale(total, T(1.0 / double(idx.size())));
            loss = double(total[0]);
        } catch (const InvariantError& e) {
            cause = e.what();
        } catch (const ValidationError& e) {
            cause = e.what();
        }

        double norm2 = 0;
        if (std::isfinite(loss)) {
            model.visit([](Parameter<T>& p) { p.zero_grad(); });
            total.backward();
            model.visit([&](Parameter<T>& p) {
                for (T g : p.gradient()) norm2 += double(g) * double(g);
            });
        }
        if (!std::isfinite(loss) || !std::isfinite(norm2)) {
            nlohmann::json dump{{"step", step},       {"batch_seed", batch_seed}, {"samples", idx},
                                {"flip", flip},       {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss))},
                                {"bbox", bbox},       {"cls", cls},               {"tau", tau}, {"lr", lr}};
            if (!cause.empty()) dump["cause"] = cause;
            std::string where;
            if (!hooks.dump_dir.empty()) {
                where = (std::filesystem::path(hooks.dump_dir) / "nonfinite_batch.json").string();
                std::ofstream(where) << dump.dump(2) << "\n";
            }
            throw NumericError("non-finite " + std::string(std::isfinite(loss) ? "gradient" : "loss") + " at step " +
                               std::to_string(step) + ", batch seed " + std::to_string(batch_seed) +
                               (cause.empty() ? "" : " (" + cause + ")") +
                               (where.empty() ? "" : " (details in " + where + ")"));
        }
        if (tc.grad_clip > 0 && std::sqrt(norm2) > tc.grad_clip) {
            const T s = T(tc.grad_clip / std::sqrt(norm2));
            model.visit([&](Parameter<T>& p) {
                for (T& g : p.gradient()) g *= s;
            });
        }
        opt.step(model, lr, tc.weight_decay);
        rep.final_loss = loss;
        rep.steps = step + 1;

        const bool last = step + 1 == tc.steps;
        const bool do_eval = last || (tc.eval_every && (step + 1) % tc.eval_every == 0);
        const bool do_log = do_eval || (tc.log_every && (step + 1) % tc.log_every == 0);
        if (!do_log) continue;
        nlohmann::json row{{"step", step + 1}, {"loss", loss}, {"bbox", bbox}, {"cls", cls}, {"lr", lr}, {"tau", tau}};
        if (do_eval) {
            const auto m = evaluate(model, eval_set, cfg);
            if (last) rep.final_eval = m;
            row["map_50"] = m.map_50;
            row["map_50_95"] = m.map_50_95;
            row["map_75"] = m.map_75;
            row["precision"] = m.precision;
            row["recall"] = m.recall;
        }
        if (hooks.metrics) *hooks.metrics << row.dump() << "\n" << std::flush;
        if (hooks.progress) *hooks.progress << row.dump() << "\n" << std::flush;
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rep;
}

}  // namespace mvheat
