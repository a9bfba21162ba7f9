#pragma once

// Run configuration: one JSON document with model, data, train and eval
// sections. Every error names the offending field by its dotted path.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvheat/detect.hpp"
#include "mvheat/events.hpp"
#include "mvheat/moe.hpp"

namespace mvheat {

struct DataFile {
    std::string events;       ///< packed or CSV event file
    std::string annotations;  ///< annotation JSON
    std::string frame = "0";  ///< frame id whose boxes label this sample
};

struct DataConfig {
    std::string source = "synthetic";  ///< synthetic | files
    SyntheticSceneConfig synth;
    std::size_t train_scenes = 800, eval_scenes = 200;
    std::size_t bins = 1;
    double clip = 4.0;  ///< per-pixel event count that maps to input 1.0
    std::uint64_t seed = 1;
    std::vector<DataFile> train_files, eval_files;
};

struct TrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 8;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::size_t warmup = 100;
    double tau_start = 5.0, tau_end = 0.5;
    double grad_clip = 1.0;  ///< global norm; 0 disables
    bool flip = true;         ///< random horizontal flips
    std::uint64_t seed = 1;
    std::size_t eval_every = 500;  ///< 0: only at the end
    std::size_t log_every = 10;
};

struct EvalConfig {
    std::vector<double> iou_thresholds = coco_iou_thresholds();
    double score_threshold = 0.5;
    std::size_t batch = 25;
};

struct RunConfig {
    BackboneConfig backbone;
    HeadConfig head;
    DataConfig data;
    TrainConfig train;
    EvalConfig eval;
    int precision = 32;

    void validate() const;
    nlohmann::json to_json() const;
};

namespace detail {

/// Typed access to one JSON object, rejecting keys nobody asked for.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    template <class V>
    void get(const std::string& key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const auto& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<V, bool>) {
                if (!v.is_boolean()) throw ConfigError("expected true or false");
            } else if constexpr (std::is_unsigned_v<V>) {
                if (!v.is_number_unsigned()) throw ConfigError("expected a non-negative integer");
            } else if constexpr (std::is_integral_v<V>) {
                if (!v.is_number_integer()) throw ConfigError("expected an integer");
            } else if constexpr (std::is_floating_point_v<V>) {
                if (!v.is_number()) throw ConfigError("expected a number");
            } else if constexpr (std::is_same_v<V, std::string>) {
                if (!v.is_string()) throw ConfigError("expected a string");
            }
            out = v.get<V>();
        } catch (const ConfigError& e) {
            throw ConfigError(field(key) + ": " + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(field(key) + ": " + e.what());
        }
    }

    const nlohmann::json* child(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(field(k) + ": unknown field");
    }

private:
    std::string where() const { return path_.empty() ? "config" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class V, std::size_t N>
void get_array(Section& s, const std::string& key, std::array<V, N>& out) {
    std::vector<V> v;
    s.get(key, v);
    if (v.empty()) return;
    if (v.size() != N) throw ConfigError(s.field(key) + ": expected " + std::to_string(N) + " entries");
    std::copy(v.begin(), v.end(), out.begin());
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::Section root(j, "");
    root.get("precision", c.precision);

    if (const auto* m = root.child("model")) {
        detail::Section s(*m, "model");
        detail::get_array(s, "depths", c.backbone.depths);
        detail::get_array(s, "channels", c.backbone.channels);
        if (const auto* e = s.child("experts")) {
            if (!e->is_array()) throw ConfigError("model.experts: expected an array of names");
            c.backbone.experts.clear();
            for (const auto& name : *e) {
                if (!name.is_string()) throw ConfigError("model.experts: expected an array of names");
                try {
                    c.backbone.experts.push_back(parse_expert(name.get<std::string>()));
                } catch (const ConfigError& err) {
                    throw ConfigError(std::string("model.experts: ") + err.what());
                }
            }
        }
        std::string k_mode = to_string(c.backbone.hco.k_mode);
        s.get("k_mode", k_mode);
        try {
            c.backbone.hco.k_mode = parse_k_mode(k_mode);
        } catch (const ConfigError& err) {
            throw ConfigError(std::string("model.k_mode: ") + err.what());
        }
        s.get("k_fixed", c.backbone.hco.k_fixed);
        s.get("t", c.backbone.hco.t);
        s.get("window", c.backbone.window);
        s.get("mlp_ratio", c.backbone.mlp_ratio);
        if (const auto* h = s.child("head")) {
            detail::Section hs(*h, "model.head");
            hs.get("hidden", c.head.hidden);
            hs.get("levels", c.head.levels);
            hs.get("anchor_scale", c.head.anchor_scale);
            hs.get("class_prior", c.head.class_prior);
            hs.finish();
        }
        s.finish();
    }

    if (const auto* d = root.child("data")) {
        detail::Section s(*d, "data");
        s.get("source", c.data.source);
        if (const auto* sy = s.child("synth")) {
            try {
                c.data.synth = synth_config_from_json(*sy);
            } catch (const ConfigError& err) {
                throw ConfigError(std::string("data.synth: ") + err.what());
            }
        }
        s.get("train_scenes", c.data.train_scenes);
        s.get("eval_scenes", c.data.eval_scenes);
        s.get("bins", c.data.bins);
        s.get("clip", c.data.clip);
        s.get("seed", c.data.seed);
        for (const char* split : {"train_files", "eval_files"}) {
            const auto* f = s.child(split);
            if (!f) continue;
            if (!f->is_array()) throw ConfigError(s.field(split) + ": expected an array");
            auto& list = std::string(split) == "train_files" ? c.data.train_files : c.data.eval_files;
            for (std::size_t i = 0; i < f->size(); ++i) {
                detail::Section fs((*f)[i], s.field(split) + "[" + std::to_string(i) + "]");
                DataFile df;
                fs.get("events", df.events);
                fs.get("annotations", df.annotations);
                fs.get("frame", df.frame);
                fs.finish();
                if (df.events.empty()) throw ConfigError(fs.field("events") + ": required");
                list.push_back(df);
            }
        }
        s.finish();
    }

    if (const auto* t = root.child("train")) {
        detail::Section s(*t, "train");
        s.get("steps", c.train.steps);
        s.get("batch", c.train.batch);
        s.get("lr", c.train.lr);
        s.get("weight_decay", c.train.weight_decay);
        s.get("warmup", c.train.warmup);
        s.get("tau_start", c.train.tau_start);
        s.get("tau_end", c.train.tau_end);
        s.get("grad_clip", c.train.grad_clip);
        s.get("flip", c.train.flip);
        s.get("seed", c.train.seed);
        s.get("eval_every", c.train.eval_every);
        s.get("log_every", c.train.log_every);
        s.finish();
    }

    if (const auto* e = root.child("eval")) {
        detail::Section s(*e, "eval");
        s.get("queries", c.head.queries);
        s.get("iou_thresholds", c.eval.iou_thresholds);
        s.get("score_threshold", c.eval.score_threshold);
        s.get("batch", c.eval.batch);
        s.finish();
    }
    root.finish();

    c.backbone.input_height = c.data.synth.height;
    c.backbone.input_width = c.data.synth.width;
    c.backbone.in_channels = 2 * c.data.bins;
    c.head.classes = c.data.synth.classes;
    c.validate();
    return c;
}

inline void RunConfig::validate() const {
    auto field = [](const std::string& name, const std::string& what) { return ConfigError(name + ": " + what); };
    if (precision != 32 && precision != 64) throw field("precision", "must be 32 or 64");
    try {
        backbone.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    if (head.hidden == 0) throw field("model.head.hidden", "must be positive");
    if (head.levels.empty()) throw field("model.head.levels", "must list at least one stage");
    for (auto l : head.levels)
        if (l > 3) throw field("model.head.levels", "stage indices are 0..3");
    if (!(head.anchor_scale > 0 && head.anchor_scale < 1)) throw field("model.head.anchor_scale", "must be in (0, 1)");
    if (!(head.class_prior > 0 && head.class_prior < 1)) throw field("model.head.class_prior", "must be in (0, 1)");
    if (head.queries == 0) throw field("eval.queries", "must be positive");
    std::size_t tokens = 0;
    for (auto l : head.levels) tokens += backbone.stage_height(l) * backbone.stage_width(l);
    if (head.queries > tokens)
        throw field("eval.queries", "K = " + std::to_string(head.queries) + " exceeds the " + std::to_string(tokens) +
                                        " tokens of model.head.levels");
    if (data.source != "synthetic" && data.source != "files") throw field("data.source", "must be synthetic or files");
    if (data.bins == 0) throw field("data.bins", "must be positive");
    if (!(data.clip > 0)) throw field("data.clip", "must be positive");
    if (data.source == "files" && data.train_files.empty() && data.eval_files.empty())
        throw field("data.train_files", "file source needs at least one file");
    if (train.batch == 0) throw field("train.batch", "must be positive");
    if (!(train.lr > 0)) throw field("train.lr", "must be positive");
    if (train.weight_decay < 0) throw field("train.weight_decay", "must be non-negative");
    if (!(train.tau_start > 0)) throw field("train.tau_start", "must be positive");
    if (!(train.tau_end > 0)) throw field("train.tau_end", "must be positive");
    if (train.grad_clip < 0) throw field("train.grad_clip", "must be non-negative");
    if (eval.iou_thresholds.empty()) throw field("eval.iou_thresholds", "must not be empty");
    for (double t : eval.iou_thresholds)
        if (!(t > 0 && t <= 1)) throw field("eval.iou_thresholds", "thresholds must lie in (0, 1]");
    if (eval.batch == 0) throw field("eval.batch", "must be positive");
}

inline nlohmann::json RunConfig::to_json() const {
    nlohmann::json experts = nlohmann::json::array();
    for (auto e : backbone.experts) experts.push_back(to_string(e));
    auto files = [](const std::vector<DataFile>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& f : v) a.push_back({{"events", f.events}, {"annotations", f.annotations}, {"frame", f.frame}});
        return a;
    };
    return {{"precision", precision},
            {"model",
             {{"depths", backbone.depths},
              {"channels", backbone.channels},
              {"experts", experts},
              {"k_mode", to_string(backbone.hco.k_mode)},
              {"k_fixed", backbone.hco.k_fixed},
              {"t", backbone.hco.t},
              {"window", backbone.window},
              {"mlp_ratio", backbone.mlp_ratio},
              {"head",
               {{"hidden", head.hidden},
                {"levels", head.levels},
                {"anchor_scale", head.anchor_scale},
                {"class_prior", head.class_prior}}}}},
            {"data",
             {{"source", data.source},
              {"synth", synth_config_to_json(data.synth)},
              {"train_scenes", data.train_scenes},
              {"eval_scenes", data.eval_scenes},
              {"bins", data.bins},
              {"clip", data.clip},
              {"seed", data.seed},
              {"train_files", files(data.train_files)},
              {"eval_files", files(data.eval_files)}}},
            {"train",
             {{"steps", train.steps},
              {"batch", train.batch},
              {"lr", train.lr},
              {"weight_decay", train.weight_decay},
              {"warmup", train.warmup},
              {"tau_start", train.tau_start},
              {"tau_end", train.tau_end},
              {"grad_clip", train.grad_clip},
              {"flip", train.flip},
              {"seed", train.seed},
              {"eval_every", train.eval_every},
              {"log_every", train.log_every}}},
            {"eval",
             {{"queries", head.queries},
              {"iou_thresholds", eval.iou_thresholds},
              {"score_threshold", eval.score_threshold},
              {"batch", eval.batch}}}};
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("config '" + path + "': " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace mvheat
