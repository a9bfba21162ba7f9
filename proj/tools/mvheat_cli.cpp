// mvheat: train / eval / diffuse / gradcheck / synth

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "mvheat/config.hpp"
#include "mvheat/gradcheck_suite.hpp"
#include "mvheat/pgm.hpp"
#include "mvheat/train.hpp"

namespace fs = std::filesystem;
using namespace mvheat;
using nlohmann::json;

namespace {

struct Common {
    std::string config, checkpoint, out;
    std::optional<int> precision;
    std::optional<std::uint64_t> seed;
};

void report_error(const std::string& kind, const std::string& message, const std::string& command) {
    std::cerr << json{{"error", kind}, {"command", command}, {"message", message}}.dump() << std::endl;
}

void warn(const std::string& message) { std::cerr << json{{"warning", message}}.dump() << std::endl; }

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

RunConfig resolved_config(const Common& c) {
    auto cfg = load_run_config(c.config);
    if (c.precision) cfg.precision = *c.precision;
    if (c.seed) cfg.train.seed = *c.seed;
    cfg.validate();
    return cfg;
}

template <class F>
auto with_precision(int precision, F&& f) {
    if (precision == 64) return f(double{});
    return f(float{});
}

// ------------------------------------------------------------------- train

int cmd_train(const Common& c, bool verbose) {
    const auto cfg = resolved_config(c);
    const std::string out = c.out.empty() ? "run" : c.out;
    ensure_dir(out);
    write_json(fs::path(out) / "config.json", cfg.to_json());
    return with_precision(cfg.precision, [&](auto tag) {
        using T = decltype(tag);
        const auto [train_set, eval_set] = load_datasets<T>(cfg);
        if (eval_set.size() == 0) warn("eval split is empty; metrics are zero-filled");
        auto model = make_detector<T>(cfg);
        std::ofstream metrics(fs::path(out) / "metrics.jsonl");
        if (!metrics) throw IoError("cannot write '" + (fs::path(out) / "metrics.jsonl").string() + "'");
        TrainHooks hooks{&metrics, out, verbose ? &std::cerr : nullptr};
        const auto rep = train(cfg, model, train_set, eval_set, hooks);
        save_checkpoint((fs::path(out) / "checkpoint.hmoe").string(), model);
        json summary{{"steps", rep.steps},
                     {"final_loss", std::isfinite(rep.final_loss) ? json(rep.final_loss) : json(nullptr)},
                     {"seconds", rep.seconds},
                     {"parameters", model.parameter_count()},
                     {"checkpoint", (fs::path(out) / "checkpoint.hmoe").string()}};
        if (rep.final_eval) {
            write_json(fs::path(out) / "eval.json", rep.final_eval->to_json());
            summary["eval"] = rep.final_eval->to_json();
        }
        std::cout << summary.dump(2) << std::endl;
        return 0;
    });
}

// -------------------------------------------------------------------- eval

int cmd_eval(const Common& c) {
    if (c.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    const auto cfg = resolved_config(c);
    return with_precision(cfg.precision, [&](auto tag) {
        using T = decltype(tag);
        auto model = make_detector<T>(cfg);
        load_checkpoint(c.checkpoint, model);
        const auto eval_set = load_datasets<T>(cfg).second;
        if (eval_set.size() == 0) warn("eval split is empty; metrics are zero-filled");
        const auto metrics = evaluate(model, eval_set, cfg).to_json();
        if (!c.out.empty()) {
            ensure_dir(c.out);
            write_json(fs::path(c.out) / "eval.json", metrics);
        }
        std::cout << metrics.dump(2) << std::endl;
        return 0;
    });
}

// ----------------------------------------------------------------- diffuse

struct DiffuseArgs {
    std::string input, expert = "dct";
    double k = 0.5, t = 1.0;
    std::size_t steps = 4, refine = 16, width = 0, height = 0;
    bool oracle = false;
};

GrayImage load_field(const DiffuseArgs& a) {
    if (fs::path(a.input).extension() == ".pgm") return read_pgm(a.input);
    const auto stream =
        load_events(a.input, event_format_for_path(a.input), std::uint16_t(a.width), std::uint16_t(a.height));
    const std::uint64_t t0 = stream.events.empty() ? 0 : stream.events.front().t;
    const std::uint64_t t1 = stream.events.empty() ? 1 : stream.events.back().t + 1;
    const auto frames = stack_events(stream, t0, t1, 1, stream.height, stream.width);
    GrayImage img{stream.height, stream.width, std::vector<double>(std::size_t(stream.height) * stream.width)};
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        img.pixels[i] = double(frames.counts[i]) + double(frames.counts[img.pixels.size() + i]);
    const double peak = *std::max_element(img.pixels.begin(), img.pixels.end());
    if (peak > 0)
        for (auto& v : img.pixels) v /= peak;
    return img;
}

std::string frame_name(const char* stem, std::size_t j) {
    std::ostringstream s;
    s << stem << "_" << std::setw(3) << std::setfill('0') << j << ".pgm";
    return s.str();
}

int cmd_diffuse(const Common& c, const DiffuseArgs& a) {
    if (a.input.empty()) throw ConfigError("diffuse: --input is required");
    if (a.steps == 0) throw ConfigError("diffuse: --steps must be positive");
    if (!(a.k >= 0)) throw ConfigError("diffuse: --k must be nonnegative");
    if (!(a.t >= 0)) throw ConfigError("diffuse: --t must be nonnegative");
    const Expert expert = parse_expert(a.expert);
    if (a.oracle && expert == Expert::haar)
        throw ConfigError("diffuse: --oracle certifies the dct and dft experts only");
    const int precision = c.precision.value_or(64);
    if (precision != 32 && precision != 64) throw ConfigError("precision: must be 32 or 64");
    const auto img = load_field(a);
    const std::string out = c.out.empty() ? "diffuse" : c.out;
    ensure_dir(out);

    double max_abs = 0, peak = 0;
    with_precision(precision, [&](auto tag) {
        using T = decltype(tag);
        const Tensor<T> u0({img.height, img.width}, std::vector<T>(img.pixels.begin(), img.pixels.end()));
        const auto k = DiffusivityMap<T>::constant(img.height, img.width, T(a.k));
        OracleGrid grid{img.height, img.width, img.pixels,
                        expert == Expert::dct ? Boundary::neumann : Boundary::periodic, 1.0, 0.0, a.refine};
        grid.dt_fd = grid.stable_step(a.k);
        for (std::size_t j = 0; j <= a.steps; ++j) {
            const double tj = a.t * double(j) / double(a.steps);
            const auto u = tj > 0 ? hco_apply(u0, expert, k, tj) : u0;
            GrayImage frame{img.height, img.width, std::vector<double>(u.data().begin(), u.data().end())};
            write_pgm((fs::path(out) / frame_name("frame", j)).string(), frame);
            if (!a.oracle) continue;
            const auto ref = pde_oracle_solve(grid, a.k, tj);
            GrayImage oframe{img.height, img.width, std::vector<double>(ref.data().begin(), ref.data().end())};
            write_pgm((fs::path(out) / frame_name("oracle", j)).string(), oframe);
            for (std::size_t i = 0; i < frame.pixels.size(); ++i) {
                max_abs = std::max(max_abs, std::abs(frame.pixels[i] - oframe.pixels[i]));
                peak = std::max(peak, std::abs(oframe.pixels[i]));
            }
        }
        return 0;
    });
    json summary{{"expert", to_string(expert)}, {"k", a.k},          {"t", a.t},
                 {"steps", a.steps},            {"frames", a.steps + 1}, {"height", img.height},
                 {"width", img.width},          {"out", out}};
    if (a.oracle) {
        summary["refine"] = a.refine;
        summary["max_abs_deviation"] = max_abs;
        summary["max_rel_deviation"] = peak > 0 ? max_abs / peak : 0.0;
    }
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

// --------------------------------------------------------------- gradcheck

int cmd_gradcheck(const Common& c, double corrupt, const std::string& only) {
    if (c.precision && *c.precision != 64) throw ConfigError("gradcheck: runs at 64-bit precision only");
    GradCheckOptions opt;
    opt.corrupt = corrupt;
    std::size_t passed = 0, total = 0;
    std::vector<std::string> failed;
    for (const auto& gc : gradcheck_registry()) {
        if (!only.empty() && gc.name != only) continue;
        const auto rep = gc.run(opt);
        ++total;
        if (rep.passed())
            ++passed;
        else
            failed.push_back(rep.name);
        std::printf("%-4s %-22s max_rel_error=%.3e tolerance=%.0e checked=%zu\n", rep.passed() ? "PASS" : "FAIL",
                    rep.name.c_str(), rep.max_rel_error, rep.tolerance, rep.checked);
    }
    if (total == 0) throw ConfigError("gradcheck: no registered check named '" + only + "'");
    std::printf("%zu/%zu checks passed\n", passed, total);
    std::fflush(stdout);
    if (failed.empty()) return 0;
    std::cerr << json{{"error", "gradcheck"}, {"command", "gradcheck"}, {"failed", failed}}.dump() << std::endl;
    return 1;
}

// ------------------------------------------------------------------- synth

int cmd_synth(const Common& c, std::size_t count, const std::string& format_name) {
    if (c.config.empty()) throw ConfigError("synth: --config is required");
    if (count == 0) throw ConfigError("synth: --count must be positive");
    std::ifstream in(c.config);
    if (!in) throw IoError("cannot open config '" + c.config + "'");
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ParseError("config '" + c.config + "': " + e.what());
    }
    // either a scene config or a run config whose data section holds one
    SyntheticSceneConfig sc;
    std::uint64_t seed = 0;
    if (j.is_object() && j.contains("data")) {
        const auto cfg = run_config_from_json(j);
        sc = cfg.data.synth;
        seed = cfg.data.seed;
    } else {
        sc = synth_config_from_json(j);
        seed = sc.seed;
    }
    if (c.seed) seed = *c.seed;
    const auto format = parse_event_format(format_name);
    const std::string out = c.out.empty() ? "synth" : c.out;
    ensure_dir(out);
    json manifest = json::array();
    for (std::size_t i = 0; i < count; ++i) {
        auto cfg = sc;
        cfg.seed = mix_seed(seed, i);
        const auto scene = synth_generate(cfg);
        std::ostringstream stem;
        stem << "scene_" << std::setw(4) << std::setfill('0') << i;
        const auto events = (fs::path(out) / (stem.str() + (format == EventFormat::csv ? ".csv" : ".evs"))).string();
        const auto labels = (fs::path(out) / (stem.str() + ".json")).string();
        save_events(events, scene.stream, format);
        save_annotations(labels, scene.labels);
        for (std::size_t f = 0; f < scene.label_us.size(); ++f)
            manifest.push_back({{"events", events}, {"annotations", labels}, {"frame", std::to_string(f)}});
    }
    write_json(fs::path(out) / "files.json", manifest);
    std::cout << json{{"scenes", count}, {"seed", seed}, {"out", out}, {"manifest", (fs::path(out) / "files.json").string()}}
                     .dump(2)
              << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heat-conduction mixture-of-experts detector: training, evaluation and verification"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool config, bool checkpoint) {
        if (config) sub->add_option("--config", common.config, "run config (JSON)");
        if (checkpoint) sub->add_option("--checkpoint", common.checkpoint, "checkpoint file");
        sub->add_option("--out", common.out, "output directory");
        sub->add_option("--precision", common.precision, "floating point width")->check(CLI::IsMember({32, 64}));
        sub->add_option("--seed", common.seed, "override the run seed");
    };

    bool verbose = false;
    auto* train_cmd = app.add_subcommand("train", "train a detector and write checkpoint + metrics");
    add_common(train_cmd, true, false);
    train_cmd->add_flag("--verbose", verbose, "echo metric rows to stderr");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
    add_common(eval_cmd, true, true);

    DiffuseArgs da;
    auto* diffuse_cmd = app.add_subcommand("diffuse", "render heat conduction of an image or event file");
    add_common(diffuse_cmd, false, false);
    diffuse_cmd->add_option("--input", da.input, "P5 image (.pgm) or event file");
    diffuse_cmd->add_option("--expert", da.expert, "dct, dft or haar");
    diffuse_cmd->add_option("--k", da.k, "constant diffusivity");
    diffuse_cmd->add_option("--t", da.t, "final time");
    diffuse_cmd->add_option("--steps", da.steps, "frames after the initial one");
    diffuse_cmd->add_option("--refine", da.refine, "oracle grid refinement");
    diffuse_cmd->add_option("--width", da.width, "canvas width for CSV events");
    diffuse_cmd->add_option("--height", da.height, "canvas height for CSV events");
    diffuse_cmd->add_flag("--oracle", da.oracle, "also write finite-difference frames and report the deviation");

    double corrupt = 0;
    std::string only;
    auto* gc_cmd = app.add_subcommand("gradcheck", "run every registered gradient check at 64-bit");
    add_common(gc_cmd, false, false);
    gc_cmd->add_option("--corrupt", corrupt, "scale analytic gradients by (1 + x); negative control")->group("");
    gc_cmd->add_option("--only", only, "run a single named check");

    std::size_t count = 1;
    std::string format = "packed";
    auto* synth_cmd = app.add_subcommand("synth", "write synthetic event scenes and annotations");
    add_common(synth_cmd, true, false);
    synth_cmd->add_option("--count", count, "number of scenes");
    synth_cmd->add_option("--format", format, "packed or csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage", e.what(), argc > 1 ? argv[1] : "");
        return 2;
    }

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    try {
        if (name == "train") {
            if (common.config.empty()) throw ConfigError("train: --config is required");
            return cmd_train(common, verbose);
        }
        if (name == "eval") {
            if (common.config.empty()) throw ConfigError("eval: --config is required");
            return cmd_eval(common);
        }
        if (name == "diffuse") return cmd_diffuse(common, da);
        if (name == "gradcheck") return cmd_gradcheck(common, corrupt, only);
        if (name == "synth") return cmd_synth(common, count, format);
    } catch (const std::exception& e) {
        report_error(error_kind(e), e.what(), name);
        return 1;
    }
    return 1;
}
