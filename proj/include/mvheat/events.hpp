#pragma once

// Event streams: CSV and packed binary I/O, stacking into per-bin polarity
// count frames, box annotations, and a synthetic moving-shape generator.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvheat/error.hpp"

namespace mvheat {

struct Event {
    std::uint64_t t = 0;  ///< microseconds
    std::uint16_t x = 0, y = 0;
    std::uint8_t p = 0;

    bool operator==(const Event&) const = default;
};

struct EventStream {
    std::uint16_t width = 0, height = 0;
    std::vector<Event> events;
    std::size_t reordered = 0;  ///< events that arrived out of time order and were sorted

    bool operator==(const EventStream& o) const {
        return width == o.width && height == o.height && events == o.events;
    }

    /// Checks geometry and polarity, then stable-sorts by time if needed.
    void normalize() {
        for (std::size_t i = 0; i < events.size(); ++i) {
            const auto& e = events[i];
            if (e.x >= width || e.y >= height)
                throw ValidationError("event " + std::to_string(i) + " at (" + std::to_string(e.x) + ", " +
                                      std::to_string(e.y) + ") outside " + std::to_string(width) + "x" +
                                      std::to_string(height) + " sensor");
            if (e.p > 1) throw ValidationError("event " + std::to_string(i) + " has polarity " + std::to_string(e.p));
        }
        reordered = 0;
        for (std::size_t i = 1; i < events.size(); ++i)
            if (events[i].t < events[i - 1].t) ++reordered;
        if (reordered)
            std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
    }
};

enum class EventFormat { csv, packed };

inline EventFormat parse_event_format(const std::string& s) {
    if (s == "csv") return EventFormat::csv;
    if (s == "packed" || s == "evs") return EventFormat::packed;
    throw ConfigError("unknown event format '" + s + "' (expected csv or packed)");
}

inline EventFormat event_format_for_path(const std::string& path) {
    return path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0 ? EventFormat::csv : EventFormat::packed;
}

// --------------------------------------------------------------------- CSV

namespace detail {

template <class U>
U parse_field(std::string_view s, std::size_t line, const char* what) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
        throw ParseError("line " + std::to_string(line) + ": bad " + what + " '" + std::string(s) + "'");
    if (v > std::numeric_limits<U>::max())
        throw ValidationError("line " + std::to_string(line) + ": " + what + " " + std::to_string(v) + " out of range");
    return static_cast<U>(v);
}

}  // namespace detail

/// One "t_us,x,y,p" record per line. Blank lines and a leading header line are skipped.
inline EventStream read_events_csv(std::istream& in, std::uint16_t width, std::uint16_t height) {
    EventStream s;
    s.width = width;
    s.height = height;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (lineno == 1 && line.find_first_of("tT") == line.find_first_not_of(" \t")) continue;
        std::array<std::string_view, 4> f;
        std::size_t start = 0, n = 0;
        const std::string_view sv(line);
        for (std::size_t i = 0; i <= sv.size(); ++i)
            if (i == sv.size() || sv[i] == ',') {
                if (n == 4) throw ParseError("line " + std::to_string(lineno) + ": expected 4 fields");
                f[n++] = sv.substr(start, i - start);
                start = i + 1;
            }
        if (n != 4) throw ParseError("line " + std::to_string(lineno) + ": expected 4 fields, got " + std::to_string(n));
        Event e;
        e.t = detail::parse_field<std::uint64_t>(f[0], lineno, "timestamp");
        e.x = detail::parse_field<std::uint16_t>(f[1], lineno, "x");
        e.y = detail::parse_field<std::uint16_t>(f[2], lineno, "y");
        e.p = detail::parse_field<std::uint8_t>(f[3], lineno, "polarity");
        if (e.x >= width || e.y >= height)
            throw ValidationError("line " + std::to_string(lineno) + ": coordinate (" + std::to_string(e.x) + ", " +
                                  std::to_string(e.y) + ") outside " + std::to_string(width) + "x" +
                                  std::to_string(height));
        if (e.p > 1) throw ValidationError("line " + std::to_string(lineno) + ": polarity must be 0 or 1");
        s.events.push_back(e);
    }
    s.normalize();
    return s;
}

inline void write_events_csv(std::ostream& out, const EventStream& s) {
    for (const auto& e : s.events) out << e.t << ',' << e.x << ',' << e.y << ',' << int(e.p) << '\n';
}

// ------------------------------------------------------------------ packed

namespace detail {

template <class U>
void put_le(std::ostream& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class U>
U get_le(std::istream& in, const char* what, std::size_t offset) {
    unsigned char b[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(U)))
        throw ParseError(std::string("truncated ") + what + " at byte offset " + std::to_string(offset));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return static_cast<U>(v);
}

}  // namespace detail

inline constexpr char kPackedMagic[4] = {'E', 'V', 'S', '1'};
inline constexpr std::size_t kPackedHeaderBytes = 12, kPackedRecordBytes = 13;

/// "EVS1", u32 count, u16 width, u16 height, then count x (u64 t, u16 x, u16 y, u8 p); little-endian.
inline void write_events_packed(std::ostream& out, const EventStream& s) {
    out.write(kPackedMagic, 4);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.events.size()));
    detail::put_le<std::uint16_t>(out, s.width);
    detail::put_le<std::uint16_t>(out, s.height);
    for (const auto& e : s.events) {
        detail::put_le<std::uint64_t>(out, e.t);
        detail::put_le<std::uint16_t>(out, e.x);
        detail::put_le<std::uint16_t>(out, e.y);
        detail::put_le<std::uint8_t>(out, e.p);
    }
}

inline EventStream read_events_packed(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4)) {
        if (in.gcount() == 0) return {};
        throw ParseError("truncated header at byte offset 0");
    }
    if (!std::equal(magic, magic + 4, kPackedMagic)) throw ParseError("bad magic at byte offset 0 (expected EVS1)");
    EventStream s;
    const auto count = detail::get_le<std::uint32_t>(in, "event count", 4);
    s.width = detail::get_le<std::uint16_t>(in, "width", 8);
    s.height = detail::get_le<std::uint16_t>(in, "height", 10);
    s.events.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t off = kPackedHeaderBytes + std::size_t(i) * kPackedRecordBytes;
        Event e;
        e.t = detail::get_le<std::uint64_t>(in, "record", off);
        e.x = detail::get_le<std::uint16_t>(in, "record", off + 8);
        e.y = detail::get_le<std::uint16_t>(in, "record", off + 10);
        e.p = detail::get_le<std::uint8_t>(in, "record", off + 12);
        s.events.push_back(e);
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw ParseError("trailing bytes after " + std::to_string(count) + " records");
    s.normalize();
    return s;
}

/// CSV files carry no geometry, so width and height are required for them; the
/// packed header's geometry is checked against them when nonzero.
inline EventStream load_events(const std::string& path, EventFormat format, std::uint16_t width = 0,
                               std::uint16_t height = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open event file '" + path + "'");
    try {
        if (format == EventFormat::csv) {
            if (!width || !height) throw ConfigError("CSV events need a declared sensor geometry");
            return read_events_csv(in, width, height);
        }
        auto s = read_events_packed(in);
        if (s.events.empty() && s.width == 0) {
            s.width = width;
            s.height = height;
        }
        if (width && height && (s.width != width || s.height != height))
            throw ValidationError("sensor geometry " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                                  " does not match declared " + std::to_string(width) + "x" + std::to_string(height));
        return s;
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

inline void save_events(const std::string& path, const EventStream& s, EventFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write event file '" + path + "'");
    if (format == EventFormat::csv) write_events_csv(out, s);
    else write_events_packed(out, s);
    if (!out) throw IoError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------- stacking

/// Per-bin, per-polarity counts [2B, H, W]; channel 2 * bin + p.
struct EventFrames {
    std::size_t bins = 0, height = 0, width = 0;
    std::vector<std::uint32_t> counts;
    std::size_t in_window = 0, dropped = 0;

    std::uint32_t at(std::size_t channel, std::size_t y, std::size_t x) const {
        return counts[(channel * height + y) * width + x];
    }
    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
};

inline EventFrames stack_events(const EventStream& s, std::uint64_t t0, std::uint64_t t1, std::size_t bins,
                                std::size_t height, std::size_t width) {
    if (t1 <= t0) throw ConfigError("stack_events: window end must exceed its start");
    if (bins == 0) throw ConfigError("stack_events: need at least one bin");
    EventFrames f{bins, height, width, std::vector<std::uint32_t>(2 * bins * height * width, 0u)};
    const std::uint64_t span = t1 - t0;
    for (const auto& e : s.events) {
        if (e.t < t0 || e.t >= t1 || e.x >= width || e.y >= height) {
            ++f.dropped;
            continue;
        }
        const std::size_t bin = static_cast<std::size_t>((static_cast<unsigned __int128>(bins) * (e.t - t0)) / span);
        ++f.counts[((2 * bin + e.p) * height + e.y) * width + e.x];
        ++f.in_window;
    }
    return f;
}

/// Channels-last model input [H, W, 2B]: counts clipped at `clip` and divided by it.
template <class T>
std::vector<T> frames_to_input(const EventFrames& f, double clip) {
    if (!(clip > 0)) throw ConfigError("frames_to_input: clip must be positive");
    const std::size_t c = 2 * f.bins;
    std::vector<T> out(f.height * f.width * c);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < f.height; ++y)
            for (std::size_t x = 0; x < f.width; ++x)
                out[(y * f.width + x) * c + ch] = T(std::min<double>(f.at(ch, y, x), clip) / clip);
    return out;
}

// ------------------------------------------------------------- annotations

struct Annotation {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int cls = 0;

    bool operator==(const Annotation&) const = default;
};

using AnnotationSet = std::map<std::string, std::vector<Annotation>>;

inline AnnotationSet parse_annotations(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("annotations: top level must be an object of frame id -> boxes");
    AnnotationSet out;
    for (const auto& [frame, boxes] : j.items()) {
        if (!boxes.is_array()) throw ParseError("annotations: frame '" + frame + "' must map to an array");
        auto& list = out[frame];
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            const auto& r = boxes[i];
            const std::string where = "annotations: frame '" + frame + "' record " + std::to_string(i);
            if (!r.is_array() || r.size() != 5) throw ParseError(where + ": expected [x1, y1, x2, y2, cls]");
            for (std::size_t k = 0; k < 4; ++k)
                if (!r[k].is_number()) throw ParseError(where + ": coordinate " + std::to_string(k) + " is not a number");
            if (!r[4].is_number_integer()) throw ParseError(where + ": cls must be an integer");
            Annotation a{r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>(), r[4].get<int>()};
            if (!(a.x1 < a.x2) || !(a.y1 < a.y2))
                throw ValidationError(where + ": degenerate box (need x1 < x2 and y1 < y2)");
            if (a.cls < 0) throw ValidationError(where + ": negative class index");
            list.push_back(a);
        }
    }
    return out;
}

inline nlohmann::json annotations_to_json(const AnnotationSet& set) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [frame, list] : set) {
        auto arr = nlohmann::json::array();
        for (const auto& a : list) arr.push_back({a.x1, a.y1, a.x2, a.y2, a.cls});
        j[frame] = arr;
    }
    return j;
}

inline AnnotationSet load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotation file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return {};
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
    if (j.is_array() && j.empty()) return {};
    return parse_annotations(j);
}

inline void save_annotations(const std::string& path, const AnnotationSet& set) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write annotation file '" + path + "'");
    out << annotations_to_json(set).dump(1) << '\n';
}

// --------------------------------------------------------------- synthetic

enum class ShapeKind { disc = 0, rectangle = 1, ring = 2 };
inline constexpr std::size_t kShapeKinds = 3;

inline const char* to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::disc: return "disc";
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::ring: return "ring";
    }
    return "?";
}

/// A bright shape on a dark background moving at constant velocity. Position is
/// the centre at t = 0; `radius` is the half-extent along x.
struct ObjectSpec {
    ShapeKind kind = ShapeKind::disc;
    double cx = 0, cy = 0, radius = 4, aspect = 1.0;  ///< half-extent along y = radius * aspect (rectangles)
    double vx = 0, vy = 0;                             ///< pixels per millisecond

    double half_w() const { return radius; }
    double half_h() const { return kind == ShapeKind::rectangle ? radius * aspect : radius; }
    double centre_x(double t_ms) const { return cx + vx * t_ms; }
    double centre_y(double t_ms) const { return cy + vy * t_ms; }

    /// Signed distance from pixel-space point (px, py) to the shape edge at time t, negative inside.
    double signed_distance(double px, double py, double t_ms) const {
        const double dx = px - centre_x(t_ms), dy = py - centre_y(t_ms);
        switch (kind) {
            case ShapeKind::disc: return std::hypot(dx, dy) - radius;
            case ShapeKind::rectangle: {
                const double qx = std::abs(dx) - half_w(), qy = std::abs(dy) - half_h();
                return std::hypot(std::max(qx, 0.0), std::max(qy, 0.0)) + std::min(std::max(qx, qy), 0.0);
            }
            case ShapeKind::ring: {
                const double thickness = 0.45 * radius, mid = radius - thickness / 2;
                return std::abs(std::hypot(dx, dy) - mid) - thickness / 2;
            }
        }
        return 1e9;
    }

    Annotation box(double t_ms, double width, double height) const {
        const double x = centre_x(t_ms), y = centre_y(t_ms);
        return {std::clamp(x - half_w(), 0.0, width), std::clamp(y - half_h(), 0.0, height),
                std::clamp(x + half_w(), 0.0, width), std::clamp(y + half_h(), 0.0, height), int(kind)};
    }
};

struct SyntheticSceneConfig {
    std::size_t height = 64, width = 64;
    std::size_t min_objects = 1, max_objects = 5;
    std::size_t classes = 3;  ///< shape archetypes in use: disc, rectangle, ring (first n)
    double min_radius = 5.0, max_radius = 12.0;
    double min_speed = 0.1, max_speed = 0.3;  ///< pixels per millisecond
    double events_per_edge = 4.0;             ///< events a pixel emits when an edge fully crosses it
    double noise_rate = 1.0;                  ///< background events per pixel per second
    double duration_ms = 20.0;
    std::size_t labeled_frames = 1;  ///< boxes recorded at t = (j + 1) * duration / labeled_frames
    double max_overlap_iou = 0.2;
    std::uint64_t seed = 0;
    std::vector<ObjectSpec> objects;  ///< when nonempty, used instead of random objects

    void validate() const {
        if (height == 0 || width == 0 || height > 65535 || width > 65535)
            throw ConfigError("synth: canvas extents must be in [1, 65535]");
        if (min_objects > max_objects) throw ConfigError("synth: min_objects exceeds max_objects");
        if (classes == 0 || classes > kShapeKinds) throw ConfigError("synth: classes must be 1..3");
        if (!(min_radius > 0) || min_radius > max_radius) throw ConfigError("synth: bad radius range");
        if (!(min_speed >= 0) || min_speed > max_speed) throw ConfigError("synth: bad speed range");
        if (!(events_per_edge >= 0)) throw ConfigError("synth: events_per_edge must be nonnegative");
        if (!(noise_rate >= 0)) throw ConfigError("synth: noise_rate must be nonnegative");
        if (!(duration_ms > 0)) throw ConfigError("synth: duration_ms must be positive");
        if (labeled_frames == 0) throw ConfigError("synth: labeled_frames must be positive");
        if (2 * max_radius >= double(std::min(height, width))) throw ConfigError("synth: objects do not fit the canvas");
    }
};

struct SyntheticScene {
    EventStream stream;
    AnnotationSet labels;                ///< frame id "0", "1", ... -> boxes
    std::vector<std::uint64_t> label_us;  ///< label time of each frame id
    std::vector<ObjectSpec> objects;
};

namespace detail {

inline double box_iou(const Annotation& a, const Annotation& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline std::vector<ObjectSpec> sample_objects(const SyntheticSceneConfig& cfg, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> count(cfg.min_objects, cfg.max_objects);
    std::uniform_int_distribution<std::size_t> kind(0, cfg.classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double w = double(cfg.width), h = double(cfg.height), d = cfg.duration_ms;
    const std::size_t n = count(rng);
    std::vector<ObjectSpec> objs;
    for (std::size_t i = 0; i < n; ++i) {
        ObjectSpec best;
        for (int attempt = 0; attempt < 64; ++attempt) {
            ObjectSpec o;
            o.kind = static_cast<ShapeKind>(kind(rng));
            o.radius = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * unit(rng);
            o.aspect = 0.55 + 0.3 * unit(rng);
            const double speed = cfg.min_speed + (cfg.max_speed - cfg.min_speed) * unit(rng);
            const double angle = 2 * std::numbers::pi * unit(rng);
            o.vx = speed * std::cos(angle);
            o.vy = speed * std::sin(angle);
            // keep the whole trajectory inside the canvas
            double lo_x = o.half_w() + std::max(0.0, -o.vx * d), hi_x = w - o.half_w() - std::max(0.0, o.vx * d);
            double lo_y = o.half_h() + std::max(0.0, -o.vy * d), hi_y = h - o.half_h() - std::max(0.0, o.vy * d);
            if (hi_x < lo_x || hi_y < lo_y) {
                o.vx = o.vy = 0;
                lo_x = o.half_w(), hi_x = w - o.half_w();
                lo_y = o.half_h(), hi_y = h - o.half_h();
            }
            o.cx = lo_x + (hi_x - lo_x) * unit(rng);
            o.cy = lo_y + (hi_y - lo_y) * unit(rng);
            best = o;
            bool ok = true;
            for (const auto& other : objs)
                if (box_iou(o.box(d / 2, w, h), other.box(d / 2, w, h)) > cfg.max_overlap_iou) ok = false;
            if (ok) break;
        }
        objs.push_back(best);
    }
    return objs;
}

/// Fraction of the pixel centred at (px, py) covered by any object at time t.
inline double scene_intensity(const std::vector<ObjectSpec>& objs, double px, double py, double t_ms) {
    double v = 0;
    for (const auto& o : objs) v = std::max(v, std::clamp(0.5 - o.signed_distance(px, py, t_ms), 0.0, 1.0));
    return v;
}

}  // namespace detail

/// Contrast-threshold event model: each pixel keeps a reference intensity and
/// fires one event per 1 / events_per_edge of accumulated change, polarity 1
/// for brightening. Static scenes therefore emit nothing but noise.
inline SyntheticScene synth_generate(const SyntheticSceneConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    SyntheticScene scene;
    scene.objects = cfg.objects.empty() ? detail::sample_objects(cfg, rng) : cfg.objects;
    auto& s = scene.stream;
    s.width = static_cast<std::uint16_t>(cfg.width);
    s.height = static_cast<std::uint16_t>(cfg.height);
    const std::size_t h = cfg.height, w = cfg.width;
    const double dur = cfg.duration_ms;

    double vmax = 0;
    for (const auto& o : scene.objects) vmax = std::max(vmax, std::hypot(o.vx, o.vy));
    if (cfg.events_per_edge > 0 && vmax > 0) {
        const double threshold = 1.0 / cfg.events_per_edge;
        const std::size_t steps = std::max<std::size_t>(1, std::size_t(std::ceil(dur * vmax / 0.2)));
        const double dt = dur / double(steps);
        std::vector<double> ref(h * w), cur(h * w);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) ref[y * w + x] = detail::scene_intensity(scene.objects, x + 0.5, y + 0.5, 0.0);
        std::uniform_real_distribution<double> jitter(0.0, 1.0);
        for (std::size_t k = 1; k <= steps; ++k) {
            const double t = dt * double(k);
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double v = detail::scene_intensity(scene.objects, x + 0.5, y + 0.5, t);
                    double& r = ref[y * w + x];
                    while (std::abs(v - r) >= threshold - 1e-12) {
                        const bool up = v > r;
                        r += up ? threshold : -threshold;
                        const double te = t - dt * jitter(rng);
                        s.events.push_back({static_cast<std::uint64_t>(std::llround(te * 1000.0)),
                                            static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                                            static_cast<std::uint8_t>(up ? 1 : 0)});
                    }
                }
        }
    }
    if (cfg.noise_rate > 0) {
        std::poisson_distribution<std::size_t> count(cfg.noise_rate * double(h * w) * dur / 1000.0);
        std::uniform_int_distribution<std::size_t> px(0, w - 1), py(0, h - 1);
        std::uniform_real_distribution<double> tt(0.0, dur * 1000.0);
        std::bernoulli_distribution pol(0.5);
        const std::size_t n = count(rng);
        for (std::size_t i = 0; i < n; ++i) {
            const auto t = static_cast<std::uint64_t>(tt(rng));
            const auto x = static_cast<std::uint16_t>(px(rng));
            const auto y = static_cast<std::uint16_t>(py(rng));
            s.events.push_back({t, x, y, static_cast<std::uint8_t>(pol(rng))});
        }
    }
    const auto end_us = static_cast<std::uint64_t>(std::llround(dur * 1000.0));
    for (auto& e : s.events) e.t = std::min(e.t, end_us - 1);
    std::stable_sort(s.events.begin(), s.events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });

    for (std::size_t j = 0; j < cfg.labeled_frames; ++j) {
        const double t = dur * double(j + 1) / double(cfg.labeled_frames);
        auto& list = scene.labels[std::to_string(j)];
        for (const auto& o : scene.objects) {
            const auto b = o.box(t, double(w), double(h));
            if (b.x2 - b.x1 > 1.0 && b.y2 - b.y1 > 1.0) list.push_back(b);
        }
        scene.label_us.push_back(static_cast<std::uint64_t>(std::llround(t * 1000.0)));
    }
    return scene;
}

inline SyntheticSceneConfig synth_config_from_json(const nlohmann::json& j) {
    SyntheticSceneConfig c;
    if (!j.is_object()) throw ConfigError("synth config must be an object");
    static const char* known[] = {"height", "width", "min_objects", "max_objects", "classes", "min_radius",
                                  "max_radius", "min_speed", "max_speed", "events_per_edge", "noise_rate",
                                  "duration_ms", "labeled_frames", "max_overlap_iou", "seed"};
    for (const auto& [k, v] : j.items())
        if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) == std::end(known))
            throw ConfigError("synth config: unknown key '" + k + "'");
    try {
        c.height = j.value("height", c.height);
        c.width = j.value("width", c.width);
        c.min_objects = j.value("min_objects", c.min_objects);
        c.max_objects = j.value("max_objects", c.max_objects);
        c.classes = j.value("classes", c.classes);
        c.min_radius = j.value("min_radius", c.min_radius);
        c.max_radius = j.value("max_radius", c.max_radius);
        c.min_speed = j.value("min_speed", c.min_speed);
        c.max_speed = j.value("max_speed", c.max_speed);
        c.events_per_edge = j.value("events_per_edge", c.events_per_edge);
        c.noise_rate = j.value("noise_rate", c.noise_rate);
        c.duration_ms = j.value("duration_ms", c.duration_ms);
        c.labeled_frames = j.value("labeled_frames", c.labeled_frames);
        c.max_overlap_iou = j.value("max_overlap_iou", c.max_overlap_iou);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

inline nlohmann::json synth_config_to_json(const SyntheticSceneConfig& c) {
    return {{"height", c.height},         {"width", c.width},
            {"min_objects", c.min_objects}, {"max_objects", c.max_objects},
            {"classes", c.classes},       {"min_radius", c.min_radius},
            {"max_radius", c.max_radius}, {"min_speed", c.min_speed},
            {"max_speed", c.max_speed},   {"events_per_edge", c.events_per_edge},
            {"noise_rate", c.noise_rate}, {"duration_ms", c.duration_ms},
            {"labeled_frames", c.labeled_frames}, {"max_overlap_iou", c.max_overlap_iou},
            {"seed", c.seed}};
}

}  // namespace mvheat
