#pragma once

// Backbone + detection head, and the binary checkpoint format.
//
// Checkpoint layout (little-endian):
//   "HMOE" u32 version u32 count
//   count x { u16 name_len, name, u8 rank, rank x u32 extent, numel x f64 value }

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mvheat/detect.hpp"
#include "mvheat/events.hpp"
#include "mvheat/moe.hpp"

namespace mvheat {

template <class T>
class Detector {
public:
    Detector(const BackboneConfig& backbone, const HeadConfig& head, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        backbone_ = Backbone<T>(backbone, rng);
        head_ = DetectionHead<T>(head, backbone, rng);
    }

    /// frames [N, H, W, 2B] -> one set of K queries per image.
    std::vector<HeadOutput<T>> forward(const Tensor<T>& frames, RouteContext& ctx) const {
        const auto stages = backbone_.forward(frames, ctx);
        std::vector<HeadOutput<T>> out;
        for (std::size_t b = 0; b < frames.dim(0); ++b) out.push_back(head_.forward(stages, b));
        return out;
    }

    void visit(const ParamVisitor<T>& f) {
        backbone_.visit(f);
        head_.visit(f);
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        visit([&](Parameter<T>& p) { n += p.size(); });
        return n;
    }

    Backbone<T>& backbone() { return backbone_; }
    DetectionHead<T>& head() { return head_; }

private:
    Backbone<T> backbone_;
    DetectionHead<T> head_;
};

/// Queries -> scored pixel boxes: each query reports its best class.
template <class T>
std::vector<ScoredBox> to_detections(const HeadOutput<T>& out, double width, double height) {
    const std::size_t k = out.boxes.dim(0), c = out.logits.dim(1);
    std::vector<ScoredBox> dets;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (out.logits[i * c + j] > out.logits[i * c + best]) best = j;
        const double cx = out.boxes[i * 4] * width, cy = out.boxes[i * 4 + 1] * height;
        const double w = out.boxes[i * 4 + 2] * width, h = out.boxes[i * 4 + 3] * height;
        dets.push_back({BoxXYXY{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2},
                        detail::sigmoid_scalar(double(out.logits[i * c + best])), int(best)});
    }
    return dets;
}

// ---------------------------------------------------------------- checkpoint

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline constexpr char kCheckpointMagic[4] = {'H', 'M', 'O', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
U get_le(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(b), sizeof(U)))
        throw ParseError("checkpoint '" + path + "': truncated while reading " + what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return static_cast<U>(v);
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint32_t>(out, std::uint32_t(entries.size()));
    for (const auto& e : entries) {
        detail::put_le<std::uint16_t>(out, std::uint16_t(e.name.size()));
        out.write(e.name.data(), std::streamsize(e.name.size()));
        detail::put_le<std::uint8_t>(out, std::uint8_t(e.shape.size()));
        for (auto d : e.shape) detail::put_le<std::uint32_t>(out, std::uint32_t(d));
        for (double v : e.values) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            detail::put_le<std::uint64_t>(out, bits);
        }
    }
    if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw ParseError("checkpoint '" + path + "': bad magic");
    const auto version = detail::get_le<std::uint32_t>(in, path, "version");
    if (version != kCheckpointVersion)
        throw ParseError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(in, path, "entry count");
    std::vector<CheckpointEntry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name.resize(detail::get_le<std::uint16_t>(in, path, "name length"));
        if (!in.read(e.name.data(), std::streamsize(e.name.size())))
            throw ParseError("checkpoint '" + path + "': truncated name of entry " + std::to_string(i));
        const auto rank = detail::get_le<std::uint8_t>(in, path, "rank");
        for (std::uint8_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_le<std::uint32_t>(in, path, "extent"));
        e.values.resize(numel(e.shape));
        for (auto& v : e.values) {
            const auto bits = detail::get_le<std::uint64_t>(in, path, ("values of '" + e.name + "'").c_str());
            std::memcpy(&v, &bits, 8);
        }
        entries.push_back(std::move(e));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint '" + path + "': trailing bytes");
    return entries;
}

template <class T>
void save_checkpoint(const std::string& path, Detector<T>& model) {
    std::vector<CheckpointEntry> entries;
    model.visit([&](Parameter<T>& p) {
        const auto v = p.value();
        entries.push_back({p.name(), p.shape(), std::vector<double>(v.begin(), v.end())});
    });
    write_checkpoint(path, entries);
}

/// Loads values into `model`; any name or shape difference is reported in one DimensionError.
template <class T>
void load_checkpoint(const std::string& path, Detector<T>& model) {
    const auto entries = read_checkpoint(path);
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    std::vector<std::string> diffs;
    std::map<std::string, bool> used;
    model.visit([&](Parameter<T>& p) {
        const auto it = by_name.find(p.name());
        if (it == by_name.end()) {
            diffs.push_back(p.name() + ": missing from checkpoint, model " + shape_str(p.shape()));
            return;
        }
        used[p.name()] = true;
        if (it->second->shape != p.shape())
            diffs.push_back(p.name() + ": checkpoint " + shape_str(it->second->shape) + " vs model " + shape_str(p.shape()));
    });
    for (const auto& e : entries)
        if (!used.count(e.name)) diffs.push_back(e.name + ": not in model, checkpoint " + shape_str(e.shape));
    if (!diffs.empty()) {
        std::string msg = "checkpoint '" + path + "' does not match the architecture:";
        for (const auto& d : diffs) msg += "\n  " + d;
        throw DimensionError(msg);
    }
    model.visit([&](Parameter<T>& p) {
        const auto& src = by_name.at(p.name())->values;
        auto dst = p.value();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = T(src[i]);
    });
}

}  // namespace mvheat
