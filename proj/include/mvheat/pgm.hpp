#pragma once

// Binary portable graymap (P5) images, values mapped to [0, 1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "mvheat/error.hpp"

namespace mvheat {

struct GrayImage {
    std::size_t height = 0, width = 0;
    std::vector<double> pixels;  ///< row-major, nominally in [0, 1]
};

namespace detail {

inline std::size_t pgm_token(std::istream& in, const std::string& path, const char* what) {
    int c = in.get();
    while (in && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (in && c != '\n') c = in.get();
        c = in.get();
    }
    std::string tok;
    while (in && std::isdigit(c)) {
        tok.push_back(char(c));
        c = in.get();
    }
    if (tok.empty()) throw ParseError("pgm '" + path + "': missing " + what);
    return std::stoul(tok);
}

}  // namespace detail

inline GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image '" + path + "'");
    char magic[2];
    if (!in.read(magic, 2) || magic[0] != 'P' || magic[1] != '5') throw ParseError("pgm '" + path + "': not a P5 file");
    GrayImage img;
    img.width = detail::pgm_token(in, path, "width");
    img.height = detail::pgm_token(in, path, "height");
    const std::size_t maxval = detail::pgm_token(in, path, "maxval");
    if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535)
        throw ParseError("pgm '" + path + "': invalid header");
    const std::size_t n = img.width * img.height, bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(n * bytes);
    if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
        throw ParseError("pgm '" + path + "': truncated pixel data");
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = bytes == 2 ? double(raw[2 * i] << 8 | raw[2 * i + 1]) : double(raw[i]);
        img.pixels[i] = v / double(maxval);
    }
    return img;
}

/// 16-bit P5; values are clamped to [0, 1].
inline void write_pgm(const std::string& path, const GrayImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write image '" + path + "'");
    out << "P5\n" << img.width << " " << img.height << "\n65535\n";
    for (double v : img.pixels) {
        const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
        out.put(char(q >> 8));
        out.put(char(q & 0xff));
    }
    if (!out) throw IoError("write failed for image '" + path + "'");
}

}  // namespace mvheat
