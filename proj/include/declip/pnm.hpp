#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "declip/errors.hpp"
#include "declip/mat.hpp"

namespace declip {

namespace detail {

inline int pnm_next_int(std::istream& in, const std::string& path) {
    // skip whitespace and '#' comments
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF) throw IoError("truncated PNM header in " + path);
    int v = 0;
    bool any = false;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        any = true;
        ch = in.get();
    }
    if (!any) throw IoError("malformed PNM header in " + path);
    return v;
}

} // namespace detail

/// Binary PGM (P5), maxval 255.
inline void write_pgm(const std::string& path, int w, int h, const std::vector<uint8_t>& pixels) {
    if (static_cast<size_t>(w) * h != pixels.size()) throw IoError("write_pgm: size mismatch for " + path);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!f) throw IoError("write failed for " + path);
}

struct PgmImage {
    int w = 0, h = 0;
    std::vector<uint8_t> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '5') throw IoError(path + " is not a binary PGM (P5)");
    PgmImage img;
    img.w = detail::pnm_next_int(f, path);
    img.h = detail::pnm_next_int(f, path);
    const int maxval = detail::pnm_next_int(f, path);
    if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
    img.pixels.resize(static_cast<size_t>(img.w) * img.h);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError(path + ": truncated PGM payload");
    return img;
}

/// Binary PPM (P6) from a float image in [0, 1].
inline void write_ppm(const std::string& path, const Grid& image) {
    if (image.c != 3) throw IoError("write_ppm: image must have 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P6\n" << image.w << " " << image.h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(image.w) * 3);
    for (int y = 0; y < image.h; ++y) {
        for (int x = 0; x < image.w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = std::clamp(image.at(y, x, ch), 0.0f, 1.0f);
                row[static_cast<size_t>(x) * 3 + ch] = static_cast<uint8_t>(std::lround(v * 255.0f));
            }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw IoError("write failed for " + path);
}

inline Grid read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '6') throw IoError(path + " is not a binary PPM (P6)");
    const int w = detail::pnm_next_int(f, path);
    const int h = detail::pnm_next_int(f, path);
    const int maxval = detail::pnm_next_int(f, path);
    if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
    std::vector<uint8_t> raw(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path + ": truncated PPM payload");
    Grid img(h, w, 3);
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

} // namespace declip
