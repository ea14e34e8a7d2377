#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "declip/eval.hpp"
#include "declip/pnm.hpp"
#include "declip/region_ops.hpp"
#include "declip/rng.hpp"

namespace declip {

struct SynthRegion {
    RegionBox box;
    int class_id = 0;
};

struct SynthSample {
    Grid image;                  // H x W x 3 in [0, 1]
    std::vector<uint8_t> labels; // H x W class ids
    std::vector<SynthRegion> regions;
};

namespace detail {

struct ShapeSpec {
    int kind = 0; // 0 rect, 1 circle, 2 triangle
    int class_id = 1;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // bounding box, inclusive pixels
};

inline bool boxes_overlap(const ShapeSpec& a, const ShapeSpec& b, int margin) {
    return a.x0 - margin <= b.x1 && b.x0 - margin <= a.x1 && a.y0 - margin <= b.y1 && b.y0 - margin <= a.y1;
}

} // namespace detail

/// One synthetic sample: 1-4 non-overlapping filled shapes on a noisy
/// background, per-pixel class labels, and one tight inner region box per
/// shape (inner so that the box contents are purely the shape's class).
inline SynthSample gen_synth_sample(Rng& rng, int px, int k_classes, const std::vector<std::array<float, 3>>& colors) {
    SynthSample s;
    s.image = Grid(px, px, 3);
    s.labels.assign(static_cast<size_t>(px) * px, 0);

    const int want = rng.uniform_int(1, 4);
    std::vector<detail::ShapeSpec> shapes;
    for (int i = 0; i < static_cast<int>(want); ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            detail::ShapeSpec sp;
            sp.kind = rng.uniform_int(0, 2);
            sp.class_id = rng.uniform_int(1, k_classes - 1);
            const int extent = rng.uniform_int(px / 5, (px * 2) / 5);
            sp.x0 = rng.uniform_int(1, px - extent - 2);
            sp.y0 = rng.uniform_int(1, px - extent - 2);
            sp.x1 = sp.x0 + extent - 1;
            sp.y1 = sp.y0 + extent - 1;
            bool clash = false;
            for (const auto& other : shapes)
                if (detail::boxes_overlap(sp, other, 2)) {
                    clash = true;
                    break;
                }
            if (!clash) {
                shapes.push_back(sp);
                placed = true;
            }
        }
        if (!placed) {
            std::fprintf(stderr, "warning: placed %zu/%d shapes after bounded retries\n", shapes.size(), want);
            break;
        }
    }

    // background
    for (int y = 0; y < px; ++y)
        for (int x = 0; x < px; ++x)
            for (int ch = 0; ch < 3; ++ch)
                s.image.at(y, x, ch) =
                    std::clamp(colors[0][ch] + rng.uniform_float(-0.05f, 0.05f), 0.0f, 1.0f);

    for (const auto& sp : shapes) {
        const auto& col = colors[sp.class_id];
        auto put = [&](int x, int y) {
            s.labels[static_cast<size_t>(y) * px + x] = static_cast<uint8_t>(sp.class_id);
            for (int ch = 0; ch < 3; ++ch)
                s.image.at(y, x, ch) = std::clamp(col[ch] + rng.uniform_float(-0.05f, 0.05f), 0.0f, 1.0f);
        };
        SynthRegion region;
        region.class_id = sp.class_id;
        const float fw = static_cast<float>(px);
        if (sp.kind == 0) {
            for (int y = sp.y0; y <= sp.y1; ++y)
                for (int x = sp.x0; x <= sp.x1; ++x) put(x, y);
            region.box = {sp.x0 / fw, sp.y0 / fw, (sp.x1 + 1) / fw, (sp.y1 + 1) / fw};
        } else if (sp.kind == 1) {
            const int cx = (sp.x0 + sp.x1) / 2;
            const int cy = (sp.y0 + sp.y1) / 2;
            const int r = (sp.x1 - sp.x0) / 2;
            for (int y = sp.y0; y <= sp.y1; ++y)
                for (int x = sp.x0; x <= sp.x1; ++x)
                    if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) put(x, y);
            // largest inner square fully inside the circle: 2a^2 <= r^2
            int a = 0;
            while (2 * (a + 1) * (a + 1) <= r * r) ++a;
            region.box = {(cx - a) / fw, (cy - a) / fw, (cx + a + 1) / fw, (cy + a + 1) / fw};
        } else {
            // apex-up triangle filling the bounding box
            const int h = sp.y1 - sp.y0;
            const int cx = (sp.x0 + sp.x1) / 2;
            const int wb = (sp.x1 - sp.x0) / 2; // half base
            for (int y = sp.y0; y <= sp.y1; ++y) {
                const int half = static_cast<int>(std::floor(static_cast<float>(y - sp.y0) / h * wb));
                for (int x = cx - half; x <= cx + half; ++x) put(x, y);
            }
            const int iw = std::max(1, wb / 2 - 1);
            const int ty = sp.y0 + (h + 1) / 2 + 1;
            region.box = {(cx - iw) / fw, ty / fw, (cx + iw + 1) / fw, (sp.y1 + 1) / fw};
        }
        s.regions.push_back(region);
    }
    return s;
}

inline ClassBank make_random_bank(uint64_t seed, int k_classes, int dim) {
    Rng rng(seed);
    ClassBank bank;
    bank.embeds = Mat(k_classes, dim);
    for (int k = 0; k < k_classes; ++k) {
        bank.names.push_back("class_" + std::to_string(k));
        float norm = 0.0f;
        for (int j = 0; j < dim; ++j) {
            const float v = rng.uniform_float(-1.0f, 1.0f);
            bank.embeds(k, j) = v;
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < dim; ++j) bank.embeds(k, j) /= norm;
    }
    return bank;
}

inline void save_class_bank(const std::string& path, const ClassBank& bank) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    char buf[40];
    f << bank.dim() << " " << bank.classes() << "\n";
    for (int k = 0; k < bank.classes(); ++k) {
        f << bank.names[k];
        for (int j = 0; j < bank.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), " %.9g", bank.embeds(k, j));
            f << buf;
        }
        f << "\n";
    }
    if (!f) throw IoError("write failed for " + path);
}

inline ClassBank load_class_bank(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    int dim = 0, k_classes = 0;
    if (!(f >> dim >> k_classes) || dim <= 0 || k_classes <= 0)
        throw IoError(path + ": malformed class bank header");
    ClassBank bank;
    bank.embeds = Mat(k_classes, dim);
    for (int k = 0; k < k_classes; ++k) {
        std::string name;
        if (!(f >> name)) throw IoError(path + ": truncated class bank");
        for (const std::string& existing : bank.names)
            if (existing == name) throw IoError(path + ": duplicate class name " + name);
        bank.names.push_back(name);
        float norm = 0.0f;
        for (int j = 0; j < dim; ++j) {
            if (!(f >> bank.embeds(k, j))) throw IoError(path + ": truncated embedding for " + name);
            norm += bank.embeds(k, j) * bank.embeds(k, j);
        }
        if (std::fabs(std::sqrt(norm) - 1.0f) > 1e-4f)
            throw IoError(path + ": embedding for " + name + " is not unit norm");
    }
    return bank;
}

inline void save_regions(const std::string& path, int image_id, const std::vector<SynthRegion>& regions) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    char buf[160];
    for (const SynthRegion& r : regions) {
        std::snprintf(buf, sizeof(buf), "%d %.9g %.9g %.9g %.9g %d\n", image_id, r.box.x0, r.box.y0, r.box.x1,
                      r.box.y1, r.class_id);
        f << buf;
    }
}

inline std::vector<SynthRegion> load_regions(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    std::vector<SynthRegion> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        int image_id = 0;
        SynthRegion r;
        if (!(ss >> image_id >> r.box.x0 >> r.box.y0 >> r.box.x1 >> r.box.y1 >> r.class_id))
            throw IoError(path + " line " + std::to_string(line_no) + ": malformed region");
        if (!r.box.valid())
            throw IoError(path + " line " + std::to_string(line_no) + ": invalid box");
        out.push_back(r);
    }
    return out;
}

inline std::string sample_stem(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "sample_%04d", index);
    return buf;
}

/// Write a full synthetic dataset directory: PPM images, PGM label grids,
/// per-sample region files, a random unit-vector class bank, and an index.
inline void gen_synth(uint64_t seed, int count, int px, int k_classes, int bank_dim, const std::string& out_dir) {
    if (k_classes < 2) throw IoError("gen_synth: need at least 2 classes (background + shapes)");
    if (px < 16) throw IoError("gen_synth: image size must be at least 16");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    Rng color_rng(seed ^ 0xC01055EEDull);
    std::vector<std::array<float, 3>> colors(k_classes);
    for (auto& c : colors)
        for (float& v : c) v = color_rng.uniform_float(0.1f, 0.9f);

    std::ofstream index(fs::path(out_dir) / "index.txt");
    if (!index) throw IoError("cannot open " + out_dir + "/index.txt for writing");
    Rng rng(seed);
    for (int i = 0; i < count; ++i) {
        const SynthSample s = gen_synth_sample(rng, px, k_classes, colors);
        const std::string stem = sample_stem(i);
        write_ppm((fs::path(out_dir) / (stem + ".ppm")).string(), s.image);
        write_pgm((fs::path(out_dir) / (stem + "_labels.pgm")).string(), px, px, s.labels);
        save_regions((fs::path(out_dir) / (stem + "_regions.txt")).string(), i, s.regions);
        index << stem << "\n";
    }
    save_class_bank((fs::path(out_dir) / "bank.txt").string(), make_random_bank(seed ^ 0xBA4Cull, k_classes, bank_dim));
}

struct DatasetSample {
    Grid image;
    std::vector<uint8_t> labels;
    int label_h = 0, label_w = 0;
    std::vector<SynthRegion> regions;
};

inline std::vector<std::string> load_index(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "index.txt");
    if (!f) throw IoError("cannot open " + dir + "/index.txt");
    std::vector<std::string> stems;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) stems.push_back(line);
    if (stems.empty()) throw IoError(dir + ": empty dataset index");
    return stems;
}

inline DatasetSample load_sample(const std::string& dir, const std::string& stem) {
    namespace fs = std::filesystem;
    DatasetSample s;
    s.image = read_ppm((fs::path(dir) / (stem + ".ppm")).string());
    const PgmImage lbl = read_pgm((fs::path(dir) / (stem + "_labels.pgm")).string());
    s.labels = lbl.pixels;
    s.label_h = lbl.h;
    s.label_w = lbl.w;
    s.regions = load_regions((fs::path(dir) / (stem + "_regions.txt")).string());
    return s;
}

inline std::vector<Grid> load_images(const std::string& dir) {
    std::vector<Grid> out;
    for (const std::string& stem : load_index(dir))
        out.push_back(read_ppm((std::filesystem::path(dir) / (stem + ".ppm")).string()));
    return out;
}

} // namespace declip
