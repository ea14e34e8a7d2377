#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "declip/distill.hpp"
#include "declip/encoder.hpp"

namespace declip {

/// Flat key=value run configuration covering the student/teacher encoder, the
/// VFM encoder, distillation, and evaluation settings. Unknown keys are
/// rejected with their line number.
struct RunConfig {
    EncoderConfig student; // teacher shares this architecture
    EncoderConfig vfm;
    DistillOptions distill;
    uint64_t vfm_seed = 0;
    bool vfm_seed_set = false;
    int window = 0; // 0 = student image size
    int stride = 0; // 0 = window / 2 rounded to patch
    int eval_short_side = 0; // 0 = keep native resolution
    float proxy_top_frac = 0.02f;
    int heatmap_px = 0; // 0 = student image size

    int effective_window() const { return window > 0 ? window : student.image_size; }
    int effective_stride() const {
        if (stride > 0) return stride;
        const int half = effective_window() / 2;
        const int snapped = (half / student.patch_size) * student.patch_size;
        return snapped > 0 ? snapped : student.patch_size;
    }
    int effective_heatmap_px() const { return heatmap_px > 0 ? heatmap_px : student.image_size; }
    uint64_t effective_vfm_seed() const { return vfm_seed_set ? vfm_seed : distill.seed + 1; }

    void validate() const {
        student.validate();
        vfm.validate();
        if (student.image_size / student.patch_size != vfm.image_size / vfm.patch_size)
            throw IoError("config: token-count mismatch, student grid " +
                          std::to_string(student.image_size / student.patch_size) + " vs vfm grid " +
                          std::to_string(vfm.image_size / vfm.patch_size));
        if (vfm.has_vl_proj) throw IoError("config: the vfm encoder does not take a v-l projection");
        if (distill.grid_lo < 1 || distill.grid_lo > distill.grid_hi)
            throw IoError("config: grid range must satisfy 1 <= grid_lo <= grid_hi");
        if (distill.lambda < 0.0f) throw IoError("config: lambda must be nonnegative");
        if (distill.batch < 1 || distill.epochs < 1) throw IoError("config: batch and epochs must be >= 1");
        if (distill.roi_bins < 1 || distill.roi_samples < 1)
            throw IoError("config: roi_bins and roi_samples must be >= 1");
        const int crop = distill.effective_teacher_crop(student);
        if (crop != student.image_size)
            throw IoError("config: teacher_crop " + std::to_string(crop) +
                          " must equal image_size (the teacher shares the student architecture)");
        if (distill.finetune_layers > student.depth)
            throw IoError("config: finetune_layers exceeds depth " + std::to_string(student.depth));
        const int w = effective_window();
        if (w % student.patch_size != 0 || effective_stride() % student.patch_size != 0)
            throw IoError("config: window and stride must be multiples of patch_size");
    }
};

namespace detail {

inline std::array<float, 3> parse_float3(const std::string& v, const std::string& key, int line_no) {
    std::istringstream ss(v);
    std::array<float, 3> out{};
    if (!(ss >> out[0] >> out[1] >> out[2]))
        throw IoError("config line " + std::to_string(line_no) + ": " + key + " needs three values");
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key, int line_no) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw IoError("config line " + std::to_string(line_no) + ": " + key + " must be true or false");
}

} // namespace detail

inline RunConfig parse_run_config(std::istream& in) {
    RunConfig cfg;
    cfg.vfm.image_size = 16;
    cfg.vfm.patch_size = 8;
    cfg.vfm.dim = 12;
    cfg.vfm.has_vl_proj = false;
    cfg.vfm.norm_mean = {0.45f, 0.45f, 0.45f};
    cfg.vfm.norm_std = {0.27f, 0.27f, 0.27f};

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const size_t eq = line.find('=');
        // blank / comment-only lines
        std::string probe = line;
        probe.erase(std::remove_if(probe.begin(), probe.end(), [](unsigned char c) { return std::isspace(c); }),
                    probe.end());
        if (probe.empty()) continue;
        if (eq == std::string::npos)
            throw IoError("config line " + std::to_string(line_no) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw IoError("config line " + std::to_string(line_no) + ": expected key = value");

        auto as_int = [&] { return std::stoi(val); };
        auto as_float = [&] { return std::stof(val); };
        auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(val)); };

        if (key == "image_size") cfg.student.image_size = as_int();
        else if (key == "patch_size") cfg.student.patch_size = as_int();
        else if (key == "depth") cfg.student.depth = as_int();
        else if (key == "heads") cfg.student.heads = as_int();
        else if (key == "dim") cfg.student.dim = as_int();
        else if (key == "vl_dim") cfg.student.vl_dim = as_int();
        else if (key == "vl_proj") cfg.student.has_vl_proj = detail::parse_bool(val, key, line_no);
        else if (key == "norm_mean") cfg.student.norm_mean = detail::parse_float3(val, key, line_no);
        else if (key == "norm_std") cfg.student.norm_std = detail::parse_float3(val, key, line_no);
        else if (key == "vfm_image_size") cfg.vfm.image_size = as_int();
        else if (key == "vfm_patch_size") cfg.vfm.patch_size = as_int();
        else if (key == "vfm_depth") cfg.vfm.depth = as_int();
        else if (key == "vfm_heads") cfg.vfm.heads = as_int();
        else if (key == "vfm_dim") cfg.vfm.dim = as_int();
        else if (key == "vfm_norm_mean") cfg.vfm.norm_mean = detail::parse_float3(val, key, line_no);
        else if (key == "vfm_norm_std") cfg.vfm.norm_std = detail::parse_float3(val, key, line_no);
        else if (key == "vfm_seed") {
            cfg.vfm_seed = as_u64();
            cfg.vfm_seed_set = true;
        } else if (key == "lambda") cfg.distill.lambda = as_float();
        else if (key == "context_type") cfg.distill.context_type = context_type_from_string(val);
        else if (key == "context_norm") cfg.distill.context_norm = context_norm_from_string(val);
        else if (key == "scheme") cfg.distill.scheme = scheme_from_string(val);
        else if (key == "finetune_layers") cfg.distill.finetune_layers = as_int();
        else if (key == "grid_lo") cfg.distill.grid_lo = as_int();
        else if (key == "grid_hi") cfg.distill.grid_hi = as_int();
        else if (key == "teacher_crop") cfg.distill.teacher_crop_px = as_int();
        else if (key == "lr") cfg.distill.lr = as_float();
        else if (key == "weight_decay") cfg.distill.weight_decay = as_float();
        else if (key == "epochs") cfg.distill.epochs = as_int();
        else if (key == "batch") cfg.distill.batch = as_int();
        else if (key == "seed") cfg.distill.seed = as_u64();
        else if (key == "max_steps") cfg.distill.max_steps = as_int();
        else if (key == "log_every") cfg.distill.log_every = as_int();
        else if (key == "roi_bins") cfg.distill.roi_bins = as_int();
        else if (key == "roi_samples") cfg.distill.roi_samples = as_int();
        else if (key == "vl_proj_trainable") cfg.distill.vl_proj_trainable = detail::parse_bool(val, key, line_no);
        else if (key == "window") cfg.window = as_int();
        else if (key == "stride") cfg.stride = as_int();
        else if (key == "eval_short_side") cfg.eval_short_side = as_int();
        else if (key == "proxy_top_frac") cfg.proxy_top_frac = as_float();
        else if (key == "heatmap_px") cfg.heatmap_px = as_int();
        else throw IoError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    return parse_run_config(f);
}

} // namespace declip
