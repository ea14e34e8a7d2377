// Command-line surface: synthetic data generation, encoder initialization,
// decoupled distillation, the two evaluation protocols, attention probes, and
// gradient verification.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "declip/checkpoint.hpp"
#include "declip/config.hpp"
#include "declip/decoupled.hpp"
#include "declip/distill.hpp"
#include "declip/eval.hpp"
#include "declip/pnm.hpp"
#include "declip/probe.hpp"
#include "declip/reference.hpp"
#include "declip/synth.hpp"

namespace fs = std::filesystem;
using namespace declip;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumeric = 3;

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

Grid maybe_resize_short_side(const Grid& image, int short_side, int patch) {
    if (short_side <= 0) return image;
    const int cur = std::min(image.h, image.w);
    const double scale = static_cast<double>(short_side) / cur;
    auto snap = [&](int v) {
        int out = static_cast<int>(std::lround(v * scale));
        out = std::max(patch, (out / patch) * patch);
        return out;
    };
    return resize_image(image, snap(image.h), snap(image.w));
}

std::vector<uint8_t> region_mask_from_labels(const DatasetSample& sample, const SynthRegion& region, int grid_h,
                                             int grid_w) {
    std::vector<uint8_t> mask(static_cast<size_t>(grid_h) * grid_w, 0);
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            // label at the feature cell's center pixel
            const float u = (static_cast<float>(gx) + 0.5f) / grid_w;
            const float v = (static_cast<float>(gy) + 0.5f) / grid_h;
            if (u < region.box.x0 || u > region.box.x1 || v < region.box.y0 || v > region.box.y1) continue;
            const int px = std::min(sample.label_w - 1, static_cast<int>(u * sample.label_w));
            const int py = std::min(sample.label_h - 1, static_cast<int>(v * sample.label_h));
            if (sample.labels[static_cast<size_t>(py) * sample.label_w + px] == region.class_id)
                mask[static_cast<size_t>(gy) * grid_w + gx] = 1;
        }
    }
    return mask;
}

int cmd_gen_synth(uint64_t seed, int count, int px, int classes, int bank_dim, const std::string& out) {
    gen_synth(seed, count, px, classes, bank_dim, out);
    std::cout << "wrote " << count << " samples to " << out << "\n";
    return kExitOk;
}

int cmd_init(const std::string& config_path, const std::vector<std::string>& outs) {
    const RunConfig cfg = load_run_config(config_path);
    const EncoderParams student = init_encoder_params(cfg.student, cfg.distill.seed);
    EncoderConfig vcfg = cfg.vfm;
    const EncoderParams vfm = init_encoder_params(vcfg, cfg.effective_vfm_seed());
    save_encoder(outs[0], student);
    save_encoder(outs[1], student); // teacher starts as a frozen copy of the student
    save_encoder(outs[2], vfm);
    std::cout << "wrote " << outs[0] << " " << outs[1] << " " << outs[2] << "\n";
    return kExitOk;
}

int cmd_distill(const std::string& config_path, const std::string& data, const std::string& student_path,
                const std::string& teacher_path, const std::string& vfm_path, const std::string& out) {
    const RunConfig cfg = load_run_config(config_path);
    EncoderParams student = load_encoder(student_path, cfg.student);
    const EncoderParams teacher = load_encoder(teacher_path, cfg.student);
    const EncoderParams vfm = load_encoder(vfm_path, cfg.vfm);
    const std::vector<Grid> images = load_images(data);
    std::cout << "step\tcontent\tcontext\ttotal\n";
    train(images, student, teacher, vfm, cfg.student, cfg.vfm, cfg.distill, [](const LossReport& r) {
        std::cout << r.step << "\t" << fmt9(r.content) << "\t" << fmt9(r.context) << "\t" << fmt9(r.total) << "\n";
    });
    save_encoder(out, student);
    return kExitOk;
}

int cmd_eval_seg(const std::string& config_path, const std::string& data, const std::string& student_path,
                 const std::string& bank_path, int window_flag, int stride_flag) {
    RunConfig cfg = load_run_config(config_path);
    if (window_flag > 0) cfg.window = window_flag;
    if (stride_flag > 0) cfg.stride = stride_flag;
    const EncoderParams student = load_encoder(student_path, cfg.student);
    const ClassBank bank = load_class_bank(bank_path);
    if (bank.dim() != cfg.student.out_dim())
        throw IoError("bank dim " + std::to_string(bank.dim()) + " does not match feature dim " +
                      std::to_string(cfg.student.out_dim()));
    const StudentModel model{student, cfg.student, cfg.distill.context_type};

    IouAccumulator acc(bank.classes());
    for (const std::string& stem : load_index(data)) {
        const DatasetSample sample = load_sample(data, stem);
        const Grid image = maybe_resize_short_side(sample.image, cfg.eval_short_side, cfg.student.patch_size);
        const Grid dense = sliding_window_dense(image, model, cfg.effective_window(), cfg.effective_stride());
        const PixelClassification pc = classify_pixels(dense, bank);
        const SegPrediction pred = upsample_labels(pc.scores, sample.label_h, sample.label_w);
        acc.add(pred, sample.labels);
    }
    const MiouResult res = acc.result();
    for (int c = 0; c < bank.classes(); ++c)
        if (res.per_class[c] >= 0.0)
            std::cout << bank.names[c] << "\t" << fmt9(res.per_class[c]) << "\n";
    std::cout << "mIoU\t" << fmt9(res.mean) << "\n";
    return kExitOk;
}

int cmd_eval_region(const std::string& config_path, const std::string& data, const std::string& student_path,
                    const std::string& bank_path, const std::string& mode) {
    if (mode != "box" && mode != "mask") throw CLI::ValidationError("--mode", "must be box or mask");
    const RunConfig cfg = load_run_config(config_path);
    const EncoderParams student = load_encoder(student_path, cfg.student);
    const ClassBank bank = load_class_bank(bank_path);
    if (bank.dim() != cfg.student.out_dim())
        throw IoError("bank dim " + std::to_string(bank.dim()) + " does not match feature dim " +
                      std::to_string(cfg.student.out_dim()));
    const StudentModel model{student, cfg.student, cfg.distill.context_type};
    const PoolMode pool = mode == "box" ? PoolMode::Box : PoolMode::Mask;

    std::vector<int> preds, gts;
    for (const std::string& stem : load_index(data)) {
        const DatasetSample sample = load_sample(data, stem);
        const Grid image = maybe_resize_short_side(sample.image, cfg.eval_short_side, cfg.student.patch_size);
        const Grid dense = sliding_window_dense(image, model, cfg.effective_window(), cfg.effective_stride());
        for (const SynthRegion& region : sample.regions) {
            std::vector<LabeledRegion> lr(1);
            lr[0].box = region.box;
            lr[0].class_id = region.class_id;
            if (pool == PoolMode::Mask) {
                lr[0].mask = region_mask_from_labels(sample, region, dense.h, dense.w);
                bool any = false;
                for (uint8_t m : lr[0].mask) any = any || m;
                if (!any) {
                    std::fprintf(stderr, "warning: %s: empty mask for class %d region, skipped\n", stem.c_str(),
                                 region.class_id);
                    continue;
                }
            }
            preds.push_back(region_classify(dense, lr, bank, pool, cfg.distill.roi_bins, cfg.distill.roi_samples)[0]);
            gts.push_back(region.class_id);
        }
    }
    const MaccResult res = macc(preds, gts, bank.classes());
    for (int c = 0; c < bank.classes(); ++c)
        if (res.per_class[c] >= 0.0)
            std::cout << bank.names[c] << "\t" << fmt9(res.per_class[c]) << "\n";
    std::cout << "mAcc\t" << fmt9(res.mean) << "\n";
    return kExitOk;
}

int cmd_probe(const std::string& config_path, const std::string& student_path, const std::string& image_path,
              const std::string& anchor, int layer, const std::string& out_dir) {
    const RunConfig cfg = load_run_config(config_path);
    const EncoderParams student = load_encoder(student_path, cfg.student);
    const Grid raw = read_ppm(image_path);
    const Grid image = raw.h == cfg.student.image_size && raw.w == cfg.student.image_size
                           ? raw
                           : resize_image(raw, cfg.student.image_size, cfg.student.image_size);

    int ar = 0, ac = 0;
    if (std::sscanf(anchor.c_str(), "%d,%d", &ar, &ac) != 2)
        throw CLI::ValidationError("--anchor", "expected r,c");

    const EncodeOutput out = encode(image, student, cfg.student);
    if (layer < 0 || layer >= cfg.student.depth)
        throw IoError("probe: layer " + std::to_string(layer) + " out of range");
    fs::create_directories(out_dir);
    const int g = cfg.student.grid_size();
    const int px = cfg.effective_heatmap_px();

    auto dump = [&](const std::vector<float>& vec, const std::string& name) {
        const HeatmapImage img = render_heatmap(vec, g, g, px);
        write_pgm((fs::path(out_dir) / name).string(), img.width, img.height, img.pixels);
    };
    dump(cls_attention(out, layer), "cls_attn_layer" + std::to_string(layer) + ".pgm");
    dump(anchor_attention(out, layer, ar, ac), "anchor_attn_layer" + std::to_string(layer) + ".pgm");
    dump(feature_correlation(out.layer_tokens[layer], ar, ac), "featcorr_layer" + std::to_string(layer) + ".pgm");
    const Grid content = dense_for_inference(image, student, cfg.student, cfg.distill.context_type);
    dump(feature_correlation(content, ar, ac), "featcorr_content.pgm");

    std::ofstream tsv(fs::path(out_dir) / "proxy_scores.tsv");
    if (!tsv) throw IoError("cannot open proxy_scores.tsv for writing");
    tsv << "layer\tproxy_score\n";
    for (int l = 0; l < cfg.student.depth; ++l)
        tsv << l << "\t" << fmt9(proxy_score(out, l, cfg.proxy_top_frac)) << "\n";
    std::cout << "wrote probes to " << out_dir << "\n";
    return kExitOk;
}

int cmd_grad_check(const std::string& config_path, uint64_t seed, int coords) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    else cfg.validate(); // built-in tiny defaults
    EncoderParams student = init_encoder_params(cfg.student, seed);
    const EncoderParams teacher = init_encoder_params(cfg.student, seed); // same init, frozen
    const EncoderParams vfm = init_encoder_params(cfg.vfm, cfg.vfm_seed_set ? cfg.vfm_seed : seed + 1);

    Rng rng(seed ^ 0x6EADCAFEull);
    Grid image(cfg.student.image_size, cfg.student.image_size, 3);
    for (float& v : image.data) v = rng.uniform_float(0.0f, 1.0f);
    const RegionSet regions = sample_grid(rng, cfg.distill.grid_lo, cfg.distill.grid_hi);

    const ref::GradCheckResult res = ref::grad_check(image, student, teacher, vfm, cfg.student, cfg.vfm,
                                                     cfg.distill, regions, coords, 1e-4, seed + 7);
    std::cout << "max relative error\t" << fmt9(res.max_rel_err) << "\t(" << res.coords_checked << " coordinates)\n";
    if (res.max_rel_err > 1e-3) {
        std::cerr << "grad-check failed at " << res.worst_tensor << "[" << res.worst_index << "]: analytic "
                  << fmt9(res.worst_analytic) << " vs fd " << fmt9(res.worst_fd) << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"decoupled content/context distillation for dense vision features"};
    app.require_subcommand(1);

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic shape dataset");
    uint64_t gen_seed = 0;
    int gen_count = 16, gen_px = 64, gen_classes = 4, gen_bank_dim = 8;
    std::string gen_out;
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--px", gen_px, "image side in pixels");
    gen->add_option("--classes", gen_classes, "class count including background");
    gen->add_option("--bank-dim", gen_bank_dim, "class bank embedding width");
    gen->add_option("--out", gen_out, "output directory")->required();

    // init
    auto* ini = app.add_subcommand("init", "initialize student/teacher/vfm checkpoints");
    std::string ini_config;
    std::vector<std::string> ini_out;
    ini->add_option("--config", ini_config, "run config file")->required();
    ini->add_option("--out", ini_out, "student.ckpt teacher.ckpt vfm.ckpt")->expected(3)->required();

    // distill
    auto* dis = app.add_subcommand("distill", "run decoupled distillation");
    std::string dis_config, dis_data, dis_student, dis_teacher, dis_vfm, dis_out;
    dis->add_option("--config", dis_config)->required();
    dis->add_option("--data", dis_data, "dataset directory")->required();
    dis->add_option("--student", dis_student)->required();
    dis->add_option("--teacher", dis_teacher)->required();
    dis->add_option("--vfm", dis_vfm)->required();
    dis->add_option("--out", dis_out, "trained student checkpoint")->required();

    // eval-seg
    auto* seg = app.add_subcommand("eval-seg", "training-free per-pixel segmentation");
    std::string seg_config, seg_data, seg_student, seg_bank;
    int seg_window = 0, seg_stride = 0;
    seg->add_option("--config", seg_config)->required();
    seg->add_option("--data", seg_data)->required();
    seg->add_option("--student", seg_student)->required();
    seg->add_option("--bank", seg_bank)->required();
    seg->add_option("--window", seg_window, "sliding window size (default: model resolution)");
    seg->add_option("--stride", seg_stride, "sliding window stride");

    // eval-region
    auto* reg = app.add_subcommand("eval-region", "region classification accuracy");
    std::string reg_config, reg_data, reg_student, reg_bank, reg_mode = "box";
    reg->add_option("--config", reg_config)->required();
    reg->add_option("--data", reg_data)->required();
    reg->add_option("--student", reg_student)->required();
    reg->add_option("--bank", reg_bank)->required();
    reg->add_option("--mode", reg_mode, "box or mask");

    // probe
    auto* prb = app.add_subcommand("probe", "attention and correlation heatmaps");
    std::string prb_config, prb_student, prb_image, prb_anchor = "0,0", prb_out;
    int prb_layer = 0;
    prb->add_option("--config", prb_config)->required();
    prb->add_option("--student", prb_student)->required();
    prb->add_option("--image", prb_image, "input PPM")->required();
    prb->add_option("--anchor", prb_anchor, "anchor grid coordinate r,c");
    prb->add_option("--layer", prb_layer, "layer index for the heatmaps");
    prb->add_option("--out", prb_out, "output directory")->required();

    // grad-check
    auto* gck = app.add_subcommand("grad-check", "finite-difference gradient verification");
    std::string gck_config;
    uint64_t gck_seed = 0;
    int gck_coords = 20;
    gck->add_option("--config", gck_config, "run config (default: built-in tiny config)");
    gck->add_option("--seed", gck_seed);
    gck->add_option("--coords", gck_coords, "number of sampled coordinates");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_synth(gen_seed, gen_count, gen_px, gen_classes, gen_bank_dim, gen_out);
        if (ini->parsed()) return cmd_init(ini_config, ini_out);
        if (dis->parsed()) return cmd_distill(dis_config, dis_data, dis_student, dis_teacher, dis_vfm, dis_out);
        if (seg->parsed()) return cmd_eval_seg(seg_config, seg_data, seg_student, seg_bank, seg_window, seg_stride);
        if (reg->parsed()) return cmd_eval_region(reg_config, reg_data, reg_student, reg_bank, reg_mode);
        if (prb->parsed()) return cmd_probe(prb_config, prb_student, prb_image, prb_anchor, prb_layer, prb_out);
        if (gck->parsed()) return cmd_grad_check(gck_config, gck_seed, gck_coords);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitUsage;
}
