// morphmark - two-stage one-shot landmark localization pipeline driver.
//
// subcommands:
//   gen-data      synthesize a benchmark corpus with exact ground truth
//   train-stage1  unsupervised registration + pseudo-label propagation
//   infer-pseudo  label propagation from an existing stage-1 checkpoint
//   train-stage2  consistency co-teaching of the detector pair
//   eval          MRE/SDR of a prediction CSV against the corpus truth
//   overlay       render predictions (and truth) on top of a corpus image

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "morphmark/c2t.hpp"
#include "morphmark/config.hpp"
#include "morphmark/stage1.hpp"
#include "morphmark/synthbench.hpp"

namespace fs = std::filesystem;
using namespace morphmark;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 1;
    int threads = -1;  // -1: leave the config value in place
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_path, "JSON config file (flat dotted keys)");
    cmd->add_option("--set", c.overrides, "config override key=value (repeatable)");
    cmd->add_option("--seed", c.seed, "run seed");
    cmd->add_option("--threads", c.threads, "worker threads (default: MORPHMARK_THREADS or 1)");
}

PipelineConfig resolve_config(const CommonOpts& c) {
    PipelineConfig cfg;
    if (!c.config_path.empty()) load_config_file(cfg, c.config_path);
    apply_config_overrides(cfg, c.overrides);
    if (c.threads >= 0) cfg.threads = c.threads;
    return cfg;
}

void echo_config(const PipelineConfig& cfg, const std::string& out_dir) {
    const nlohmann::json j = config_to_json(cfg);
    std::cout << j.dump(2) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_config_file(cfg, (fs::path(out_dir) / "resolved_config.json").string());
    }
}

void draw_marker(std::vector<std::uint8_t>& rgb, int height, int width, double px, double py,
                 std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    const int cx = static_cast<int>(std::lround(px));
    const int cy = static_cast<int>(std::lround(py));
    for (int d = -2; d <= 2; ++d) {
        for (auto [y, x] : {std::pair{cy + d, cx}, std::pair{cy, cx + d}}) {
            if (y < 0 || y >= height || x < 0 || x >= width) continue;
            const std::size_t i = 3 * (static_cast<std::size_t>(y) * width + x);
            rgb[i] = r;
            rgb[i + 1] = g;
            rgb[i + 2] = b;
        }
    }
}

int run(int argc, char** argv) {
    CLI::App app{"two-stage one-shot landmark localization"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "synthesize a benchmark corpus");
    CommonOpts gen_c;
    std::string gen_out;
    add_common(gen, gen_c);
    gen->add_option("--out", gen_out, "output dataset directory")->required();

    // train-stage1
    auto* s1 = app.add_subcommand("train-stage1", "registration training + pseudo labels");
    CommonOpts s1_c;
    std::string s1_data, s1_out;
    add_common(s1, s1_c);
    s1->add_option("--data", s1_data, "dataset directory")->required();
    s1->add_option("--out", s1_out, "output directory")->required();

    // infer-pseudo
    auto* ip = app.add_subcommand("infer-pseudo", "propagate labels from a checkpoint");
    CommonOpts ip_c;
    std::string ip_data, ip_ckpt, ip_out;
    add_common(ip, ip_c);
    ip->add_option("--data", ip_data, "dataset directory")->required();
    ip->add_option("--ckpt", ip_ckpt, "stage-1 checkpoint")->required();
    ip->add_option("--out", ip_out, "output pseudo-label CSV")->required();

    // train-stage2
    auto* s2 = app.add_subcommand("train-stage2", "co-teaching detector training");
    CommonOpts s2_c;
    std::string s2_data, s2_pseudo, s2_out;
    add_common(s2, s2_c);
    s2->add_option("--data", s2_data, "dataset directory")->required();
    s2->add_option("--pseudo", s2_pseudo, "pseudo-label CSV from stage 1")->required();
    s2->add_option("--out", s2_out, "output directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "score a prediction CSV against corpus truth");
    std::string ev_data, ev_pred, ev_out;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--pred", ev_pred, "prediction CSV (image,index,x,y)")->required();
    ev->add_option("--out", ev_out, "optional JSON report path");

    // overlay
    auto* ov = app.add_subcommand("overlay", "render predictions on a corpus image");
    std::string ov_data, ov_pred, ov_out;
    int ov_index = 0;
    ov->add_option("--data", ov_data, "dataset directory")->required();
    ov->add_option("--pred", ov_pred, "prediction CSV")->required();
    ov->add_option("--index", ov_index, "image index")->required();
    ov->add_option("--out", ov_out, "output PNG")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        PipelineConfig cfg = resolve_config(gen_c);
        if (gen->count("--seed")) cfg.data.seed = gen_c.seed;
        echo_config(cfg, gen_out);
        const Dataset ds = generate_dataset(cfg.data);
        write_dataset(gen_out, ds);
        std::cout << "wrote " << ds.images.size() << " images to " << gen_out << "\n";
        return 0;
    }

    if (s1->parsed()) {
        PipelineConfig cfg = resolve_config(s1_c);
        echo_config(cfg, s1_out);
        const Dataset ds = load_dataset(s1_data);
        std::ofstream log((fs::path(s1_out) / "train_log.jsonl").string());
        StageOneArtifacts art = train_stage1(ds, cfg, s1_c.seed, &log);
        save_checkpoint((fs::path(s1_out) / "regnet.ckpt").string(), art.params);
        write_pseudo_labels((fs::path(s1_out) / "pseudo_labels.csv").string(),
                            art.pseudo_labels);
        const EvalReport rep = evaluate_landmarks(art.pseudo_labels, ds.truth);
        nlohmann::json j{{"mre", rep.mre}, {"median_re", rep.median_re}};
        std::ofstream((fs::path(s1_out) / "stage1_eval.json").string()) << j.dump(2) << "\n";
        std::cout << "stage1 pseudo-label mre " << rep.mre << " px\n";
        return 0;
    }

    if (ip->parsed()) {
        PipelineConfig cfg = resolve_config(ip_c);
        const Dataset ds = load_dataset(ip_data);
        Rng init(ip_c.seed);
        RegNet net(regnet_config_from(cfg, ds), init);
        load_checkpoint(ip_ckpt, net.params());
        const auto labels =
            infer_labels(net, ds, cfg.stage1.field_point_sign, resolve_threads(cfg.threads));
        write_pseudo_labels(ip_out, labels);
        std::cout << "wrote pseudo labels for " << labels.size() << " images to " << ip_out << "\n";
        return 0;
    }

    if (s2->parsed()) {
        PipelineConfig cfg = resolve_config(s2_c);
        echo_config(cfg, s2_out);
        const Dataset ds = load_dataset(s2_data);
        const auto pseudo = read_pseudo_labels(s2_pseudo);
        std::ofstream log((fs::path(s2_out) / "c2t_log.jsonl").string());
        StageTwoArtifacts art = train_c2t(ds, pseudo, cfg, s2_c.seed, &log);
        save_checkpoint((fs::path(s2_out) / "detector_f.ckpt").string(), art.params_f);
        save_checkpoint((fs::path(s2_out) / "detector_g.ckpt").string(), art.params_g);
        write_predictions((fs::path(s2_out) / "predictions.csv").string(), art.predictions);
        const EvalReport rep = evaluate_landmarks(art.predictions, ds.truth);
        std::cout << "stage2 prediction mre " << rep.mre << " px\n";
        return 0;
    }

    if (ev->parsed()) {
        const Dataset ds = load_dataset(ev_data);
        const auto pred = read_pseudo_labels(ev_pred);
        const EvalReport rep = evaluate_landmarks(pred, ds.truth);
        nlohmann::json j;
        j["mre"] = rep.mre;
        j["median_re"] = rep.median_re;
        for (std::size_t k = 0; k < rep.sdr.size(); ++k)
            j["sdr@" + std::to_string(rep.sdr_thresholds[k])] = rep.sdr[k];
        std::cout << j.dump(2) << "\n";
        if (!ev_out.empty()) std::ofstream(ev_out) << j.dump(2) << "\n";
        return 0;
    }

    if (ov->parsed()) {
        const Dataset ds = load_dataset(ov_data);
        const auto pred = read_pseudo_labels(ov_pred);
        if (ov_index < 0 || ov_index >= static_cast<int>(ds.images.size()))
            throw std::runtime_error("overlay: image index out of range");
        const Image& img = ds.images[static_cast<std::size_t>(ov_index)];
        std::vector<std::uint8_t> rgb(3 * img.size());
        for (std::size_t i = 0; i < img.size(); ++i) {
            const auto v = static_cast<std::uint8_t>(std::lround(img.values[i] * 255.0));
            rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = v;
        }
        for (const auto& p : ds.truth[static_cast<std::size_t>(ov_index)])
            draw_marker(rgb, img.height, img.width, p.x, p.y, 0, 200, 0);
        for (const auto& p : pred[static_cast<std::size_t>(ov_index)])
            draw_marker(rgb, img.height, img.width, p.x, p.y, 230, 30, 30);
        write_png_rgb(ov_out, img.height, img.width, rgb);
        std::cout << "wrote " << ov_out << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}
