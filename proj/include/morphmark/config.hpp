// config.hpp - pipeline configuration as a flat dotted-key map
// (data.* / stage1.* / stage2.*) with JSON file loading, key=value override
// parsing, and resolved-config echo.
#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphmark/synthbench.hpp"

namespace morphmark {

struct PipelineConfig {
    SynthConfig data;

    struct Stage1 {
        int epochs = 90;
        int batch = 8;
        double lr = 1e-4;
        double lr_final = 5e-5;
        double lambda2 = 0.25;
        double lambda3_start = 5.0;
        double phase_fraction = 1.0 / 3.0;  // lambda1 ramps 0 -> 1 over this fraction
        double ema_tau = 0.9;
        double sigma = 3.0;   // mask width for the edge-similarity term
        double temp = 0.1;    // T of the edge-relaxed smoothness weight
        bool use_esim = true;     // false: plain SSIM (ablation)
        bool use_esmooth = true;  // false: unweighted smoothness
        int field_point_sign = 1;
        double synth_fraction = 0.5;  // share of each batch built from synthetic warps
        double synth_strength = 0.35;
        int d_model = 64;
        int n_heads = 2;
        int n_layers = 2;
        int n_local = 2;
        int d_ff = 256;
        double dropout = 0.1;
        std::string head = "affine";
    } stage1;

    struct Stage2 {
        int epochs = 40;
        int batch = 4;  // images per optimizer step
        double lr = 1e-3;
        double eps_max = 0.8;        // final small-loss keep/drop rate
        double eps_ramp_frac = 0.3;  // ramp 0 -> eps_max over this epoch fraction
        double sigma = 3.0;
        double w_self = 1.0;  // weight of the self-consistency term in the filter loss
        int base_channels = 8;
        double aug_easy = 0.1;  // affine augmentation intensity, easy view
        double aug_hard = 0.4;  // hard view
    } stage2;

    int threads = 0;  // 0: MORPHMARK_THREADS env or 1

    // epoch after which the pseudo-label EMA update is active (paper schedule
    // 200/750, rescaled to the configured epoch count)
    int ema_start_epoch() const { return stage1.epochs * 200 / 750; }
};

namespace detail {

using ConfigSlot = std::variant<int*, double*, bool*, std::uint64_t*, std::string*>;

struct ConfigEntry {
    const char* key;
    ConfigSlot slot;
};

inline std::vector<ConfigEntry> config_entries(PipelineConfig& c) {
    return {
        {"data.seed", &c.data.seed},
        {"data.n_images", &c.data.n_images},
        {"data.height", &c.data.height},
        {"data.width", &c.data.width},
        {"data.n_landmarks", &c.data.n_landmarks},
        {"data.warp_strength", &c.data.warp_strength},
        {"data.noise_std", &c.data.noise_std},
        {"stage1.epochs", &c.stage1.epochs},
        {"stage1.batch", &c.stage1.batch},
        {"stage1.lr", &c.stage1.lr},
        {"stage1.lr_final", &c.stage1.lr_final},
        {"stage1.lambda2", &c.stage1.lambda2},
        {"stage1.lambda3_start", &c.stage1.lambda3_start},
        {"stage1.phase_fraction", &c.stage1.phase_fraction},
        {"stage1.ema_tau", &c.stage1.ema_tau},
        {"stage1.sigma", &c.stage1.sigma},
        {"stage1.temp", &c.stage1.temp},
        {"stage1.use_esim", &c.stage1.use_esim},
        {"stage1.use_esmooth", &c.stage1.use_esmooth},
        {"stage1.field_point_sign", &c.stage1.field_point_sign},
        {"stage1.synth_fraction", &c.stage1.synth_fraction},
        {"stage1.synth_strength", &c.stage1.synth_strength},
        {"stage1.d_model", &c.stage1.d_model},
        {"stage1.n_heads", &c.stage1.n_heads},
        {"stage1.n_layers", &c.stage1.n_layers},
        {"stage1.n_local", &c.stage1.n_local},
        {"stage1.d_ff", &c.stage1.d_ff},
        {"stage1.dropout", &c.stage1.dropout},
        {"stage1.head", &c.stage1.head},
        {"stage2.epochs", &c.stage2.epochs},
        {"stage2.batch", &c.stage2.batch},
        {"stage2.lr", &c.stage2.lr},
        {"stage2.eps_max", &c.stage2.eps_max},
        {"stage2.eps_ramp_frac", &c.stage2.eps_ramp_frac},
        {"stage2.sigma", &c.stage2.sigma},
        {"stage2.w_self", &c.stage2.w_self},
        {"stage2.base_channels", &c.stage2.base_channels},
        {"stage2.aug_easy", &c.stage2.aug_easy},
        {"stage2.aug_hard", &c.stage2.aug_hard},
        {"threads", &c.threads},
    };
}

inline void assign_config_value(const ConfigEntry& e, const nlohmann::json& v) {
    try {
        std::visit(
            [&](auto* p) {
                using T = std::remove_pointer_t<decltype(p)>;
                *p = v.get<T>();
            },
            e.slot);
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error(std::string("config: bad value type for key '") + e.key + "'");
    }
}

}  // namespace detail

inline nlohmann::json config_to_json(const PipelineConfig& cfg) {
    nlohmann::json out;
    auto entries = detail::config_entries(const_cast<PipelineConfig&>(cfg));
    for (const auto& e : entries)
        std::visit([&](auto* p) { out[e.key] = *p; }, e.slot);
    return out;
}

// applies a flat JSON object of dotted keys onto the defaults; unknown keys
// are rejected so typos do not silently vanish
inline void apply_config_json(PipelineConfig& cfg, const nlohmann::json& obj) {
    if (!obj.is_object()) throw std::runtime_error("config: expected a flat JSON object");
    auto entries = detail::config_entries(cfg);
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool found = false;
        for (const auto& e : entries) {
            if (it.key() == e.key) {
                detail::assign_config_value(e, it.value());
                found = true;
                break;
            }
        }
        if (!found) throw std::runtime_error("config: unknown key '" + it.key() + "'");
    }
}

inline void load_config_file(PipelineConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    nlohmann::json obj;
    try {
        in >> obj;
    } catch (const nlohmann::json::exception& ex) {
        throw std::runtime_error("config: parse failure in " + path + ": " + ex.what());
    }
    apply_config_json(cfg, obj);
}

// "key=value" overrides; the value is parsed as JSON, falling back to string
inline void apply_config_overrides(PipelineConfig& cfg, const std::vector<std::string>& kvs) {
    nlohmann::json obj = nlohmann::json::object();
    for (const auto& kv : kvs) {
        const auto pos = kv.find('=');
        if (pos == std::string::npos || pos == 0)
            throw std::runtime_error("config: override must be key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, pos);
        const std::string raw = kv.substr(pos + 1);
        nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
        if (v.is_discarded()) v = raw;
        obj[key] = v;
    }
    apply_config_json(cfg, obj);
}

inline void write_config_file(const PipelineConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config file: " + path);
    out << config_to_json(cfg).dump(2) << "\n";
}

}  // namespace morphmark
