// stage1.hpp - unsupervised registration training: schedules, batch
// assembly (synthetic perspective pairs + in-corpus pairs), the loss
// assembly around RegNet::forward_cascade, per-epoch pseudo-label EMA, and
// exemplar-to-corpus label propagation.
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphmark/config.hpp"
#include "morphmark/losses.hpp"
#include "morphmark/parallel.hpp"
#include "morphmark/regnet.hpp"
#include "morphmark/synthbench.hpp"

namespace morphmark {

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

namespace detail {
// normalized epoch position in [0,1]
inline double epoch_t(int epoch, int epochs) {
    return epochs > 1 ? static_cast<double>(epoch) / (epochs - 1) : 1.0;
}
}  // namespace detail

// cosine decay lr -> lr_final over the run
inline double schedule_lr(const PipelineConfig::Stage1& s, int epoch) {
    const double t = detail::epoch_t(epoch, s.epochs);
    return s.lr_final + 0.5 * (s.lr - s.lr_final) * (1.0 + std::cos(3.14159265358979324 * t));
}

// linear 0 -> 1 over the first phase_fraction of the run, then flat
inline double schedule_lambda1(const PipelineConfig::Stage1& s, int epoch) {
    const int ramp = std::max(1, static_cast<int>(s.phase_fraction * s.epochs));
    return epoch >= ramp ? 1.0 : static_cast<double>(epoch + 1) / ramp;
}

// cosine lambda3_start -> 0 over the run
inline double schedule_lambda3(const PipelineConfig::Stage1& s, int epoch) {
    const double t = detail::epoch_t(epoch, s.epochs);
    return 0.5 * s.lambda3_start * (1.0 + std::cos(3.14159265358979324 * t));
}

// ---------------------------------------------------------------------------
// pseudo-label EMA
// ---------------------------------------------------------------------------

inline void ema_update(LandmarkSet& acc, const LandmarkSet& estimate, double tau) {
    if (acc.size() != estimate.size())
        throw std::invalid_argument("ema_update: landmark count mismatch");
    for (std::size_t i = 0; i < acc.size(); ++i) {
        acc[i].x = tau * acc[i].x + (1.0 - tau) * estimate[i].x;
        acc[i].y = tau * acc[i].y + (1.0 - tau) * estimate[i].y;
    }
}

// ---------------------------------------------------------------------------
// batch assembly
// ---------------------------------------------------------------------------

struct PairSample {
    Image moving, fixed;
    int fixed_index = -1;  // index into the dataset (mask lookup); -1 if none
    bool synthetic = false;
    DeformationField truth;  // synthetic pairs only
    std::uint64_t drop_seed = 0;
};

inline DeformationField field_from_map(const PerspectiveMap& map, int height, int width) {
    DeformationField f(height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double u, v;
            map.apply(x, y, u, v);
            const std::size_t i = static_cast<std::size_t>(y) * width + x;
            f.dx[i] = u - x;
            f.dy[i] = v - y;
        }
    return f;
}

// Half of the batch (synth_fraction) is built by warping a corpus image with
// a known perspective map, which yields an exact reference field for the
// cascade: moving(x) = fixed(map(x)) means the registering field must be
// map^-1(x) - x.
inline std::vector<PairSample> make_batch(const Dataset& ds, const PipelineConfig::Stage1& s,
                                          Rng& rng) {
    const int n = static_cast<int>(ds.images.size());
    const int n_synth = static_cast<int>(std::lround(s.batch * s.synth_fraction));
    std::vector<PairSample> batch;
    for (int b = 0; b < s.batch; ++b) {
        PairSample p;
        p.drop_seed = rng.next_u64();
        if (b < n_synth) {
            const int i = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
            const PerspectiveWarp w =
                random_perspective(rng.next_u64(), s.synth_strength, ds.height, ds.width);
            p.moving = warp_perspective(ds.images[static_cast<std::size_t>(i)], w.map);
            p.fixed = ds.images[static_cast<std::size_t>(i)];
            p.fixed_index = i;
            p.synthetic = true;
            p.truth = field_from_map(w.map.inverse(), ds.height, ds.width);
        } else {
            const int i = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
            int j = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n - 1)));
            if (j >= i) ++j;
            p.moving = ds.images[static_cast<std::size_t>(i)];
            p.fixed = ds.images[static_cast<std::size_t>(j)];
            p.fixed_index = j;
        }
        batch.push_back(std::move(p));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// per-pair loss
// ---------------------------------------------------------------------------

struct PairLossOutput {
    StageOneLossReport report;
};

// builds the full stage-I graph for one pair and runs backward; gradients
// stay on the bindings until the caller merges them
inline PairLossOutput stage1_pair_loss(RegNet& net, const PairSample& pair,
                                       const Image* esim_mask, const PipelineConfig::Stage1& s,
                                       double lambda1, double lambda3, double inv_batch,
                                       Bindings& bnd) {
    Rng drop_rng(pair.drop_seed);
    ad::Tensor moving = tensor_from_image(pair.moving);
    ad::Tensor fixed = tensor_from_image(pair.fixed);
    RegNet::Forward fwd = net.forward_cascade(moving, fixed, bnd, drop_rng, /*train=*/true,
                                              /*skip_global=*/pair.synthetic);

    StageOneLossParts parts;
    parts.global_sim = l_global(fwd.warped_global, fixed);
    for (std::size_t i = 0; i < fwd.warped.size(); ++i) {
        parts.local_sim.push_back(s.use_esim ? l_esim(fwd.warped[i], fixed, esim_mask)
                                             : l_sim_plain(fwd.warped[i], fixed));
        parts.smooth.push_back(s.use_esmooth
                                   ? l_esmooth(fwd.fx[i], fwd.fy[i], fwd.warped[i], s.temp)
                                   : l_smooth(fwd.fx[i], fwd.fy[i]));
        parts.inv.push_back(l_inv(fwd.fx[i], fwd.fy[i]));
    }
    if (pair.synthetic) {
        ad::Tensor fx_sum = fwd.fx[0], fy_sum = fwd.fy[0];
        for (std::size_t i = 1; i < fwd.fx.size(); ++i) {
            fx_sum = ad::add(fx_sum, fwd.fx[i]);
            fy_sum = ad::add(fy_sum, fwd.fy[i]);
        }
        ad::Tensor tx = ad::Tensor::leaf({pair.truth.height, pair.truth.width}, pair.truth.dx);
        ad::Tensor ty = ad::Tensor::leaf({pair.truth.height, pair.truth.width}, pair.truth.dy);
        parts.syn = l_syn(fx_sum, fy_sum, tx, ty);
    }

    auto [total, report] = stage1_total(parts, lambda1, s.lambda2, lambda3);
    if (!std::isfinite(report.total)) {
        std::ostringstream msg;
        msg << "stage1: non-finite loss (global=" << report.global_sim;
        for (std::size_t i = 0; i < report.local_sim.size(); ++i)
            msg << ", local" << i << "=" << report.local_sim[i] << ", smooth" << i << "="
                << report.smooth[i] << ", inv" << i << "=" << report.inv[i];
        msg << ", syn=" << report.syn << ")";
        throw std::runtime_error(msg.str());
    }
    ad::backward(ad::scale(total, inv_batch));
    return {report};
}

// ---------------------------------------------------------------------------
// label propagation (exemplar -> image)
// ---------------------------------------------------------------------------

inline LandmarkSet propagate_labels(RegNet& net, const Image& exemplar,
                                    const LandmarkSet& exemplar_lm, const Image& target,
                                    int field_point_sign) {
    Bindings bnd;
    Rng dummy(0);
    ad::Tensor moving = tensor_from_image(exemplar);
    ad::Tensor fixed = tensor_from_image(target);
    RegNet::Forward fwd = net.forward_cascade(moving, fixed, bnd, dummy, /*train=*/false);
    const RegNet::CascadeResult r = RegNet::extract_result(fwd);
    return transport_landmarks(exemplar_lm, r, target.height, target.width, field_point_sign);
}

inline std::vector<LandmarkSet> infer_labels(RegNet& net, const Dataset& ds,
                                             int field_point_sign, int threads) {
    const auto& ex_img = ds.images[static_cast<std::size_t>(ds.exemplar_index)];
    const auto& ex_lm = ds.truth[static_cast<std::size_t>(ds.exemplar_index)];
    std::vector<LandmarkSet> out(ds.images.size());
    parallel_for(static_cast<int>(ds.images.size()), threads, [&](int i) {
        if (i == ds.exemplar_index) {
            out[static_cast<std::size_t>(i)] = ex_lm;
        } else {
            out[static_cast<std::size_t>(i)] = propagate_labels(
                net, ex_img, ex_lm, ds.images[static_cast<std::size_t>(i)], field_point_sign);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// pseudo-label CSV (one file for the corpus): header "image,index,x,y"
// ---------------------------------------------------------------------------

inline void write_pseudo_labels(const std::string& path, const std::vector<LandmarkSet>& labels) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open pseudo-label CSV for writing: " + path);
    out << "image,index,x,y\n";
    char buf[128];
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = 0; j < labels[i].size(); ++j) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g,%.9g\n", i, j, labels[i][j].x,
                          labels[i][j].y);
            out << buf;
        }
}

inline std::vector<LandmarkSet> read_pseudo_labels(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open pseudo-label CSV for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty pseudo-label CSV: " + path);
    std::vector<LandmarkSet> labels;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string img, idx, xs, ys;
        if (!std::getline(ss, img, ',') || !std::getline(ss, idx, ',') ||
            !std::getline(ss, xs, ',') || !std::getline(ss, ys, ','))
            throw std::runtime_error("malformed pseudo-label CSV row in " + path + ": " + line);
        const std::size_t i = static_cast<std::size_t>(std::stoul(img));
        if (labels.size() <= i) labels.resize(i + 1);
        labels[i].points.push_back({std::stod(xs), std::stod(ys)});
    }
    if (labels.empty()) throw std::runtime_error("pseudo-label CSV has no rows: " + path);
    return labels;
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

struct StageOneArtifacts {
    RegnetConfig net_cfg;
    ParamStore params;                      // trained weights
    std::vector<LandmarkSet> pseudo_labels; // final EMA estimates
    double final_epoch_loss = 0.0;
};

inline RegnetConfig regnet_config_from(const PipelineConfig& cfg, const Dataset& ds) {
    RegnetConfig rc;
    rc.height = ds.height;
    rc.width = ds.width;
    rc.d_model = cfg.stage1.d_model;
    rc.n_heads = cfg.stage1.n_heads;
    rc.n_layers = cfg.stage1.n_layers;
    rc.n_local = cfg.stage1.n_local;
    rc.d_ff = cfg.stage1.d_ff;
    rc.dropout = cfg.stage1.dropout;
    rc.head = cfg.stage1.head;
    return rc;
}

// log receives one JSON object per epoch (JSON-lines); pass nullptr to
// disable logging
inline StageOneArtifacts train_stage1(const Dataset& ds, const PipelineConfig& cfg,
                                      std::uint64_t seed, std::ostream* log = nullptr) {
    const auto& s = cfg.stage1;
    if (s.epochs < 1 || s.batch < 1)
        throw std::invalid_argument("train_stage1: epochs and batch must be >= 1");
    const int threads = resolve_threads(cfg.threads);
    const int ema_start = cfg.ema_start_epoch();

    Rng init_rng(seed);
    RegNet net(regnet_config_from(cfg, ds), init_rng);
    Adam opt;
    Rng data_rng = init_rng.fork(0x5147);

    const int steps_per_epoch =
        std::max(1, (static_cast<int>(ds.images.size()) + s.batch - 1) / s.batch);

    std::vector<LandmarkSet> ema_labels;  // empty until epoch ema_start
    double epoch_loss = 0.0;

    for (int epoch = 0; epoch < s.epochs; ++epoch) {
        const double lr = schedule_lr(s, epoch);
        const double lambda1 = schedule_lambda1(s, epoch);
        const double lambda3 = schedule_lambda3(s, epoch);

        double loss_sum = 0.0, global_sum = 0.0, syn_sum = 0.0;
        int pair_count = 0, syn_count = 0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            const std::vector<PairSample> batch = make_batch(ds, s, data_rng);
            // masks are fixed-frame and read-only during the parallel section
            std::vector<std::unique_ptr<Image>> masks(batch.size());
            if (!ema_labels.empty() && s.use_esim) {
                for (std::size_t b = 0; b < batch.size(); ++b)
                    masks[b] = std::make_unique<Image>(
                        heatmap_mask(ema_labels[static_cast<std::size_t>(batch[b].fixed_index)],
                                     ds.height, ds.width, s.sigma));
            }

            net.params().zero_grad();
            std::vector<Bindings> bindings(batch.size());
            std::vector<StageOneLossReport> reports(batch.size());
            const double inv_batch = 1.0 / static_cast<double>(batch.size());
            parallel_for(static_cast<int>(batch.size()), threads, [&](int b) {
                const auto ub = static_cast<std::size_t>(b);
                reports[ub] = stage1_pair_loss(net, batch[ub], masks[ub].get(), s, lambda1,
                                               lambda3, inv_batch, bindings[ub])
                                  .report;
            });
            for (auto& bnd : bindings) bnd.collect(net.params());
            opt.step(net.params(), lr);

            for (std::size_t b = 0; b < batch.size(); ++b) {
                loss_sum += reports[b].total;
                global_sum += reports[b].global_sim;
                ++pair_count;
                if (batch[b].synthetic) {
                    syn_sum += reports[b].syn;
                    ++syn_count;
                }
            }
        }
        epoch_loss = loss_sum / pair_count;

        if (epoch >= ema_start) {
            std::vector<LandmarkSet> est = infer_labels(net, ds, s.field_point_sign, threads);
            if (ema_labels.empty()) {
                ema_labels = std::move(est);
            } else {
                for (std::size_t i = 0; i < ema_labels.size(); ++i)
                    ema_update(ema_labels[i], est[i], s.ema_tau);
            }
        }

        if (log) {
            nlohmann::json line;
            line["epoch"] = epoch;
            line["lr"] = lr;
            line["lambda1"] = lambda1;
            line["lambda3"] = lambda3;
            line["loss"] = epoch_loss;
            line["global"] = global_sum / pair_count;
            line["syn"] = syn_count ? syn_sum / syn_count : 0.0;
            line["ema_active"] = !ema_labels.empty();
            (*log) << line.dump() << "\n";
        }
    }

    StageOneArtifacts art;
    art.net_cfg = net.config();
    art.params = net.params();
    art.pseudo_labels = ema_labels.empty()
                            ? infer_labels(net, ds, s.field_point_sign, threads)
                            : std::move(ema_labels);
    art.final_epoch_loss = epoch_loss;
    return art;
}

}  // namespace morphmark
