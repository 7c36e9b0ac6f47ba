// c2t.hpp - stage-II consistency co-teaching: two detectors trained on the
// stage-I pseudo labels, cross-wise small-loss sample selection with an
// epsilon drop-rate schedule, self-consistency inside each model, and
// cross-model consistency over the whole corpus.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "morphmark/config.hpp"
#include "morphmark/detector.hpp"
#include "morphmark/losses.hpp"
#include "morphmark/parallel.hpp"
#include "morphmark/stage1.hpp"
#include "morphmark/synthbench.hpp"

namespace morphmark {

// ---------------------------------------------------------------------------
// schedules and selection
// ---------------------------------------------------------------------------

// drop rate: 0 -> eps_max linearly over the first eps_ramp_frac of the run
inline double schedule_epsilon(const PipelineConfig::Stage2& s, int epoch) {
    const int ramp = std::max(1, static_cast<int>(s.eps_ramp_frac * s.epochs));
    return s.eps_max * std::min(1.0, static_cast<double>(epoch) / ramp);
}

// step decay: x0.1 at 60%, x0.01 at 80% of the run
inline double schedule_stage2_lr(const PipelineConfig::Stage2& s, int epoch) {
    const double frac = s.epochs > 0 ? static_cast<double>(epoch) / s.epochs : 0.0;
    if (frac >= 0.8) return s.lr * 0.01;
    if (frac >= 0.6) return s.lr * 0.1;
    return s.lr;
}

// indices of the floor((1-eps)*n) smallest losses (at least one); ties keep
// the lower index
inline std::vector<int> small_loss_select(const std::vector<double>& losses, double eps) {
    if (losses.empty()) throw std::invalid_argument("small_loss_select: empty loss list");
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("small_loss_select: eps must be in [0,1)");
    const int n = static_cast<int>(losses.size());
    const int keep = std::max(1, static_cast<int>(std::floor((1.0 - eps) * n + 1e-9)));
    std::vector<int> order(losses.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return losses[static_cast<std::size_t>(a)] <
                                                losses[static_cast<std::size_t>(b)]; });
    order.resize(static_cast<std::size_t>(keep));
    std::sort(order.begin(), order.end());
    return order;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

// small random affine of intensity `strength`; flips only when the corpus
// declares a landmark permutation for them
inline AffineTransform sample_view_transform(Rng& rng, double strength, bool flip) {
    AffineTransform A = AffineTransform::identity();
    if (strength > 0.0) {
        AffineParams p;
        p.intensities = {0.2 * strength, 0.2 * strength, 0.5 * strength, 0.1 * strength};
        p.o = {rng.uniform(-0.15 * strength, 0.15 * strength),
               rng.uniform(-0.15 * strength, 0.15 * strength),
               rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
               rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        A = affine_from_params(p);
    }
    if (flip) {
        AffineTransform mirror;
        mirror.m = {-1.0, 0.0, 0.0, 0.0, 1.0, 0.0};
        A = mirror.compose(A);
    }
    return A;
}

inline AugmentationPair sample_augmentation(Rng& rng, const PipelineConfig::Stage2& s,
                                            const std::vector<int>& flip_permutation) {
    const bool flip = !flip_permutation.empty() && rng.bernoulli(0.5);
    const AffineTransform easy = sample_view_transform(rng, s.aug_easy, false);
    const AffineTransform hard = sample_view_transform(rng, s.aug_hard, flip);
    return AugmentationPair::from_transforms(easy, hard,
                                             flip ? flip_permutation : std::vector<int>{});
}

// pseudo labels carried into a view; flips also permute landmark identity
inline LandmarkSet view_landmarks(const LandmarkSet& lm, const AugmentationPair& aug,
                                  const AffineTransform& view, int height, int width) {
    LandmarkSet moved = apply_affine_points(lm, view, height, width);
    if (aug.channel_perm.empty()) return moved;
    LandmarkSet out;
    out.points.resize(moved.size());
    for (std::size_t j = 0; j < moved.size(); ++j)
        out.points[j] = moved[static_cast<std::size_t>(aug.channel_perm[j])];
    return out;
}

// ---------------------------------------------------------------------------
// per-image per-model graph
// ---------------------------------------------------------------------------

struct C2tImageTerms {
    ad::Tensor heat;       // L_heat on the hard view
    ad::Tensor con_self;   // self-consistency, easy target detached
    ad::Tensor con_cross;  // consistency against the peer's easy prediction
    double filter_value = 0.0;  // L_heat + w * L_con_self (selection statistic)
    Bindings bindings;
};

// one c2t evaluation of `model` on one image: a hard-view graph with
// gradients plus a gradient-free easy-view prediction reused as the self
// target and exported as the peer's cross target
inline ad::Tensor c2t_easy_prediction(Detector& model, const Image& image,
                                      const AugmentationPair& aug) {
    Bindings frozen(false);  // leaves without grad; the graph carries no history
    const Image easy_img = warp_affine(image, aug.easy);
    // run with a non-recording bindings object: parameters are plain leaves
    return model.forward(tensor_from_image(easy_img), frozen).detach();
}

inline C2tImageTerms c2t_image_terms(Detector& model, const Image& image,
                                     const LandmarkSet& pseudo, const AugmentationPair& aug,
                                     const ad::Tensor& peer_easy, const ad::Tensor& own_easy,
                                     double sigma, double w_self) {
    const int H = image.height, W = image.width;
    C2tImageTerms t;
    const Image hard_img = warp_affine(image, aug.hard);
    ad::Tensor pred_hard = model.forward(tensor_from_image(hard_img), t.bindings);

    const LandmarkSet hard_lm = view_landmarks(pseudo, aug, aug.hard, H, W);
    const HeatmapStack target = gaussian_heatmap(hard_lm, H, W, sigma);
    t.heat = l_heat(pred_hard, tensor_from_heatmaps(target));
    t.con_self = heatmap_consistency(pred_hard, own_easy, aug);
    t.con_cross = heatmap_consistency(pred_hard, peer_easy, aug);
    t.filter_value = t.heat.item() + w_self * t.con_self.item();
    return t;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct StageTwoArtifacts {
    DetectorConfig det_cfg;
    ParamStore params_f, params_g;
    std::vector<LandmarkSet> predictions;
    // final-epoch selection flags per image (true: the sample was trained on)
    std::vector<bool> selected_f, selected_g;
    bool any_decode_degenerate = false;
};

// decode from the mean heatmap of both detectors
inline LandmarkSet c2t_predict(Detector& f, Detector& g, const Image& image, double sigma,
                               bool* degenerate = nullptr) {
    Bindings bf, bg;
    ad::Tensor hf = f.forward(tensor_from_image(image), bf);
    ad::Tensor hg = g.forward(tensor_from_image(image), bg);
    HeatmapStack hs = heatmaps_from_tensor(hf, sigma);
    const auto& vg = hg.values();
    for (std::size_t i = 0; i < hs.maps.size(); ++i) hs.maps[i] = 0.5 * (hs.maps[i] + vg[i]);
    const DecodeResult dec = decode_landmarks(hs);
    if (degenerate && dec.degenerate) *degenerate = true;
    return dec.landmarks;
}

inline StageTwoArtifacts train_c2t(const Dataset& ds, const std::vector<LandmarkSet>& pseudo,
                                   const PipelineConfig& cfg, std::uint64_t seed,
                                   std::ostream* log = nullptr) {
    const auto& s = cfg.stage2;
    if (pseudo.size() != ds.images.size())
        throw std::invalid_argument("train_c2t: pseudo label count does not match the corpus");
    if (s.epochs < 1 || s.batch < 1)
        throw std::invalid_argument("train_c2t: epochs and batch must be >= 1");
    const int threads = resolve_threads(cfg.threads);
    const int n = static_cast<int>(ds.images.size());

    DetectorConfig dc;
    dc.height = ds.height;
    dc.width = ds.width;
    dc.n_landmarks = ds.n_landmarks;
    dc.base_channels = s.base_channels;

    Rng root(seed);
    Rng init_f = root.fork(0xF00D);
    Rng init_g = root.fork(0xBEEF);
    Detector f(dc, init_f);
    Detector g(dc, init_g);
    Adam opt_f, opt_g;
    Rng data_rng = root.fork(0xDA7A);

    StageTwoArtifacts art;
    art.det_cfg = dc;
    art.selected_f.assign(static_cast<std::size_t>(n), true);
    art.selected_g.assign(static_cast<std::size_t>(n), true);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < s.epochs; ++epoch) {
        const double lr = schedule_stage2_lr(s, epoch);
        const double eps = schedule_epsilon(s, epoch);
        data_rng.shuffle(order);

        const bool final_epoch = (epoch == s.epochs - 1);
        if (final_epoch) {
            art.selected_f.assign(static_cast<std::size_t>(n), false);
            art.selected_g.assign(static_cast<std::size_t>(n), false);
        }

        double loss_sum_f = 0.0, loss_sum_g = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += s.batch) {
            const int bsz = std::min(s.batch, n - start);
            std::vector<int> idx(order.begin() + start, order.begin() + start + bsz);
            std::vector<AugmentationPair> augs;
            augs.reserve(static_cast<std::size_t>(bsz));
            for (int b = 0; b < bsz; ++b)
                augs.push_back(sample_augmentation(data_rng, s, ds.flip_permutation));

            std::vector<ad::Tensor> easy_f(static_cast<std::size_t>(bsz)),
                easy_g(static_cast<std::size_t>(bsz));
            std::vector<C2tImageTerms> terms_f(static_cast<std::size_t>(bsz)),
                terms_g(static_cast<std::size_t>(bsz));
            parallel_for(bsz, threads, [&](int b) {
                const auto ub = static_cast<std::size_t>(b);
                const Image& img = ds.images[static_cast<std::size_t>(idx[ub])];
                const LandmarkSet& lab = pseudo[static_cast<std::size_t>(idx[ub])];
                easy_f[ub] = c2t_easy_prediction(f, img, augs[ub]);
                easy_g[ub] = c2t_easy_prediction(g, img, augs[ub]);
                terms_f[ub] = c2t_image_terms(f, img, lab, augs[ub], easy_g[ub], easy_f[ub],
                                              s.sigma, s.w_self);
                terms_g[ub] = c2t_image_terms(g, img, lab, augs[ub], easy_f[ub], easy_g[ub],
                                              s.sigma, s.w_self);
            });

            // cross-wise small-loss selection: each model trains on the set
            // its peer judged clean
            std::vector<double> filt_f(static_cast<std::size_t>(bsz)),
                filt_g(static_cast<std::size_t>(bsz));
            for (int b = 0; b < bsz; ++b) {
                filt_f[static_cast<std::size_t>(b)] = terms_f[static_cast<std::size_t>(b)].filter_value;
                filt_g[static_cast<std::size_t>(b)] = terms_g[static_cast<std::size_t>(b)].filter_value;
            }
            const std::vector<int> sel_f = small_loss_select(filt_g, eps);
            const std::vector<int> sel_g = small_loss_select(filt_f, eps);
            if (final_epoch) {
                for (int b : sel_f) art.selected_f[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])] = true;
                for (int b : sel_g) art.selected_g[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])] = true;
            }

            auto model_loss = [&](std::vector<C2tImageTerms>& terms,
                                  const std::vector<int>& sel) {
                ad::Tensor fitted;
                for (int b : sel) {
                    auto& t = terms[static_cast<std::size_t>(b)];
                    ad::Tensor item = ad::add(t.heat, ad::scale(t.con_self, s.w_self));
                    fitted = fitted.defined() ? ad::add(fitted, item) : item;
                }
                ad::Tensor loss = ad::scale(fitted, 1.0 / static_cast<double>(sel.size()));
                ad::Tensor cross;
                for (int b = 0; b < bsz; ++b) {
                    auto& t = terms[static_cast<std::size_t>(b)];
                    cross = cross.defined() ? ad::add(cross, t.con_cross) : t.con_cross;
                }
                return ad::add(loss, ad::scale(cross, 1.0 / static_cast<double>(bsz)));
            };

            ad::Tensor loss_f = model_loss(terms_f, sel_f);
            ad::Tensor loss_g = model_loss(terms_g, sel_g);
            loss_sum_f += loss_f.item();
            loss_sum_g += loss_g.item();
            ++batches;

            f.params().zero_grad();
            ad::backward(loss_f);
            for (auto& t : terms_f) t.bindings.collect(f.params());
            opt_f.step(f.params(), lr);

            g.params().zero_grad();
            ad::backward(loss_g);
            for (auto& t : terms_g) t.bindings.collect(g.params());
            opt_g.step(g.params(), lr);
        }

        if (log) {
            nlohmann::json line;
            line["epoch"] = epoch;
            line["lr"] = lr;
            line["epsilon"] = eps;
            line["loss_f"] = loss_sum_f / batches;
            line["loss_g"] = loss_sum_g / batches;
            (*log) << line.dump() << "\n";
        }
    }

    art.predictions.resize(static_cast<std::size_t>(n));
    std::vector<char> degenerate(static_cast<std::size_t>(n), 0);
    parallel_for(n, threads, [&](int i) {
        bool deg = false;
        art.predictions[static_cast<std::size_t>(i)] =
            c2t_predict(f, g, ds.images[static_cast<std::size_t>(i)], s.sigma, &deg);
        degenerate[static_cast<std::size_t>(i)] = deg ? 1 : 0;
    });
    for (char d : degenerate) art.any_decode_degenerate |= (d != 0);
    art.params_f = f.params();
    art.params_g = g.params();
    return art;
}

// predictions.csv shares the pseudo-label layout: "image,index,x,y"
inline void write_predictions(const std::string& path, const std::vector<LandmarkSet>& preds) {
    write_pseudo_labels(path, preds);
}

}  // namespace morphmark
