// losses.hpp - stage-I registration losses (L1, SSIM, edge-masked similarity,
// smoothness, edge-relaxed smoothness, invertibility, synthetic supervision)
// and stage-II heatmap/consistency losses, all differentiable.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "morphmark/ad.hpp"
#include "morphmark/ad_image.hpp"
#include "morphmark/grid.hpp"
#include "morphmark/image.hpp"

namespace morphmark {

inline ad::Tensor tensor_from_image(const Image& img, bool requires_grad = false) {
    return ad::Tensor::leaf({img.height, img.width}, img.values, requires_grad);
}

inline Image image_from_tensor(const ad::Tensor& t) {
    if (t.shape().size() != 2) throw std::invalid_argument("image_from_tensor: expects H x W");
    Image img(t.shape()[0], t.shape()[1]);
    img.values = t.values();
    return img;
}

inline ad::Tensor tensor_from_heatmaps(const HeatmapStack& hs, bool requires_grad = false) {
    return ad::Tensor::leaf({hs.count, hs.height, hs.width}, hs.maps, requires_grad);
}

inline HeatmapStack heatmaps_from_tensor(const ad::Tensor& t, double sigma = 0.0) {
    if (t.shape().size() != 3) throw std::invalid_argument("heatmaps_from_tensor: expects N x H x W");
    HeatmapStack hs(t.shape()[0], t.shape()[1], t.shape()[2], sigma);
    hs.maps = t.values();
    return hs;
}

// ---------------------------------------------------------------------------
// similarity
// ---------------------------------------------------------------------------

// mean absolute difference (the global alignment term)
inline ad::Tensor l_global(const ad::Tensor& a, const ad::Tensor& b) {
    ad::detail::check_same_shape(a, b, "l_global");
    return ad::mean(ad::abs_t(ad::sub(a, b)));
}

// per-pixel single-scale SSIM with a uniform window; constants assume inputs
// in [0,1]
inline ad::Tensor ssim_map(const ad::Tensor& a, const ad::Tensor& b, int window = 7) {
    ad::detail::check_same_shape(a, b, "ssim_map");
    if (window % 2 == 0 || window < 3) throw std::invalid_argument("ssim_map: window must be odd >= 3");
    const int r = window / 2;
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    ad::Tensor mu_a = ad::box_filter(a, r);
    ad::Tensor mu_b = ad::box_filter(b, r);
    ad::Tensor e_aa = ad::box_filter(ad::mul(a, a), r);
    ad::Tensor e_bb = ad::box_filter(ad::mul(b, b), r);
    ad::Tensor e_ab = ad::box_filter(ad::mul(a, b), r);
    ad::Tensor mu_aa = ad::mul(mu_a, mu_a);
    ad::Tensor mu_bb = ad::mul(mu_b, mu_b);
    ad::Tensor var_a = ad::sub(e_aa, mu_aa);
    ad::Tensor var_b = ad::sub(e_bb, mu_bb);
    ad::Tensor cov = ad::sub(e_ab, ad::mul(mu_a, mu_b));
    ad::Tensor num = ad::mul(ad::add_const(ad::scale(ad::mul(mu_a, mu_b), 2.0), c1),
                             ad::add_const(ad::scale(cov, 2.0), c2));
    ad::Tensor den = ad::mul(ad::add_const(ad::add(mu_aa, mu_bb), c1),
                             ad::add_const(ad::add(var_a, var_b), c2));
    return ad::div(num, den);
}

inline ad::Tensor ssim_loss(const ad::Tensor& a, const ad::Tensor& b, int window = 7) {
    return ad::add_const(ad::neg(ad::mean(ssim_map(a, b, window))), 1.0);
}

// edge magnitude of an H x W image, rescaled to [0,1] (bound sqrt(1/2) for
// /8-normalized Sobel on a [0,1] image)
inline ad::Tensor edge_magnitude_t(const ad::Tensor& img) {
    ad::Tensor em = ad::sobel(img);
    ad::Tensor gx = ad::channel(em, 0);
    ad::Tensor gy = ad::channel(em, 1);
    ad::Tensor mag2 = ad::add(ad::square(gx), ad::square(gy));
    return ad::scale(ad::sqrt_eps(mag2), 1.0 / 0.70710678118654752440);
}

// SSIM similarity of images plus mask-weighted SSIM of their edge maps.
// mask == nullptr falls back to uniform weighting (used before pseudo-label
// estimates exist).
inline ad::Tensor l_esim(const ad::Tensor& warped, const ad::Tensor& target,
                         const Image* mask, int window = 7) {
    ad::detail::check_same_shape(warped, target, "l_esim");
    ad::Tensor image_term = ssim_loss(warped, target, window);
    ad::Tensor edge_map = ssim_map(edge_magnitude_t(warped), edge_magnitude_t(target), window);
    ad::Tensor edge_term;
    if (mask == nullptr) {
        edge_term = ad::add_const(ad::neg(ad::mean(edge_map)), 1.0);
    } else {
        double mask_sum = 0.0;
        for (double v : mask->values) mask_sum += v;
        if (mask_sum < 1e-8)
            throw std::runtime_error("l_esim: degenerate mask (all landmarks far outside the frame)");
        ad::Tensor mask_leaf = tensor_from_image(*mask);
        ad::Tensor weighted = ad::scale(ad::sum(ad::mul(edge_map, mask_leaf)), 1.0 / mask_sum);
        edge_term = ad::add_const(ad::neg(weighted), 1.0);
    }
    return ad::add(image_term, edge_term);
}

// the mask is the averaged Gaussian heatmap of the current landmark estimates
inline ad::Tensor l_esim(const ad::Tensor& warped, const ad::Tensor& target,
                         const LandmarkSet& points, double sigma, int window = 7) {
    const Image mask = heatmap_mask(points, warped.shape()[0], warped.shape()[1], sigma);
    return l_esim(warped, target, &mask, window);
}

// uniform-mask variant (the "L_esim -> L_sim" ablation)
inline ad::Tensor l_sim_plain(const ad::Tensor& warped, const ad::Tensor& target, int window = 7) {
    return ssim_loss(warped, target, window);
}

// ---------------------------------------------------------------------------
// field regularization
// ---------------------------------------------------------------------------

// mean over pixels and both components of squared forward differences
inline ad::Tensor l_smooth(const ad::Tensor& fx, const ad::Tensor& fy) {
    ad::detail::check_same_shape(fx, fy, "l_smooth");
    ad::Tensor terms = ad::add(ad::add(ad::square(ad::diff_x(fx)), ad::square(ad::diff_y(fx))),
                               ad::add(ad::square(ad::diff_x(fy)), ad::square(ad::diff_y(fy))));
    return ad::scale(ad::mean(terms), 0.25);
}

// smoothness energy down-weighted where the warped image has strong edges:
// weight = exp(-||edge||^2 / T), with ||edge||^2 = gx^2 + gy^2 (unrescaled)
inline ad::Tensor l_esmooth(const ad::Tensor& fx, const ad::Tensor& fy,
                            const ad::Tensor& warped, double T) {
    if (T <= 0.0) throw std::invalid_argument("l_esmooth: T must be > 0");
    ad::detail::check_same_shape(fx, fy, "l_esmooth");
    ad::Tensor energy =
        ad::scale(ad::add(ad::add(ad::square(ad::diff_x(fx)), ad::square(ad::diff_y(fx))),
                          ad::add(ad::square(ad::diff_x(fy)), ad::square(ad::diff_y(fy)))),
                  0.25);
    ad::Tensor em = ad::sobel(warped);
    ad::Tensor mag2 = ad::add(ad::square(ad::channel(em, 0)), ad::square(ad::channel(em, 1)));
    ad::Tensor weight = ad::exp_t(ad::scale(mag2, -1.0 / T));
    return ad::mean(ad::mul(energy, weight));
}

// squared hinge on negative Jacobian determinants of (x,y) -> (x+dx, y+dy);
// penalizes folding only
inline ad::Tensor l_inv(const ad::Tensor& fx, const ad::Tensor& fy) {
    ad::detail::check_same_shape(fx, fy, "l_inv");
    ad::Tensor jxx = ad::add_const(ad::diff_x(fx), 1.0);
    ad::Tensor jxy = ad::diff_y(fx);
    ad::Tensor jyx = ad::diff_x(fy);
    ad::Tensor jyy = ad::add_const(ad::diff_y(fy), 1.0);
    ad::Tensor det = ad::sub(ad::mul(jxx, jyy), ad::mul(jxy, jyx));
    return ad::mean(ad::square(ad::relu(ad::neg(det))));
}

// mean squared endpoint error against a known displacement field
inline ad::Tensor l_syn(const ad::Tensor& fx, const ad::Tensor& fy,
                        const ad::Tensor& tx, const ad::Tensor& ty) {
    ad::detail::check_same_shape(fx, tx, "l_syn");
    ad::detail::check_same_shape(fy, ty, "l_syn");
    return ad::add(ad::mean(ad::square(ad::sub(fx, tx))),
                   ad::mean(ad::square(ad::sub(fy, ty))));
}

// ---------------------------------------------------------------------------
// stage-I total
// ---------------------------------------------------------------------------

struct StageOneLossReport {
    double global_sim = 0.0;
    std::vector<double> local_sim;   // per local step
    std::vector<double> smooth;      // per local step (edge-relaxed unless toggled)
    std::vector<double> inv;         // per local step
    double syn = 0.0;                // 0 for non-synthetic pairs
    double total = 0.0;
    double lambda1 = 0.0, lambda2 = 0.0, lambda3 = 0.0;
};

struct StageOneLossParts {
    ad::Tensor global_sim;
    std::vector<ad::Tensor> local_sim;
    std::vector<ad::Tensor> smooth;
    std::vector<ad::Tensor> inv;
    ad::Tensor syn;  // cumulative-field supervision; undefined for non-synthetic pairs
};

// total = L_global + lambda1 * sum_i [ L_local(i) + L_smooth(i)
//         + lambda2 * L_inv(i) + lambda3 * L_syn(i) ]
inline std::pair<ad::Tensor, StageOneLossReport> stage1_total(const StageOneLossParts& parts,
                                                              double lambda1, double lambda2,
                                                              double lambda3) {
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0)
        throw std::invalid_argument("stage1_total: negative weights");
    const std::size_t n = parts.local_sim.size();
    if (n < 1 || parts.smooth.size() != n || parts.inv.size() != n)
        throw std::invalid_argument("stage1_total: per-step loss lists must share length >= 1");

    StageOneLossReport rep;
    rep.lambda1 = lambda1;
    rep.lambda2 = lambda2;
    rep.lambda3 = lambda3;
    rep.global_sim = parts.global_sim.item();

    ad::Tensor total = parts.global_sim;
    for (std::size_t i = 0; i < n; ++i) {
        rep.local_sim.push_back(parts.local_sim[i].item());
        rep.smooth.push_back(parts.smooth[i].item());
        rep.inv.push_back(parts.inv[i].item());
        ad::Tensor step = ad::add(parts.local_sim[i],
                                  ad::add(parts.smooth[i], ad::scale(parts.inv[i], lambda2)));
        total = ad::add(total, ad::scale(step, lambda1));
    }
    // synthetic supervision acts on the cumulative field, entering the sum
    // once (equivalent to placing it in the final step's regularizer)
    if (parts.syn.defined()) {
        rep.syn = parts.syn.item();
        total = ad::add(total, ad::scale(parts.syn, lambda1 * lambda3));
    }
    rep.total = total.item();
    return {total, rep};
}

// ---------------------------------------------------------------------------
// stage-II losses
// ---------------------------------------------------------------------------

// mean squared error over all N x H x W entries
inline ad::Tensor l_heat(const ad::Tensor& pred, const ad::Tensor& target) {
    ad::detail::check_same_shape(pred, target, "l_heat");
    return ad::mean(ad::square(ad::sub(pred, target)));
}

// Easy/hard augmentation pair. Matrices are backward sampling maps on
// normalized coordinates, as used by warp_affine.
struct AugmentationPair {
    AffineTransform easy;          // T_e
    AffineTransform hard;          // T_h
    AffineTransform easy_to_hard;  // sampling map carrying easy-frame maps into the hard frame
    std::vector<int> channel_perm; // landmark permutation under flips; empty = identity

    static AugmentationPair from_transforms(const AffineTransform& e, const AffineTransform& h,
                                            std::vector<int> perm = {}) {
        if (std::fabs(e.det2x2()) < 1e-8)
            throw std::runtime_error("AugmentationPair: easy transform not invertible");
        AugmentationPair p;
        p.easy = e;
        p.hard = h;
        p.easy_to_hard = e.inverse().compose(h);
        p.channel_perm = std::move(perm);
        return p;
    }

    static AugmentationPair identity() {
        return from_transforms(AffineTransform::identity(), AffineTransform::identity());
    }
};

// consistency between a hard-view prediction and an easy-view prediction
// transported into the hard frame; the easy branch must be detached by the
// caller when it serves as a fixed target
inline ad::Tensor heatmap_consistency(const ad::Tensor& pred_hard, const ad::Tensor& pred_easy,
                                      const AugmentationPair& aug) {
    ad::detail::check_same_shape(pred_hard, pred_easy, "heatmap_consistency");
    ad::Tensor target = ad::warp_affine_const(pred_easy, aug.easy_to_hard);
    if (!aug.channel_perm.empty()) target = ad::permute_channels(target, aug.channel_perm);
    return ad::mean(ad::square(ad::sub(pred_hard, target)));
}

// Eq.-style wrappers over a generic model callable Image -> Tensor {N,H,W}.
// l_con_self: same model on both views; l_con_cross: gradient flows only into
// model_f, model_g's easy view is a fixed target.
template <typename ModelF>
ad::Tensor l_con_self(ModelF&& model, const Image& image, const AugmentationPair& aug) {
    const Image easy_img = warp_affine(image, aug.easy);
    const Image hard_img = warp_affine(image, aug.hard);
    ad::Tensor pred_easy = model(easy_img);
    ad::Tensor pred_hard = model(hard_img);
    return heatmap_consistency(pred_hard, pred_easy.detach(), aug);
}

template <typename ModelF, typename ModelG>
ad::Tensor l_con_cross(ModelF&& model_f, ModelG&& model_g, const Image& image,
                       const AugmentationPair& aug) {
    const Image easy_img = warp_affine(image, aug.easy);
    const Image hard_img = warp_affine(image, aug.hard);
    ad::Tensor target = model_g(easy_img);
    ad::Tensor pred_hard = model_f(hard_img);
    return heatmap_consistency(pred_hard, target.detach(), aug);
}

}  // namespace morphmark
