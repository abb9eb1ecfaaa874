#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dronekey/keyhead.hpp"
#include "dronekey/losses.hpp"

namespace dronekey::gradcheck {

// Relative error against max(|a|, |b|, floor); the floor keeps near-zero
// entries from measuring finite-difference round-off instead of gradient
// correctness.
inline double rel_err(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct CheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst;  // where the max relative error occurred
};

/// Central finite differences (step 1e-5) of the loss against the analytic
/// gradient, over seeded random (gt, pred, t) configurations for every
/// family x decay combination.
inline CheckResult check_loss_gradients(int n_configs = 100, std::uint64_t seed = 2024) {
    using losses::DecayType;
    using losses::LossFamily;
    const double h = 1e-5;
    Rng rng = Rng(seed).fork(0x6c6f7373);
    CheckResult res;

    const LossFamily families[] = {LossFamily::kMse, LossFamily::kGaussian,
                                   LossFamily::kPoseAdaptive};
    const DecayType decays[] = {DecayType::kFixed, DecayType::kLinear, DecayType::kExp};

    for (int cfg_idx = 0; cfg_idx < n_configs; ++cfg_idx) {
        Keypoints2D gt, pred;
        for (int k = 0; k < kNumKeypoints; ++k) {
            gt[k] = {rng.uniform(4.0, 60.0), rng.uniform(4.0, 60.0)};
            pred[k] = gt[k] + 5.0 * rng.normal2();
        }
        const double t = std::floor(rng.uniform(0.0, 101.0));
        for (const auto family : families) {
            for (const auto decay : decays) {
                losses::LossConfig lc;
                lc.family = family;
                lc.decay = decay;
                const auto lv = losses::pose_adaptive_loss(gt, pred, t, lc);
                for (int i = 0; i < 2 * kNumKeypoints; ++i) {
                    Keypoints2D plus = pred, minus = pred;
                    plus[i / 2](i % 2) += h;
                    minus[i / 2](i % 2) -= h;
                    const double lp = losses::pose_adaptive_loss(gt, plus, t, lc).loss;
                    const double lm = losses::pose_adaptive_loss(gt, minus, t, lc).loss;
                    const double fd = (lp - lm) / (2.0 * h);
                    const double e = rel_err(lv.grad(i), fd);
                    res.max_abs_err = std::max(res.max_abs_err, std::abs(lv.grad(i) - fd));
                    if (e > res.max_rel_err) {
                        res.max_rel_err = e;
                        res.worst = std::string(losses::to_string(family)) + "/" +
                                    losses::to_string(decay) + " cfg " + std::to_string(cfg_idx) +
                                    " coord " + std::to_string(i);
                    }
                }
            }
        }
    }
    return res;
}

/// Random raster + model whose pre-ReLU head output stays clear of the kink,
/// so finite differences of the full forward are valid.
inline std::pair<keyhead::EncoderModel, synth::RasterImage> network_check_fixture(
    const keyhead::Hyperparams& hp, std::uint64_t seed) {
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        const std::uint64_t s = splitmix64(seed + attempt);
        keyhead::EncoderModel model = keyhead::init_model(hp, s);
        Rng rng = Rng(s).fork(0x696d67);
        synth::RasterImage img;
        const int grid = 2;  // P = grid^2 tokens
        img.width = grid * hp.patch;
        img.height = grid * hp.patch;
        img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
        for (auto& px : img.pixels) px = rng.uniform();
        const auto trace = keyhead::forward(img, model);
        if (trace.pre_relu.cwiseAbs().minCoeff() > 2e-2) return {std::move(model), std::move(img)};
    }
    throw NumericalError("could not build a gradcheck fixture away from the ReLU kink");
}

/// Central finite differences over every model parameter against the
/// analytic backward pass, with a fixed random linear functional of the
/// prediction as the loss.
inline CheckResult check_network_gradients(const keyhead::Hyperparams& hp = {16, 2, 2, 8},
                                           std::uint64_t seed = 7) {
    const double h = 1e-5;
    auto [model, img] = network_check_fixture(hp, seed);
    Rng rng = Rng(seed).fork(0x636f6566);
    Eigen::Matrix<double, keyhead::kOutCoords, 1> coeff;
    for (int i = 0; i < keyhead::kOutCoords; ++i) coeff(i) = rng.uniform(-1.0, 1.0);

    const auto trace = keyhead::forward(img, model);
    keyhead::EncoderModel grads = keyhead::backward(trace, model, coeff);

    auto objective = [&](keyhead::EncoderModel& m) {
        return coeff.dot(keyhead::forward(img, m).prediction);
    };

    CheckResult res;
    auto views = keyhead::param_views(model);
    auto gviews = keyhead::param_views(grads);
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
        for (std::ptrdiff_t i = 0; i < views[vi].size; ++i) {
            const double saved = views[vi].data[i];
            views[vi].data[i] = saved + h;
            const double lp = objective(model);
            views[vi].data[i] = saved - h;
            const double lm = objective(model);
            views[vi].data[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double a = gviews[vi].data[i];
            const double e = rel_err(a, fd);
            res.max_abs_err = std::max(res.max_abs_err, std::abs(a - fd));
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst = views[vi].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace dronekey::gradcheck
