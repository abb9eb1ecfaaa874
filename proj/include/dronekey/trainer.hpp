#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dronekey/keyhead.hpp"
#include "dronekey/losses.hpp"
#include "dronekey/synth.hpp"
#include "dronekey/types.hpp"

namespace dronekey::trainer {

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    int epochs = 100;
    int batch_size = 8;
    double learning_rate = 1e-3;
    AdamParams adam;
    losses::LossConfig loss;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;     // 0: only at the end
    std::string checkpoint_path;  // empty: no checkpoints written by train()
    std::string log_path;         // empty: no CSV written by train()

    void validate() const {
        if (epochs < 1) throw DataError("epochs must be >= 1");
        if (batch_size < 1) throw DataError("batch_size must be >= 1");
        if (!(learning_rate > 0.0) && learning_rate != 0.0)
            throw DataError("learning_rate must be >= 0");
        loss.validate();
    }
};

struct EpochLog {
    int epoch;
    double loss;
    double scale;
};

struct TrainResult {
    keyhead::EncoderModel model;
    std::vector<EpochLog> log;
};

namespace detail {

struct AdamState {
    keyhead::EncoderModel m, v;
    long step = 0;
};

inline void adam_step(keyhead::EncoderModel& model, keyhead::EncoderModel& grads, AdamState& st,
                      double lr, const AdamParams& ap) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(ap.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(ap.beta2, static_cast<double>(st.step));
    auto pm = keyhead::param_views(model);
    auto pg = keyhead::param_views(grads);
    auto p1 = keyhead::param_views(st.m);
    auto p2 = keyhead::param_views(st.v);
    for (std::size_t i = 0; i < pm.size(); ++i) {
        for (std::ptrdiff_t k = 0; k < pm[i].size; ++k) {
            const double g = pg[i].data[k];
            double& m = p1[i].data[k];
            double& v = p2[i].data[k];
            m = ap.beta1 * m + (1.0 - ap.beta1) * g;
            v = ap.beta2 * v + (1.0 - ap.beta2) * g * g;
            pm[i].data[k] -= lr * (m / bc1) / (std::sqrt(v / bc2) + ap.eps);
        }
    }
}

inline void accumulate(keyhead::EncoderModel& acc, const keyhead::EncoderModel& g, double w) {
    auto pa = keyhead::param_views(acc);
    auto pg = keyhead::param_views(const_cast<keyhead::EncoderModel&>(g));
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::ptrdiff_t k = 0; k < pa[i].size; ++k) pa[i].data[k] += w * pg[i].data[k];
}

}  // namespace detail

/// Deterministic training loop: per-epoch Fisher-Yates shuffle with a derived
/// seed, batched forward/backward with the epoch index driving the loss
/// scale schedule, Adam updates. Frames are supervised by their observed
/// keypoints; inputs are rendered from the clean ground-truth keypoints.
inline TrainResult train(const SequenceDataset& dataset, keyhead::EncoderModel model,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (dataset.records.empty()) throw DataError("training dataset is empty");

    const int n = static_cast<int>(dataset.records.size());
    const int patch = model.hp.patch;

    // rasters depend only on the dataset and patch size; render once
    std::vector<Eigen::MatrixXd> patches(static_cast<std::size_t>(n));
    std::vector<int> grid_h(static_cast<std::size_t>(n)), grid_w(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& rec = dataset.records[static_cast<std::size_t>(i)];
        const auto img = synth::render_frame(rec.kp2d_gt, rec.intrinsics, patch);
        patches[static_cast<std::size_t>(i)] = keyhead::extract_patches(img, patch);
        grid_h[static_cast<std::size_t>(i)] = img.height / patch;
        grid_w[static_cast<std::size_t>(i)] = img.width / patch;
    }

    detail::AdamState adam{model.zeros_like(), model.zeros_like(), 0};
    TrainResult result;
    result.log.reserve(static_cast<std::size_t>(cfg.epochs));

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = Rng(cfg.seed).fork(0x65706f63).fork(static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i) {
            const auto j = static_cast<int>(shuffle_rng.next_u64() % static_cast<std::uint64_t>(i + 1));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }

        const double t = static_cast<double>(epoch);  // 0-based epoch feeds S(t)
        double epoch_loss = 0.0;

        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, n - start);
            keyhead::EncoderModel grads = model.zeros_like();
            for (int b = 0; b < bsz; ++b) {
                const int idx = order[static_cast<std::size_t>(start + b)];
                const auto& rec = dataset.records[static_cast<std::size_t>(idx)];
                const auto trace = keyhead::forward_patches(patches[static_cast<std::size_t>(idx)],
                                                            model, grid_h[static_cast<std::size_t>(idx)],
                                                            grid_w[static_cast<std::size_t>(idx)]);
                const auto lv = losses::pose_adaptive_loss(
                    rec.kp2d_obs, trace.predicted_keypoints(), t, cfg.loss);
                if (!std::isfinite(lv.loss))
                    throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(start / cfg.batch_size));
                epoch_loss += lv.loss;
                const auto g = keyhead::backward(trace, model, lv.grad / static_cast<double>(bsz));
                detail::accumulate(grads, g, 1.0);
            }
            detail::adam_step(model, grads, adam, cfg.learning_rate, cfg.adam);
        }

        result.log.push_back({epoch, epoch_loss / n, losses::scale_schedule(t, cfg.loss)});

        if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
            (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
            keyhead::save_checkpoint(model, cfg.checkpoint_path);
        }
    }

    if (!cfg.checkpoint_path.empty()) keyhead::save_checkpoint(model, cfg.checkpoint_path);
    if (!cfg.log_path.empty()) {
        std::ofstream out(cfg.log_path, std::ios::binary);
        if (!out) throw DataError("cannot open for writing: " + cfg.log_path);
        out << "epoch,loss,scale\n";
        char buf[96];
        for (const auto& row : result.log) {
            std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.epoch, row.loss, row.scale);
            out << buf;
        }
    }

    result.model = std::move(model);
    return result;
}

/// Renders each record from its stored ground-truth keypoints, runs the
/// forward pass, and returns the predictions in dataset order.
inline std::vector<Keypoints2D> predict(const SequenceDataset& dataset,
                                        const keyhead::EncoderModel& model) {
    std::vector<Keypoints2D> out;
    out.reserve(dataset.records.size());
    for (const auto& rec : dataset.records) {
        if (rec.intrinsics.width % static_cast<std::uint32_t>(model.hp.patch) != 0 ||
            rec.intrinsics.height % static_cast<std::uint32_t>(model.hp.patch) != 0)
            throw DataError("dimension mismatch between checkpoint and dataset image size");
        const auto img = synth::render_frame(rec.kp2d_gt, rec.intrinsics, model.hp.patch);
        out.push_back(keyhead::forward(img, model).predicted_keypoints());
    }
    return out;
}

inline losses::LossConfig loss_config_from_json(const nlohmann::ordered_json& j) {
    losses::LossConfig lc;
    if (j.contains("family")) lc.family = losses::loss_family_from_string(j.at("family").get<std::string>());
    if (j.contains("decay")) lc.decay = losses::decay_from_string(j.at("decay").get<std::string>());
    if (j.contains("alpha")) lc.alpha = j.at("alpha").get<double>();
    if (j.contains("D")) lc.scale_factor = j.at("D").get<double>();
    if (j.contains("epsilon")) lc.epsilon = j.at("epsilon").get<double>();
    if (j.contains("fixed_scale")) lc.fixed_scale = j.at("fixed_scale").get<double>();
    if (j.contains("linear")) {
        const auto& lin = j.at("linear");
        if (lin.contains("start")) lc.linear_start = lin.at("start").get<double>();
        if (lin.contains("end")) lc.linear_end = lin.at("end").get<double>();
        if (lin.contains("t_max")) lc.linear_t_max = lin.at("t_max").get<double>();
    }
    lc.validate();
    return lc;
}

inline nlohmann::ordered_json loss_config_to_json(const losses::LossConfig& lc) {
    return {{"family", losses::to_string(lc.family)},
            {"decay", losses::to_string(lc.decay)},
            {"alpha", lc.alpha},
            {"D", lc.scale_factor},
            {"epsilon", lc.epsilon},
            {"fixed_scale", lc.fixed_scale},
            {"linear", {{"start", lc.linear_start}, {"end", lc.linear_end}, {"t_max", lc.linear_t_max}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::ordered_json& j) {
    TrainConfig cfg;
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
    if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        if (a.contains("beta1")) cfg.adam.beta1 = a.at("beta1").get<double>();
        if (a.contains("beta2")) cfg.adam.beta2 = a.at("beta2").get<double>();
        if (a.contains("eps")) cfg.adam.eps = a.at("eps").get<double>();
    }
    if (j.contains("loss")) cfg.loss = loss_config_from_json(j.at("loss"));
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("checkpoint_every")) cfg.checkpoint_every = j.at("checkpoint_every").get<int>();
    if (j.contains("checkpoint")) cfg.checkpoint_path = j.at("checkpoint").get<std::string>();
    if (j.contains("log")) cfg.log_path = j.at("log").get<std::string>();
    cfg.validate();
    return cfg;
}

}  // namespace dronekey::trainer
