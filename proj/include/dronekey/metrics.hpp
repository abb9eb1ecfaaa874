#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dronekey/so3.hpp"
#include "dronekey/types.hpp"

namespace dronekey::metrics {

/// OKS = (1/K) sum_k exp(-d_k^2 / (0.2 beta^2 gamma_k^2)) with beta the
/// square root of the object area and gamma_k = 1 for every propeller.
inline double oks(const Keypoints2D& gt, const Keypoints2D& pred, double object_area_px2) {
    if (!(object_area_px2 > 0.0)) throw DataError("object area must be positive");
    double acc = 0.0;
    for (int k = 0; k < kNumKeypoints; ++k) {
        const double d2 = (gt[k] - pred[k]).squaredNorm();
        acc += std::exp(-d2 / (0.2 * object_area_px2));
    }
    return acc / kNumKeypoints;
}

struct KeypointStats {
    double sr90 = 0.0;  // percent
    double sr95 = 0.0;  // percent
    double ap = 0.0;    // percent
};

/// Success rates at OKS 0.90/0.95 plus AP over thresholds 0.50:0.05:0.95.
inline KeypointStats keypoint_metrics(const std::vector<double>& oks_values) {
    if (oks_values.empty()) throw DataError("keypoint metrics need a non-empty OKS list");
    const auto n = static_cast<double>(oks_values.size());
    auto frac_at = [&](double thr) {
        std::size_t c = 0;
        for (const double v : oks_values)
            if (v >= thr) ++c;
        return 100.0 * static_cast<double>(c) / n;
    };
    KeypointStats s;
    s.sr90 = frac_at(0.90);
    s.sr95 = frac_at(0.95);
    double ap = 0.0;
    for (int i = 0; i < 10; ++i) ap += frac_at(0.50 + 0.05 * i);
    s.ap = ap / 10.0;
    return s;
}

struct PoseStats {
    double mae_angle_deg = 0.0;
    double rmse_m = 0.0;
    double mae_m = 0.0;
};

/// Geodesic angle error (degrees, arccos clamped) and Euclidean translation
/// error as RMSE/MAE.
inline PoseStats pose_metrics(const std::vector<Pose6DoF>& gt, const std::vector<Pose6DoF>& pred) {
    if (gt.empty() || gt.size() != pred.size()) throw DataError("pose metric length mismatch");
    PoseStats s;
    double sq = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        s.mae_angle_deg += rad2deg(so3::geodesic_angle(gt[i].R, pred[i].R));
        const double e = (gt[i].t - pred[i].t).norm();
        s.mae_m += e;
        sq += e * e;
    }
    const auto n = static_cast<double>(gt.size());
    s.mae_angle_deg /= n;
    s.mae_m /= n;
    s.rmse_m = std::sqrt(sq / n);
    return s;
}

struct MetricsReport {
    struct Row {
        std::string sequence_id;
        std::size_t n_frames = 0;
        std::optional<KeypointStats> kp;
        std::optional<PoseStats> pose;
    };
    std::size_t n_frames = 0;
    std::vector<double> oks_per_frame;
    std::optional<KeypointStats> kp;    // over all frames
    std::optional<PoseStats> pose;      // over all frames (frame-weighted)
    std::vector<Row> per_sequence;
    // Table-style "Avg" row computed as the plain mean of the per-sequence
    // values, reported alongside the frame-weighted aggregate above.
    std::optional<KeypointStats> kp_unweighted;
    std::optional<PoseStats> pose_unweighted;
};

/// GT-keypoint bounding-box area, the object-area source for OKS.
inline double object_area(const Keypoints2D& gt) {
    double xmin = gt[0].x(), xmax = gt[0].x(), ymin = gt[0].y(), ymax = gt[0].y();
    for (int k = 1; k < kNumKeypoints; ++k) {
        xmin = std::min(xmin, gt[k].x());
        xmax = std::max(xmax, gt[k].x());
        ymin = std::min(ymin, gt[k].y());
        ymax = std::max(ymax, gt[k].y());
    }
    return (xmax - xmin) * (ymax - ymin);
}

/// Aggregates keypoint and/or pose metrics per sequence and overall.
/// Predictions are aligned positionally with the dataset records (the CLI
/// verifies frame ids when loading prediction files).
inline MetricsReport evaluate(const SequenceDataset& ds,
                              const std::vector<Keypoints2D>* pred_kp,
                              const std::vector<Pose6DoF>* pred_pose) {
    if (ds.records.empty()) throw DataError("cannot evaluate an empty dataset");
    if (pred_kp != nullptr && pred_kp->size() != ds.records.size())
        throw DataError("keypoint predictions missing frames");
    if (pred_pose != nullptr && pred_pose->size() != ds.records.size())
        throw DataError("pose predictions missing frames");

    MetricsReport rep;
    rep.n_frames = ds.records.size();

    std::vector<std::string> seq_ids;
    for (const auto& rec : ds.records) {
        bool found = false;
        for (const auto& id : seq_ids) found = found || id == rec.sequence_id;
        if (!found) seq_ids.push_back(rec.sequence_id);
    }

    std::vector<double> all_oks;
    std::vector<Pose6DoF> all_gt, all_pred;
    for (const auto& id : seq_ids) {
        MetricsReport::Row row;
        row.sequence_id = id;
        std::vector<double> seq_oks;
        std::vector<Pose6DoF> seq_gt, seq_pred;
        for (std::size_t i = 0; i < ds.records.size(); ++i) {
            const auto& rec = ds.records[i];
            if (rec.sequence_id != id) continue;
            ++row.n_frames;
            if (pred_kp != nullptr)
                seq_oks.push_back(oks(rec.kp2d_gt, (*pred_kp)[i], object_area(rec.kp2d_gt)));
            if (pred_pose != nullptr) {
                seq_gt.push_back(rec.pose);
                seq_pred.push_back((*pred_pose)[i]);
            }
        }
        if (!seq_oks.empty()) {
            row.kp = keypoint_metrics(seq_oks);
            all_oks.insert(all_oks.end(), seq_oks.begin(), seq_oks.end());
        }
        if (!seq_gt.empty()) {
            row.pose = pose_metrics(seq_gt, seq_pred);
            all_gt.insert(all_gt.end(), seq_gt.begin(), seq_gt.end());
            all_pred.insert(all_pred.end(), seq_pred.begin(), seq_pred.end());
        }
        rep.per_sequence.push_back(std::move(row));
    }

    if (!all_oks.empty()) {
        rep.oks_per_frame = all_oks;
        rep.kp = keypoint_metrics(all_oks);
        KeypointStats u{};
        for (const auto& row : rep.per_sequence) {
            u.sr90 += row.kp->sr90;
            u.sr95 += row.kp->sr95;
            u.ap += row.kp->ap;
        }
        const auto ns = static_cast<double>(rep.per_sequence.size());
        rep.kp_unweighted = KeypointStats{u.sr90 / ns, u.sr95 / ns, u.ap / ns};
    }
    if (!all_gt.empty()) {
        rep.pose = pose_metrics(all_gt, all_pred);
        PoseStats u{};
        for (const auto& row : rep.per_sequence) {
            u.mae_angle_deg += row.pose->mae_angle_deg;
            u.rmse_m += row.pose->rmse_m;
            u.mae_m += row.pose->mae_m;
        }
        const auto ns = static_cast<double>(rep.per_sequence.size());
        rep.pose_unweighted = PoseStats{u.mae_angle_deg / ns, u.rmse_m / ns, u.mae_m / ns};
    }
    return rep;
}

inline nlohmann::ordered_json report_to_json(const MetricsReport& rep) {
    using json = nlohmann::ordered_json;
    auto stats = [](const std::optional<KeypointStats>& kp, const std::optional<PoseStats>& pose,
                    json& j) {
        j["sr90"] = kp ? json(kp->sr90) : json(nullptr);
        j["sr95"] = kp ? json(kp->sr95) : json(nullptr);
        j["ap"] = kp ? json(kp->ap) : json(nullptr);
        j["mae_angle_deg"] = pose ? json(pose->mae_angle_deg) : json(nullptr);
        j["rmse_m"] = pose ? json(pose->rmse_m) : json(nullptr);
        j["mae_m"] = pose ? json(pose->mae_m) : json(nullptr);
    };
    json j;
    stats(rep.kp, rep.pose, j);
    j["n_frames"] = rep.n_frames;
    json per;
    for (const auto& row : rep.per_sequence) {
        json r;
        stats(row.kp, row.pose, r);
        r["n_frames"] = row.n_frames;
        per[row.sequence_id] = std::move(r);
    }
    j["per_sequence"] = std::move(per);
    json unweighted;
    stats(rep.kp_unweighted, rep.pose_unweighted, unweighted);
    j["unweighted_avg"] = std::move(unweighted);
    return j;
}

}  // namespace dronekey::metrics
