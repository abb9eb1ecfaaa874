#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dronekey/pose3d.hpp"
#include "dronekey/types.hpp"

namespace dronekey {

/// Keypoint prediction rows: {"frame_id":u64,"kp2d_pred":[[x,y];4]}.
inline void save_keypoint_predictions(const std::vector<std::uint64_t>& frame_ids,
                                      const std::vector<Keypoints2D>& preds,
                                      const std::string& path) {
    if (frame_ids.size() != preds.size()) throw DataError("prediction/frame id size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        ordered_json j;
        j["frame_id"] = frame_ids[i];
        ordered_json kp = ordered_json::array();
        for (const auto& p : preds[i].points) kp.push_back({p.x(), p.y()});
        j["kp2d_pred"] = std::move(kp);
        out << j.dump() << '\n';
    }
    if (!out) throw DataError("write failed: " + path);
}

inline std::vector<std::pair<std::uint64_t, Keypoints2D>> load_keypoint_predictions(
    const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::vector<std::pair<std::uint64_t, Keypoints2D>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = ordered_json::parse(line);
            Keypoints2D kp;
            const auto& arr = j.at("kp2d_pred");
            if (!arr.is_array() || arr.size() != kNumKeypoints)
                throw DataError("kp2d_pred: expected 4 keypoints");
            for (int k = 0; k < kNumKeypoints; ++k)
                kp[k] = {arr[static_cast<std::size_t>(k)].at(0).get<double>(),
                         arr[static_cast<std::size_t>(k)].at(1).get<double>()};
            out.emplace_back(j.at("frame_id").get<std::uint64_t>(), kp);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

struct PoseRecord {
    std::uint64_t frame_id = 0;
    Pose6DoF pose;
    double reproj_rmse = 0.0;
    bool converged = true;
};

/// Pose rows: {"frame_id":u64,"R":[f64;9] row-major,"t":[f64;3],
/// "reproj_rmse":f64,"converged":bool}.
inline void save_pose_records(const std::vector<PoseRecord>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    for (const auto& row : rows) {
        ordered_json j;
        j["frame_id"] = row.frame_id;
        ordered_json r = ordered_json::array();
        for (int i = 0; i < 3; ++i)
            for (int c = 0; c < 3; ++c) r.push_back(row.pose.R(i, c));
        j["R"] = std::move(r);
        j["t"] = {row.pose.t.x(), row.pose.t.y(), row.pose.t.z()};
        j["reproj_rmse"] = row.reproj_rmse;
        j["converged"] = row.converged;
        out << j.dump() << '\n';
    }
    if (!out) throw DataError("write failed: " + path);
}

inline std::vector<PoseRecord> load_pose_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    std::vector<PoseRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = ordered_json::parse(line);
            PoseRecord row;
            row.frame_id = j.at("frame_id").get<std::uint64_t>();
            const auto& r = j.at("R");
            if (!r.is_array() || r.size() != 9) throw DataError("R: expected 9 values");
            for (int i = 0; i < 3; ++i)
                for (int c = 0; c < 3; ++c)
                    row.pose.R(i, c) = r[static_cast<std::size_t>(3 * i + c)].get<double>();
            const auto& t = j.at("t");
            if (!t.is_array() || t.size() != 3) throw DataError("t: expected 3 values");
            for (int i = 0; i < 3; ++i) row.pose.t(i) = t[static_cast<std::size_t>(i)].get<double>();
            row.reproj_rmse = j.at("reproj_rmse").get<double>();
            row.converged = j.at("converged").get<bool>();
            out.push_back(row);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace dronekey
