#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dronekey/types.hpp"

namespace dronekey {

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline ordered_json record_to_json(const FrameRecord& rec) {
    ordered_json j;
    j["frame_id"] = rec.frame_id;
    j["sequence_id"] = rec.sequence_id;
    j["intrinsics"] = {{"fx", rec.intrinsics.fx}, {"fy", rec.intrinsics.fy},
                       {"cx", rec.intrinsics.cx}, {"cy", rec.intrinsics.cy},
                       {"width", rec.intrinsics.width}, {"height", rec.intrinsics.height}};
    ordered_json model = ordered_json::array();
    for (const auto& p : rec.model.points) model.push_back({p.x(), p.y(), p.z()});
    j["model"] = std::move(model);
    ordered_json gt = ordered_json::array(), obs = ordered_json::array();
    for (const auto& p : rec.kp2d_gt.points) gt.push_back({p.x(), p.y()});
    for (const auto& p : rec.kp2d_obs.points) obs.push_back({p.x(), p.y()});
    j["kp2d_gt"] = std::move(gt);
    j["kp2d_obs"] = std::move(obs);
    ordered_json r = ordered_json::array();
    for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 3; ++c) r.push_back(rec.pose.R(i, c));  // row-major
    j["R"] = std::move(r);
    j["t"] = {rec.pose.t.x(), rec.pose.t.y(), rec.pose.t.z()};
    return j;
}

template <int N>
Eigen::Matrix<double, N, 1> parse_vec(const ordered_json& j, const char* field) {
    if (!j.is_array() || j.size() != N)
        throw DataError(std::string(field) + ": expected array of " + std::to_string(N));
    Eigen::Matrix<double, N, 1> v;
    for (int i = 0; i < N; ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
    return v;
}

inline FrameRecord record_from_json(const ordered_json& j) {
    FrameRecord rec;
    rec.frame_id = j.at("frame_id").get<std::uint64_t>();
    rec.sequence_id = j.at("sequence_id").get<std::string>();
    const auto& in = j.at("intrinsics");
    rec.intrinsics.fx = in.at("fx").get<double>();
    rec.intrinsics.fy = in.at("fy").get<double>();
    rec.intrinsics.cx = in.at("cx").get<double>();
    rec.intrinsics.cy = in.at("cy").get<double>();
    rec.intrinsics.width = in.at("width").get<std::uint32_t>();
    rec.intrinsics.height = in.at("height").get<std::uint32_t>();

    const auto& model = j.at("model");
    if (!model.is_array() || model.size() != kNumKeypoints)
        throw DataError("model: expected 4 points");
    for (int k = 0; k < kNumKeypoints; ++k)
        rec.model[k] = parse_vec<3>(model[static_cast<std::size_t>(k)], "model point");

    const auto& gt = j.at("kp2d_gt");
    const auto& obs = j.at("kp2d_obs");
    if (!gt.is_array() || gt.size() != kNumKeypoints) throw DataError("kp2d_gt: expected 4 keypoints");
    if (!obs.is_array() || obs.size() != kNumKeypoints) throw DataError("kp2d_obs: expected 4 keypoints");
    for (int k = 0; k < kNumKeypoints; ++k) {
        rec.kp2d_gt[k] = parse_vec<2>(gt[static_cast<std::size_t>(k)], "kp2d_gt point");
        rec.kp2d_obs[k] = parse_vec<2>(obs[static_cast<std::size_t>(k)], "kp2d_obs point");
    }

    const Eigen::Matrix<double, 9, 1> r = parse_vec<9>(j.at("R"), "R");
    for (int i = 0; i < 3; ++i)
        for (int c = 0; c < 3; ++c) rec.pose.R(i, c) = r(3 * i + c);
    rec.pose.t = parse_vec<3>(j.at("t"), "t");
    return rec;
}

}  // namespace detail

inline void save_dataset(const SequenceDataset& ds, const std::string& path) {
    const auto violations = validate_dataset(ds);
    if (!violations.empty())
        throw DataError("dataset does not validate: " + violations.front());

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);

    ordered_json meta;
    meta["meta"] = {{"seed", ds.meta.seed}, {"sigma_px", ds.meta.sigma_px},
                    {"translation", ds.meta.translation}, {"rotation", ds.meta.rotation},
                    {"nonlinear", ds.meta.nonlinear}};
    out << meta.dump() << '\n';
    for (const auto& rec : ds.records) out << detail::record_to_json(rec).dump() << '\n';
    out.flush();
    if (!out) throw DataError("write failed: " + path);
}

/// Loads a JSONL dataset. The first non-empty line must be the metadata
/// object; an entirely empty file yields an empty dataset with default
/// metadata. Every record is validated; structural per-sequence invariants
/// (increasing frame ids, shared intrinsics and model) are enforced.
inline SequenceDataset load_dataset(const std::string& path, bool validate = true) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);

    SequenceDataset ds;
    std::string line;
    std::size_t line_no = 0;
    bool meta_seen = false;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": parse error: " + e.what());
        }
        try {
            if (!meta_seen) {
                if (!j.contains("meta"))
                    throw DataError("first line must be the metadata object");
                const auto& m = j.at("meta");
                ds.meta.seed = m.at("seed").get<std::uint64_t>();
                ds.meta.sigma_px = m.at("sigma_px").get<double>();
                ds.meta.translation = m.at("translation").get<bool>();
                ds.meta.rotation = m.at("rotation").get<bool>();
                ds.meta.nonlinear = m.at("nonlinear").get<bool>();
                meta_seen = true;
                continue;
            }
            ds.records.push_back(detail::record_from_json(j));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }

    if (!validate) return ds;

    // Structural invariants per sequence id.
    struct SeqState {
        const FrameRecord* first = nullptr;
        std::uint64_t last_frame = 0;
        bool any = false;
    };
    std::vector<std::pair<std::string, SeqState>> seqs;
    for (const auto& rec : ds.records) {
        const auto violations = validate_record(rec);
        if (!violations.empty())
            throw DataError(path + ": record " + std::to_string(rec.frame_id) + ": " + violations.front());
        SeqState* st = nullptr;
        for (auto& [id, s] : seqs)
            if (id == rec.sequence_id) st = &s;
        if (st == nullptr) {
            seqs.emplace_back(rec.sequence_id, SeqState{});
            st = &seqs.back().second;
        }
        if (st->any) {
            if (rec.frame_id <= st->last_frame)
                throw DataError(path + ": sequence " + rec.sequence_id +
                                ": frame_ids not strictly increasing at frame " +
                                std::to_string(rec.frame_id));
            const FrameRecord& f = *st->first;
            bool same = f.intrinsics.fx == rec.intrinsics.fx && f.intrinsics.fy == rec.intrinsics.fy &&
                        f.intrinsics.cx == rec.intrinsics.cx && f.intrinsics.cy == rec.intrinsics.cy &&
                        f.intrinsics.width == rec.intrinsics.width &&
                        f.intrinsics.height == rec.intrinsics.height;
            for (int k = 0; k < kNumKeypoints && same; ++k)
                same = f.model[k] == rec.model[k];
            if (!same)
                throw DataError(path + ": sequence " + rec.sequence_id +
                                ": intrinsics/model differ at frame " + std::to_string(rec.frame_id));
        } else {
            st->first = &rec;
            st->any = true;
        }
        st->last_frame = rec.frame_id;
    }
    return ds;
}

}  // namespace dronekey
