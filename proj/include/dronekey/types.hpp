#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dronekey/common.hpp"
#include "dronekey/so3.hpp"

namespace dronekey {

inline constexpr int kNumKeypoints = 4;

/// Ordered 2D propeller keypoints, pixel units, origin top-left, y down.
/// Index k identifies one specific propeller; no operation may permute it.
struct Keypoints2D {
    std::array<Eigen::Vector2d, kNumKeypoints> points{};

    Eigen::Vector2d& operator[](int k) { return points[static_cast<std::size_t>(k)]; }
    const Eigen::Vector2d& operator[](int k) const { return points[static_cast<std::size_t>(k)]; }

    bool all_finite() const {
        for (const auto& p : points)
            if (!p.allFinite()) return false;
        return true;
    }

    /// Flattened (x0,y0,x1,y1,...) view, the layout the keypoint head regresses.
    Eigen::Matrix<double, 2 * kNumKeypoints, 1> flatten() const {
        Eigen::Matrix<double, 2 * kNumKeypoints, 1> v;
        for (int k = 0; k < kNumKeypoints; ++k) {
            v(2 * k) = points[static_cast<std::size_t>(k)].x();
            v(2 * k + 1) = points[static_cast<std::size_t>(k)].y();
        }
        return v;
    }

    static Keypoints2D from_flat(const Eigen::Matrix<double, 2 * kNumKeypoints, 1>& v) {
        Keypoints2D kp;
        for (int k = 0; k < kNumKeypoints; ++k)
            kp[k] = Eigen::Vector2d(v(2 * k), v(2 * k + 1));
        return kp;
    }
};

/// Known propeller positions in the drone body frame, meters. The four points
/// are coplanar and centered on the body-frame origin.
struct ObjectModel3D {
    std::array<Eigen::Vector3d, kNumKeypoints> points{};

    Eigen::Vector3d& operator[](int k) { return points[static_cast<std::size_t>(k)]; }
    const Eigen::Vector3d& operator[](int k) const { return points[static_cast<std::size_t>(k)]; }

    Eigen::Vector3d centroid() const {
        Eigen::Vector3d c = Eigen::Vector3d::Zero();
        for (const auto& p : points) c += p;
        return c / static_cast<double>(kNumKeypoints);
    }

    double max_radius() const {
        double r = 0.0;
        for (const auto& p : points) r = std::max(r, p.norm());
        return r;
    }

    /// Square propeller layout. Keypoint 1 sits at (+a,+a,0), then clockwise
    /// looking down the body -z axis: 2=(+a,-a), 3=(-a,-a), 4=(-a,+a).
    static ObjectModel3D square(double half_diagonal_m = 0.15) {
        const double a = half_diagonal_m / std::sqrt(2.0);
        ObjectModel3D m;
        m[0] = {a, a, 0.0};
        m[1] = {a, -a, 0.0};
        m[2] = {-a, -a, 0.0};
        m[3] = {-a, a, 0.0};
        return m;
    }
};

struct CameraIntrinsics {
    double fx = 800.0, fy = 800.0;  // focal lengths, px
    double cx = 320.0, cy = 320.0;  // principal point, px
    std::uint32_t width = 640, height = 640;

    Eigen::Matrix3d matrix() const {
        Eigen::Matrix3d k;
        k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
        return k;
    }

    bool valid() const {
        return std::isfinite(fx) && std::isfinite(fy) && std::isfinite(cx) && std::isfinite(cy) &&
               fx > 0.0 && fy > 0.0 && width > 0 && height > 0 &&
               cx > 0.0 && cx < static_cast<double>(width) &&
               cy > 0.0 && cy < static_cast<double>(height);
    }
};

/// Rigid body->camera transform: P_cam = R * X_body + t.
struct Pose6DoF {
    Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
    Eigen::Vector3d t = Eigen::Vector3d::Zero();

    Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return R * x + t; }

    Pose6DoF inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
};

/// Pinhole projection of a camera-frame point; caller checks depth.
inline Eigen::Vector2d pinhole_project(const CameraIntrinsics& intr, const Eigen::Vector3d& p_cam) {
    return {intr.fx * p_cam.x() / p_cam.z() + intr.cx,
            intr.fy * p_cam.y() / p_cam.z() + intr.cy};
}

struct FrameRecord {
    std::uint64_t frame_id = 0;
    std::string sequence_id;
    CameraIntrinsics intrinsics;
    ObjectModel3D model;
    Keypoints2D kp2d_gt;   // clean projection of model through pose
    Keypoints2D kp2d_obs;  // observed keypoints (may carry noise)
    Pose6DoF pose;
};

struct DatasetMeta {
    std::uint64_t seed = 0;
    double sigma_px = 0.0;
    bool translation = false;
    bool rotation = false;
    bool nonlinear = false;

    bool operator==(const DatasetMeta&) const = default;
};

struct SequenceDataset {
    std::vector<FrameRecord> records;
    DatasetMeta meta;
};

/// Checks every type invariant on one record. Violations are returned, not
/// thrown; an empty list means the record is well formed. The reprojection
/// check is skipped when intrinsics/model/pose are themselves invalid.
inline std::vector<std::string> validate_record(const FrameRecord& rec,
                                                double reproj_tol_px = 1e-6) {
    std::vector<std::string> out;
    bool geometry_ok = true;

    if (!rec.intrinsics.valid()) {
        geometry_ok = false;
        if (!(rec.intrinsics.fx > 0.0)) out.push_back("intrinsics.fx: not positive");
        if (!(rec.intrinsics.fy > 0.0)) out.push_back("intrinsics.fy: not positive");
        if (!(rec.intrinsics.cx > 0.0 && rec.intrinsics.cx < static_cast<double>(rec.intrinsics.width)))
            out.push_back("intrinsics.cx: outside image");
        if (!(rec.intrinsics.cy > 0.0 && rec.intrinsics.cy < static_cast<double>(rec.intrinsics.height)))
            out.push_back("intrinsics.cy: outside image");
    }

    bool model_finite = true;
    for (const auto& p : rec.model.points)
        if (!p.allFinite()) model_finite = false;
    if (!model_finite) {
        geometry_ok = false;
        out.push_back("model: non-finite");
    } else {
        Eigen::Matrix<double, kNumKeypoints, 3> centered;
        const Eigen::Vector3d c = rec.model.centroid();
        double max_norm = 0.0;
        for (int k = 0; k < kNumKeypoints; ++k) {
            centered.row(k) = (rec.model[k] - c).transpose();
            max_norm = std::max(max_norm, rec.model[k].norm());
        }
        Eigen::JacobiSVD<Eigen::Matrix<double, kNumKeypoints, 3>> svd(centered);
        const auto& s = svd.singularValues();
        if (s(2) > 1e-9 * s(0)) {
            geometry_ok = false;
            out.push_back("model: not coplanar");
        }
        if (c.norm() > 1e-9 * (1.0 + max_norm)) {
            geometry_ok = false;
            out.push_back("model: centroid not at origin");
        }
    }

    if (!rec.pose.R.allFinite() || !rec.pose.t.allFinite()) {
        geometry_ok = false;
        out.push_back("pose: non-finite");
    } else {
        const double ortho = (rec.pose.R.transpose() * rec.pose.R - Eigen::Matrix3d::Identity()).norm();
        if (ortho > 1e-9) {
            geometry_ok = false;
            out.push_back("pose.R: not orthonormal");
        }
        if (std::abs(rec.pose.R.determinant() - 1.0) > 1e-9) {
            geometry_ok = false;
            out.push_back("pose.R: det ≠ 1");
        }
        if (geometry_ok && model_finite) {
            for (int k = 0; k < kNumKeypoints; ++k) {
                if (rec.pose.apply(rec.model[k]).z() <= 0.0) {
                    geometry_ok = false;
                    out.push_back("pose: non-positive depth");
                    break;
                }
            }
        }
    }

    if (!rec.kp2d_gt.all_finite()) out.push_back("kp2d_gt: non-finite");
    if (!rec.kp2d_obs.all_finite()) out.push_back("kp2d_obs: non-finite");

    if (geometry_ok && rec.kp2d_gt.all_finite()) {
        double max_err = 0.0;
        for (int k = 0; k < kNumKeypoints; ++k) {
            const Eigen::Vector2d proj = pinhole_project(rec.intrinsics, rec.pose.apply(rec.model[k]));
            max_err = std::max(max_err, (proj - rec.kp2d_gt[k]).lpNorm<Eigen::Infinity>());
        }
        if (max_err > reproj_tol_px) out.push_back("keypoints_2d: reprojection mismatch");
    }

    return out;
}

inline std::vector<std::string> validate_dataset(const SequenceDataset& ds,
                                                 double reproj_tol_px = 1e-6) {
    std::vector<std::string> out;
    for (const auto& rec : ds.records) {
        for (const auto& v : validate_record(rec, reproj_tol_px)) {
            out.push_back("record " + std::to_string(rec.frame_id) + ": " + v);
        }
    }
    return out;
}

}  // namespace dronekey
