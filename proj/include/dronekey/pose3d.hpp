#pragma once

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dronekey/so3.hpp"
#include "dronekey/types.hpp"

namespace dronekey::pose3d {

struct PnPSolution {
    Pose6DoF pose;
    double reprojection_rmse = 0.0;  // px, sqrt(mean over keypoints of |r_k|^2)
    int iterations = 0;
    bool converged = false;
};

namespace detail {

struct PlaneBasis {
    Eigen::Matrix3d q;  // body axes of the model plane, det +1
    std::array<Eigen::Vector2d, kNumKeypoints> plane_pts;
};

/// Expresses the (coplanar, centered) model in an orthonormal basis of its
/// own plane so the planar homography machinery applies to any model.
inline PlaneBasis plane_basis(const ObjectModel3D& model) {
    Eigen::Matrix<double, kNumKeypoints, 3> pts;
    for (int k = 0; k < kNumKeypoints; ++k) pts.row(k) = model[k].transpose();
    Eigen::JacobiSVD<Eigen::Matrix<double, kNumKeypoints, 3>> svd(pts, Eigen::ComputeFullV);
    const Eigen::Vector3d v1 = svd.matrixV().col(0);
    const Eigen::Vector3d v2 = svd.matrixV().col(1);
    PlaneBasis pb;
    pb.q.col(0) = v1;
    pb.q.col(1) = v2;
    pb.q.col(2) = v1.cross(v2);
    for (int k = 0; k < kNumKeypoints; ++k)
        pb.plane_pts[static_cast<std::size_t>(k)] = {model[k].dot(v1), model[k].dot(v2)};
    return pb;
}

struct Similarity2D {
    // x' = s * (x - c)
    double s = 1.0;
    Eigen::Vector2d c = Eigen::Vector2d::Zero();
};

inline Similarity2D hartley_normalization(const std::array<Eigen::Vector2d, kNumKeypoints>& pts) {
    Similarity2D t;
    for (const auto& p : pts) t.c += p;
    t.c /= static_cast<double>(kNumKeypoints);
    double mean_dist = 0.0;
    for (const auto& p : pts) mean_dist += (p - t.c).norm();
    mean_dist /= static_cast<double>(kNumKeypoints);
    t.s = mean_dist > 1e-15 ? std::sqrt(2.0) / mean_dist : 1.0;
    return t;
}

/// DLT homography from 4 exact correspondences (plane coords -> normalized
/// camera coords). Throws on a degenerate configuration.
inline Eigen::Matrix3d homography_dlt(const std::array<Eigen::Vector2d, kNumKeypoints>& src,
                                      const std::array<Eigen::Vector2d, kNumKeypoints>& dst) {
    const Similarity2D ts = hartley_normalization(src);
    const Similarity2D td = hartley_normalization(dst);

    Eigen::Matrix<double, 2 * kNumKeypoints, 9> a;
    for (int k = 0; k < kNumKeypoints; ++k) {
        const Eigen::Vector2d s = ts.s * (src[static_cast<std::size_t>(k)] - ts.c);
        const Eigen::Vector2d d = td.s * (dst[static_cast<std::size_t>(k)] - td.c);
        a.row(2 * k) << -s.x(), -s.y(), -1.0, 0.0, 0.0, 0.0, d.x() * s.x(), d.x() * s.y(), d.x();
        a.row(2 * k + 1) << 0.0, 0.0, 0.0, -s.x(), -s.y(), -1.0, d.y() * s.x(), d.y() * s.y(), d.y();
    }
    Eigen::JacobiSVD<Eigen::Matrix<double, 2 * kNumKeypoints, 9>> svd(a, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv(7) < 1e-10 * sv(0))
        throw NumericalError("degenerate configuration: collinear image points");
    const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
    Eigen::Matrix3d hn;
    hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);

    Eigen::Matrix3d tsm = Eigen::Matrix3d::Identity(), tdm_inv = Eigen::Matrix3d::Identity();
    tsm(0, 0) = tsm(1, 1) = ts.s;
    tsm(0, 2) = -ts.s * ts.c.x();
    tsm(1, 2) = -ts.s * ts.c.y();
    tdm_inv(0, 0) = tdm_inv(1, 1) = 1.0 / td.s;
    tdm_inv(0, 2) = td.c.x();
    tdm_inv(1, 2) = td.c.y();
    return tdm_inv * hn * tsm;
}

/// H ~ [r1 r2 t] up to scale for a z=0 plane; the +-H pair gives the two
/// candidate poses.
inline std::vector<Pose6DoF> decompose_homography(const Eigen::Matrix3d& h_in) {
    std::vector<Pose6DoF> out;
    for (const double sign : {1.0, -1.0}) {
        const Eigen::Matrix3d h = sign * h_in;
        const double n1 = h.col(0).norm(), n2 = h.col(1).norm();
        if (n1 < 1e-15 || n2 < 1e-15) continue;
        const double lambda = 2.0 / (n1 + n2);
        Eigen::Matrix3d rc;
        rc.col(0) = lambda * h.col(0);
        rc.col(1) = lambda * h.col(1);
        rc.col(2) = rc.col(0).cross(rc.col(1));
        Pose6DoF pose;
        pose.R = so3::project(rc);
        pose.t = lambda * h.col(2);
        out.push_back(pose);
    }
    return out;
}

struct Residual {
    Eigen::Matrix<double, 2 * kNumKeypoints, 1> r;
    Eigen::Matrix<double, 2 * kNumKeypoints, 6> j;  // d r / d (omega, dt)
    double cost = 0.0;
};

inline Residual reprojection_residual(const Keypoints2D& kp, const ObjectModel3D& model,
                                      const CameraIntrinsics& intr, const Pose6DoF& pose,
                                      bool with_jacobian) {
    Residual res;
    for (int k = 0; k < kNumKeypoints; ++k) {
        const Eigen::Vector3d p = pose.apply(model[k]);
        const double iz = 1.0 / p.z();
        const Eigen::Vector2d proj(intr.fx * p.x() * iz + intr.cx, intr.fy * p.y() * iz + intr.cy);
        res.r.segment<2>(2 * k) = kp[k] - proj;
        if (with_jacobian) {
            Eigen::Matrix<double, 2, 3> jp;
            jp << intr.fx * iz, 0.0, -intr.fx * p.x() * iz * iz,
                  0.0, intr.fy * iz, -intr.fy * p.y() * iz * iz;
            Eigen::Matrix<double, 3, 6> jt;
            jt.leftCols<3>() = -so3::hat(pose.R * model[k]);  // left perturbation exp(w^)R
            jt.rightCols<3>() = Eigen::Matrix3d::Identity();
            res.j.middleRows<2>(2 * k) = -jp * jt;  // r = y - proj
        }
    }
    res.cost = res.r.squaredNorm();
    return res;
}

struct LmResult {
    Pose6DoF pose;
    double cost = 0.0;
    int iterations = 0;
    double grad_norm = 0.0;
};

/// Levenberg-Marquardt over SO(3) x R^3: lambda starts at 1e-3, x10 on a
/// rejected step, /10 on an accepted one; stops on step norm < 1e-10,
/// cost change < 1e-12, or 100 iterations.
inline LmResult refine_lm(const Keypoints2D& kp, const ObjectModel3D& model,
                          const CameraIntrinsics& intr, Pose6DoF pose) {
    LmResult out;
    double lambda = 1e-3;
    Residual res = reprojection_residual(kp, model, intr, pose, true);
    int iter = 0;
    for (; iter < 100; ++iter) {
        const Eigen::Matrix<double, 6, 6> jtj = res.j.transpose() * res.j;
        const Eigen::Matrix<double, 6, 1> jtr = res.j.transpose() * res.r;
        Eigen::Matrix<double, 6, 6> damped = jtj;
        for (int i = 0; i < 6; ++i) damped(i, i) += lambda * std::max(jtj(i, i), 1e-12);
        const Eigen::Matrix<double, 6, 1> step = damped.ldlt().solve(-jtr);
        if (!step.allFinite()) break;

        Pose6DoF trial;
        trial.R = so3::exp(step.head<3>()) * pose.R;
        trial.t = pose.t + step.tail<3>();
        const Residual trial_res = reprojection_residual(kp, model, intr, trial, true);

        if (trial_res.cost < res.cost) {
            const double delta = res.cost - trial_res.cost;
            pose = trial;
            res = trial_res;
            lambda = std::max(lambda * 0.1, 1e-12);
            if (step.norm() < 1e-10 || delta < 1e-12) {
                ++iter;
                break;
            }
        } else {
            lambda *= 10.0;
            if (step.norm() < 1e-10) {
                ++iter;
                break;
            }
        }
    }
    out.pose = pose;
    out.cost = res.cost;
    out.iterations = iter;
    out.grad_norm = (2.0 * res.j.transpose() * res.r).norm();  // gradient of sum |r|^2
    return out;
}

inline bool cheirality_ok(const ObjectModel3D& model, const Pose6DoF& pose) {
    for (int k = 0; k < kNumKeypoints; ++k)
        if (pose.apply(model[k]).z() <= 1e-9) return false;
    return true;
}

}  // namespace detail

/// Minimizes the reprojection error sum_k |y_k - A(R Y_k + t)|^2 for the four
/// ordered correspondences. Initialization: planar homography (normalized
/// DLT) decomposed into its two candidate poses; every cheirality-valid
/// candidate is LM-refined and the lowest-residual result wins.
inline PnPSolution solve_pnp(const Keypoints2D& kp, const ObjectModel3D& model,
                             const CameraIntrinsics& intr) {
    if (!kp.all_finite()) throw DataError("non-finite keypoints");

    // collinear (or coincident) image points make the planar pose ill-posed
    double max_area = 0.0, spread = 0.0;
    for (int a = 0; a < kNumKeypoints; ++a)
        for (int b = a + 1; b < kNumKeypoints; ++b) {
            spread = std::max(spread, (kp[a] - kp[b]).norm());
            for (int c = b + 1; c < kNumKeypoints; ++c) {
                const Eigen::Vector2d u = kp[b] - kp[a], v = kp[c] - kp[a];
                max_area = std::max(max_area, 0.5 * std::abs(u.x() * v.y() - u.y() * v.x()));
            }
        }
    if (max_area <= 1e-9 * (1.0 + spread * spread))
        throw NumericalError("degenerate configuration: collinear image points");

    const auto pb = detail::plane_basis(model);
    std::array<Eigen::Vector2d, kNumKeypoints> norm_img;
    for (int k = 0; k < kNumKeypoints; ++k)
        norm_img[static_cast<std::size_t>(k)] = {(kp[k].x() - intr.cx) / intr.fx,
                                                 (kp[k].y() - intr.cy) / intr.fy};

    const Eigen::Matrix3d h = detail::homography_dlt(pb.plane_pts, norm_img);

    bool have_best = false;
    detail::LmResult best;
    for (const auto& cand_plane : detail::decompose_homography(h)) {
        // candidate is the pose of the plane frame; map back to the body frame
        Pose6DoF cand{cand_plane.R * pb.q.transpose(), cand_plane.t};
        if (!detail::cheirality_ok(model, cand)) continue;
        const auto refined = detail::refine_lm(kp, model, intr, cand);
        if (!detail::cheirality_ok(model, refined.pose)) continue;
        if (!have_best || refined.cost < best.cost) {
            best = refined;
            have_best = true;
        }
    }
    if (!have_best) throw NumericalError("no cheirality-valid candidate pose");

    PnPSolution sol;
    sol.pose = best.pose;
    sol.reprojection_rmse = std::sqrt(best.cost / kNumKeypoints);
    sol.iterations = best.iterations;
    sol.converged = best.grad_norm <= 1e-8;
    return sol;
}

/// Y_k(camera) = R Y_k^obj + t.
inline std::array<Eigen::Vector3d, kNumKeypoints> camera_frame_keypoints(const ObjectModel3D& model,
                                                                         const Pose6DoF& pose) {
    std::array<Eigen::Vector3d, kNumKeypoints> out;
    for (int k = 0; k < kNumKeypoints; ++k) {
        out[static_cast<std::size_t>(k)] = pose.apply(model[k]);
        if (out[static_cast<std::size_t>(k)].z() <= 0.0)
            throw NumericalError("reconstructed keypoint has non-positive depth");
    }
    return out;
}

/// v1 = Y_2 - Y_O, v2 = Y_3 - Y_O, v3 = v1 x v2; R = [v1^ v2^ v3^] projected
/// to the nearest rotation, t = centroid. For the default square model v1
/// and v2 are perpendicular and the projection is a no-op.
inline std::pair<Eigen::Matrix3d, Eigen::Vector3d> rotation_from_keypoints(
    const std::array<Eigen::Vector3d, kNumKeypoints>& pts) {
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& p : pts) centroid += p;
    centroid /= static_cast<double>(kNumKeypoints);

    const Eigen::Vector3d v1 = pts[1] - centroid;
    const Eigen::Vector3d v2 = pts[2] - centroid;
    const Eigen::Vector3d v3 = v1.cross(v2);
    if (v1.norm() < 1e-9 || v2.norm() < 1e-9 || v3.norm() < 1e-9)
        throw NumericalError("degenerate keypoint geometry for rotation construction");

    Eigen::Matrix3d m;
    m.col(0) = v1.normalized();
    m.col(1) = v2.normalized();
    m.col(2) = v3.normalized();
    return {so3::project(m), centroid};
}

/// Constant rotation between the body frame and the frame built by
/// rotation_from_keypoints; depends only on the model geometry.
inline Eigen::Matrix3d keypoint_frame_rotation(const ObjectModel3D& model) {
    return rotation_from_keypoints(model.points).first;
}

/// Full geometric recovery: PnP, camera-frame reconstruction and rotation
/// assembly, then the constant model-dependent frame correction so the
/// result is the drone's body orientation and centroid in camera
/// coordinates.
inline Pose6DoF estimate_pose(const Keypoints2D& kp, const ObjectModel3D& model,
                              const CameraIntrinsics& intr) {
    const PnPSolution pnp = solve_pnp(kp, model, intr);
    const auto cam_pts = camera_frame_keypoints(model, pnp.pose);
    const auto [r_kp, t_kp] = rotation_from_keypoints(cam_pts);
    return {r_kp * keypoint_frame_rotation(model).transpose(), t_kp};
}

}  // namespace dronekey::pose3d
