#pragma once

#include <cmath>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "dronekey/common.hpp"

namespace dronekey::so3 {

inline Eigen::Matrix3d hat(const Eigen::Vector3d& w) {
    Eigen::Matrix3d m;
    m << 0.0, -w.z(), w.y(),
         w.z(), 0.0, -w.x(),
        -w.y(), w.x(), 0.0;
    return m;
}

inline Eigen::Vector3d vee(const Eigen::Matrix3d& m) {
    return {m(2, 1), m(0, 2), m(1, 0)};
}

/// Rodrigues exponential map.
inline Eigen::Matrix3d exp(const Eigen::Vector3d& w) {
    const double theta = w.norm();
    const Eigen::Matrix3d k = hat(w);
    if (theta < 1e-8) {
        return Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
    }
    const double a = std::sin(theta) / theta;
    const double b = (1.0 - std::cos(theta)) / (theta * theta);
    return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

/// Principal-branch log map, |angle| <= pi. Quaternion extraction is robust
/// over the whole group including angles near pi.
inline Eigen::Vector3d log(const Eigen::Matrix3d& r) {
    Eigen::Quaterniond q(r);
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    const Eigen::Vector3d v = q.vec();
    const double vn = v.norm();
    if (vn < 1e-12) return 2.0 * v;  // small-angle: q ~ [1, w/2]
    const double angle = 2.0 * std::atan2(vn, q.w());
    return (angle / vn) * v;
}

/// Nearest rotation in Frobenius norm (orthogonal Procrustes).
inline Eigen::Matrix3d project(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d uvt = svd.matrixU() * svd.matrixV().transpose();
    if (uvt.determinant() < 0.0) {
        Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
        d(2, 2) = -1.0;
        uvt = svd.matrixU() * d * svd.matrixV().transpose();
    }
    return uvt;
}

/// Geodesic angle between two rotations, radians.
inline double geodesic_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
    const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    return std::acos(std::clamp(c, -1.0, 1.0));
}

inline bool is_rotation(const Eigen::Matrix3d& r, double tol = 1e-9) {
    const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).norm();
    return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

/// Haar-uniform random rotation via a normalized Gaussian quaternion.
inline Eigen::Matrix3d random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

/// Rotation about the z axis.
inline Eigen::Matrix3d rot_z(double angle) {
    return exp(Eigen::Vector3d(0.0, 0.0, angle));
}

}  // namespace dronekey::so3
