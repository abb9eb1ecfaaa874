#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dronekey/so3.hpp"
#include "dronekey/types.hpp"

namespace dronekey::tracking {

struct NoiseParams {
    double q_pos = 1e-4;  // velocity process noise, m^2/frame^2
    double q_rot = 1e-4;  // angular-velocity process noise, rad^2/frame^2
    double r_pos = 1e-2;  // position measurement noise, m^2
    double r_rot = 1e-2;  // orientation measurement noise, rad^2
};

/// Constant-velocity filter state over [position, velocity, rotation vector,
/// angular velocity]. Orientation is handled in the tangent space at the
/// predicted rotation; emitted rotations are re-exponentiated and therefore
/// always in SO(3).
struct KalmanState {
    Eigen::Matrix<double, 12, 1> x = Eigen::Matrix<double, 12, 1>::Zero();
    Eigen::Matrix<double, 12, 12> P = Eigen::Matrix<double, 12, 12>::Zero();
    Eigen::Matrix<double, 12, 12> Q = Eigen::Matrix<double, 12, 12>::Zero();
    Eigen::Matrix<double, 6, 6> Rm = Eigen::Matrix<double, 6, 6>::Zero();
    bool initialized = false;
    bool filter_rotation = true;

    Eigen::Vector3d position() const { return x.segment<3>(0); }
    Eigen::Vector3d velocity() const { return x.segment<3>(3); }
    Eigen::Vector3d rotation_vector() const { return x.segment<3>(6); }
    Eigen::Vector3d angular_velocity() const { return x.segment<3>(9); }

    Pose6DoF pose() const { return {so3::exp(rotation_vector()), position()}; }
};

namespace detail {

inline void enforce_psd(Eigen::Matrix<double, 12, 12>& p) {
    p = 0.5 * (p + p.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 12, 12>> es(p);
    Eigen::Matrix<double, 12, 1> ev = es.eigenvalues().cwiseMax(0.0);
    p = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    p = 0.5 * (p + p.transpose()).eval();
}

}  // namespace detail

inline KalmanState kf_init(const Pose6DoF& first_measurement, const NoiseParams& np,
                           bool filter_rotation = true) {
    if (!first_measurement.R.allFinite() || !first_measurement.t.allFinite())
        throw NumericalError("non-finite measurement");
    constexpr double kLargeVar = 1.0;  // uninformed velocity blocks
    KalmanState st;
    st.x.segment<3>(0) = first_measurement.t;
    st.x.segment<3>(6) = so3::log(first_measurement.R);
    st.P.block<3, 3>(0, 0) = np.r_pos * Eigen::Matrix3d::Identity();
    st.P.block<3, 3>(3, 3) = kLargeVar * Eigen::Matrix3d::Identity();
    st.P.block<3, 3>(6, 6) = np.r_rot * Eigen::Matrix3d::Identity();
    st.P.block<3, 3>(9, 9) = kLargeVar * Eigen::Matrix3d::Identity();
    st.Q.block<3, 3>(3, 3) = np.q_pos * Eigen::Matrix3d::Identity();
    st.Q.block<3, 3>(9, 9) = np.q_rot * Eigen::Matrix3d::Identity();
    st.Rm.block<3, 3>(0, 0) = np.r_pos * Eigen::Matrix3d::Identity();
    st.Rm.block<3, 3>(3, 3) = np.r_rot * Eigen::Matrix3d::Identity();
    st.initialized = true;
    st.filter_rotation = filter_rotation;
    return st;
}

/// One predict/update cycle; returns the smoothed pose. The orientation
/// residual is computed on SO(3) as log(R_meas * R_pred^-1) to avoid wrap
/// artifacts.
inline Pose6DoF kf_step(KalmanState& st, const Pose6DoF& meas) {
    if (!st.initialized) throw DataError("kf_step on uninitialized state");
    if (!meas.R.allFinite() || !meas.t.allFinite()) throw NumericalError("non-finite measurement");

    // constant-velocity predict
    Eigen::Matrix<double, 12, 12> f = Eigen::Matrix<double, 12, 12>::Identity();
    f.block<3, 3>(0, 3) = Eigen::Matrix3d::Identity();
    f.block<3, 3>(6, 9) = Eigen::Matrix3d::Identity();

    const Eigen::Matrix3d r_pred = so3::exp(st.angular_velocity()) * so3::exp(st.rotation_vector());
    st.x.segment<3>(0) += st.velocity();
    st.x.segment<3>(6) = so3::log(r_pred);
    st.P = (f * st.P * f.transpose() + st.Q).eval();

    // measurement update on [position, orientation tangent]
    Eigen::Matrix<double, 6, 12> h = Eigen::Matrix<double, 6, 12>::Zero();
    h.block<3, 3>(0, 0) = Eigen::Matrix3d::Identity();
    h.block<3, 3>(3, 6) = Eigen::Matrix3d::Identity();

    Eigen::Matrix<double, 6, 1> innovation;
    innovation.head<3>() = meas.t - st.position();
    innovation.tail<3>() = so3::log(meas.R * r_pred.transpose());

    const Eigen::Matrix<double, 6, 6> s = h * st.P * h.transpose() + st.Rm;
    const Eigen::Matrix<double, 12, 6> k = st.P * h.transpose() * s.ldlt().solve(
        Eigen::Matrix<double, 6, 6>::Identity());
    const Eigen::Matrix<double, 12, 1> delta = k * innovation;

    st.x.segment<3>(0) += delta.segment<3>(0);
    st.x.segment<3>(3) += delta.segment<3>(3);
    const Eigen::Matrix3d r_post = so3::exp(delta.segment<3>(6)) * r_pred;
    st.x.segment<3>(6) = so3::log(r_post);
    st.x.segment<3>(9) += delta.segment<3>(9);

    // Joseph form, then symmetrize + eigenvalue floor
    const Eigen::Matrix<double, 12, 12> ikh = Eigen::Matrix<double, 12, 12>::Identity() - k * h;
    st.P = (ikh * st.P * ikh.transpose() + k * st.Rm * k.transpose()).eval();
    detail::enforce_psd(st.P);

    if (!st.filter_rotation) {
        st.x.segment<3>(6) = so3::log(meas.R);
        st.x.segment<3>(9).setZero();
        return {meas.R, st.position()};
    }
    return {r_post, st.position()};
}

/// kf_init on the first estimate, kf_step on the rest.
inline std::vector<Pose6DoF> smooth_sequence(const std::vector<Pose6DoF>& estimates,
                                             const NoiseParams& np, bool filter_rotation = true) {
    if (estimates.empty()) throw DataError("cannot smooth an empty sequence");
    std::vector<Pose6DoF> out;
    out.reserve(estimates.size());
    KalmanState st = kf_init(estimates.front(), np, filter_rotation);
    out.push_back(estimates.front());  // the init state is the first measurement
    for (std::size_t i = 1; i < estimates.size(); ++i) out.push_back(kf_step(st, estimates[i]));
    return out;
}

}  // namespace dronekey::tracking
