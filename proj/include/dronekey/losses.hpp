#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "dronekey/types.hpp"

namespace dronekey::losses {

enum class LossFamily { kMse, kGaussian, kPoseAdaptive };
enum class DecayType { kFixed, kLinear, kExp };

inline const char* to_string(LossFamily f) {
    switch (f) {
        case LossFamily::kMse: return "mse";
        case LossFamily::kGaussian: return "gaussian";
        case LossFamily::kPoseAdaptive: return "pose_adaptive";
    }
    return "?";
}

inline const char* to_string(DecayType d) {
    switch (d) {
        case DecayType::kFixed: return "fixed";
        case DecayType::kLinear: return "linear";
        case DecayType::kExp: return "exp";
    }
    return "?";
}

inline LossFamily loss_family_from_string(const std::string& s) {
    if (s == "mse") return LossFamily::kMse;
    if (s == "gaussian") return LossFamily::kGaussian;
    if (s == "pose_adaptive") return LossFamily::kPoseAdaptive;
    throw DataError("unknown loss family: " + s);
}

inline DecayType decay_from_string(const std::string& s) {
    if (s == "fixed") return DecayType::kFixed;
    if (s == "linear") return DecayType::kLinear;
    if (s == "exp") return DecayType::kExp;
    throw DataError("unknown decay type: " + s);
}

struct LossConfig {
    LossFamily family = LossFamily::kPoseAdaptive;
    DecayType decay = DecayType::kExp;
    double alpha = 5.0;         // decay factor
    double scale_factor = 10.0; // D
    double epsilon = 1e-6;      // px^2 regularizer added as eps*I
    double fixed_scale = 1.0;
    // Linear decay interpolates start -> end over [0, t_max], clamped. The
    // defaults share endpoints with the exponential schedule at t_max = 100.
    double linear_start = 10.0;
    double linear_end = 10.0 * std::exp(-5.0);
    double linear_t_max = 100.0;

    void validate() const {
        if (!(scale_factor > 0.0)) throw DataError("loss scale factor D must be > 0");
        if (!(epsilon > 0.0)) throw DataError("loss epsilon must be > 0");
        if (alpha < 0.0) throw DataError("loss alpha must be >= 0");
        if (!(linear_t_max > 0.0)) throw DataError("linear t_max must be > 0");
    }
};

struct CovarianceMatrix {
    Eigen::Matrix2d sigma = Eigen::Matrix2d::Zero();  // px^2
    Eigen::Vector2d mu = Eigen::Vector2d::Zero();     // px
};

/// Sigma = (1/K) sum_k (y_k - mu)(y_k - mu)^T over the 4 keypoints.
inline CovarianceMatrix keypoint_covariance(const Keypoints2D& gt) {
    CovarianceMatrix cov;
    for (int k = 0; k < kNumKeypoints; ++k) cov.mu += gt[k];
    cov.mu /= static_cast<double>(kNumKeypoints);
    for (int k = 0; k < kNumKeypoints; ++k) {
        const Eigen::Vector2d d = gt[k] - cov.mu;
        cov.sigma += d * d.transpose();
    }
    cov.sigma /= static_cast<double>(kNumKeypoints);
    return cov;
}

/// S(t): exponential D*e^(-0.01*alpha*t), a constant, or a clamped linear
/// interpolation.
inline double scale_schedule(double t, const LossConfig& cfg) {
    switch (cfg.decay) {
        case DecayType::kExp:
            return cfg.scale_factor * std::exp(-0.01 * cfg.alpha * t);
        case DecayType::kFixed:
            return cfg.fixed_scale;
        case DecayType::kLinear: {
            const double u = std::clamp(t / cfg.linear_t_max, 0.0, 1.0);
            return cfg.linear_start + (cfg.linear_end - cfg.linear_start) * u;
        }
    }
    return cfg.fixed_scale;
}

struct ScaledCovariance {
    Eigen::Matrix2d sigma_t;
    Eigen::Matrix2d sigma_t_inv;
    double det = 0.0;
};

/// Sigma_t = S(t)*Sigma + eps*I, strictly positive definite by construction.
inline ScaledCovariance scaled_covariance(const Eigen::Matrix2d& sigma, double t,
                                          const LossConfig& cfg) {
    ScaledCovariance sc;
    sc.sigma_t = scale_schedule(t, cfg) * sigma + cfg.epsilon * Eigen::Matrix2d::Identity();
    sc.det = sc.sigma_t(0, 0) * sc.sigma_t(1, 1) - sc.sigma_t(0, 1) * sc.sigma_t(1, 0);
    sc.sigma_t_inv << sc.sigma_t(1, 1), -sc.sigma_t(0, 1), -sc.sigma_t(1, 0), sc.sigma_t(0, 0);
    sc.sigma_t_inv /= sc.det;
    return sc;
}

inline double mahalanobis_t(const Eigen::Vector2d& gt, const Eigen::Vector2d& pred,
                            const ScaledCovariance& sc) {
    const Eigen::Vector2d e = gt - pred;
    const double q = e.dot(sc.sigma_t_inv * e);
    return std::sqrt(std::max(q, 0.0));
}

struct LossValue {
    double loss = 0.0;
    Eigen::Matrix<double, 2 * kNumKeypoints, 1> grad =
        Eigen::Matrix<double, 2 * kNumKeypoints, 1>::Zero();  // d loss / d pred
};

/// Per-frame loss with analytic gradient w.r.t. every predicted coordinate.
///
/// MSE:            mean squared error over the 2K coordinates.
/// Gaussian:       L = mean_k [1 - exp(-d_t/2) / (2*pi*|Sigma_t|^(1/2))] with
///                 Sigma substituted by the identity before scaling.
/// Pose-adaptive:  same form with Sigma the covariance of this frame's GT
///                 keypoints. The exponent uses the plain (non-squared)
///                 Mahalanobis distance; at d_t = 0, a sqrt singularity, the
///                 gradient is defined as 0 (the minimizer).
inline LossValue pose_adaptive_loss(const Keypoints2D& gt, const Keypoints2D& pred, double t,
                                    const LossConfig& cfg) {
    for (int k = 0; k < kNumKeypoints; ++k)
        if (!gt[k].allFinite() || !pred[k].allFinite())
            throw NumericalError("non-finite keypoints in loss");
    cfg.validate();

    LossValue out;
    if (cfg.family == LossFamily::kMse) {
        double acc = 0.0;
        for (int k = 0; k < kNumKeypoints; ++k) {
            const Eigen::Vector2d d = pred[k] - gt[k];
            acc += d.squaredNorm();
            out.grad.segment<2>(2 * k) = 2.0 * d / (2.0 * kNumKeypoints);
        }
        out.loss = acc / (2.0 * kNumKeypoints);
        return out;
    }

    const Eigen::Matrix2d sigma = cfg.family == LossFamily::kGaussian
                                      ? Eigen::Matrix2d::Identity()
                                      : keypoint_covariance(gt).sigma;
    const ScaledCovariance sc = scaled_covariance(sigma, t, cfg);
    const double norm_const = 1.0 / (2.0 * kPi * std::sqrt(sc.det));

    for (int k = 0; k < kNumKeypoints; ++k) {
        const Eigen::Vector2d e = gt[k] - pred[k];
        const double d = mahalanobis_t(gt[k], pred[k], sc);
        const double g = norm_const * std::exp(-0.5 * d);
        out.loss += (1.0 - g) / kNumKeypoints;
        if (d > 0.0) {
            // dL_k/dpred = -(g/2) * Sigma_t^{-1} e / d, averaged over K
            out.grad.segment<2>(2 * k) = -(g / (2.0 * d * kNumKeypoints)) * (sc.sigma_t_inv * e);
        }
    }
    return out;
}

}  // namespace dronekey::losses
