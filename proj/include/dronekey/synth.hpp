#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dronekey/types.hpp"

namespace dronekey::synth {

struct TrajectoryConfig {
    int n_frames = 100;
    bool translation = true;
    bool rotation = false;
    bool nonlinear = false;
    double depth_min = 2.0;             // m
    double depth_max = 6.0;             // m
    double angular_rate_max_deg = 2.0;  // deg/frame
    std::uint64_t seed = 0;
    double sigma_px = 0.0;

    void validate() const {
        if (n_frames < 1) throw DataError("n_frames must be >= 1");
        if (!(depth_min > 0.0) || !(depth_min < depth_max))
            throw DataError("depth range must satisfy 0 < min < max");
        if (sigma_px < 0.0) throw DataError("sigma_px must be >= 0");
        if (angular_rate_max_deg < 0.0) throw DataError("angular_rate_max must be >= 0");
    }
};

struct RasterImage {
    int width = 0, height = 0;
    std::vector<double> pixels;  // row-major grayscale in [0,1]
    bool clipped = false;        // some keypoint fell outside the frame

    double& at(int row, int col) { return pixels[static_cast<std::size_t>(row * width + col)]; }
    double at(int row, int col) const { return pixels[static_cast<std::size_t>(row * width + col)]; }
};

/// y_k = (fx*X/Z + cx, fy*Y/Z + cy), order preserved.
inline Keypoints2D project_keypoints(const ObjectModel3D& model, const Pose6DoF& pose,
                                     const CameraIntrinsics& intr) {
    Keypoints2D kp;
    for (int k = 0; k < kNumKeypoints; ++k) {
        const Eigen::Vector3d p = pose.apply(model[k]);
        if (p.z() <= 1e-9)
            throw NumericalError("keypoint " + std::to_string(k + 1) + " at or behind camera plane");
        kp[k] = pinhole_project(intr, p);
    }
    return kp;
}

namespace detail {

// Snapping linear-motion parameters to a dyadic grid makes t0 + k*v exactly
// representable for every frame index, so second differences of the
// trajectory are exactly zero.
inline double snap(double x) { return std::round(x * 1048576.0) / 1048576.0; }  // 2^20

struct SafeBox {
    double xlo, xhi, ylo, yhi, zlo, zhi;
};

/// Axis-aligned box of centroid positions that keeps the whole model inside
/// the image with a pixel margin and inside the configured depth band.
inline SafeBox safe_box(const TrajectoryConfig& cfg, const ObjectModel3D& model,
                        const CameraIntrinsics& intr, double margin_px) {
    const double r = model.max_radius();
    SafeBox b{};
    b.zlo = cfg.depth_min + r;
    b.zhi = cfg.depth_max - r;
    if (!(b.zlo < b.zhi))
        throw DataError("infeasible trajectory config: depth range cannot contain the model");
    // Lateral bounds are tightest at the smallest depth.
    const double z = b.zlo;
    b.xlo = (margin_px - intr.cx) / intr.fx * z + r;
    b.xhi = (static_cast<double>(intr.width) - margin_px - intr.cx) / intr.fx * z - r;
    b.ylo = (margin_px - intr.cy) / intr.fy * z + r;
    b.yhi = (static_cast<double>(intr.height) - margin_px - intr.cy) / intr.fy * z - r;
    if (!(b.xlo < b.xhi) || !(b.ylo < b.yhi))
        throw DataError("infeasible trajectory config: frustum cannot contain the model");
    return b;
}

inline bool pose_visible(const Pose6DoF& pose, const ObjectModel3D& model,
                         const CameraIntrinsics& intr, double depth_min, double margin_px) {
    for (int k = 0; k < kNumKeypoints; ++k) {
        const Eigen::Vector3d p = pose.apply(model[k]);
        if (p.z() < depth_min) return false;
        const Eigen::Vector2d y = pinhole_project(intr, p);
        if (y.x() < margin_px || y.x() > static_cast<double>(intr.width) - margin_px ||
            y.y() < margin_px || y.y() > static_cast<double>(intr.height) - margin_px)
            return false;
    }
    return true;
}

}  // namespace detail

/// Samples an n_frames 6DoF trajectory honoring the motion flags:
/// translation off -> constant t, rotation off -> constant R, nonlinear ->
/// superposed sinusoids instead of a constant-velocity line. Every pose keeps
/// the full model inside the frustum above the minimum depth.
inline std::vector<Pose6DoF> sample_trajectory(const TrajectoryConfig& cfg,
                                               const ObjectModel3D& model,
                                               const CameraIntrinsics& intr) {
    cfg.validate();
    const double margin_px = 8.0;
    const auto box = detail::safe_box(cfg, model, intr, margin_px);
    Rng rng = Rng(cfg.seed).fork(0x72616a);

    const int n = cfg.n_frames;
    const double rate = deg2rad(cfg.angular_rate_max_deg);

    // Base orientation: mild tilt about a horizontal axis plus an in-plane
    // spin. Rotating sequences precess the spin and breathe the tilt, which
    // keeps the propeller plane away from edge-on views.
    const double phi_axis = rng.uniform(0.0, 2.0 * kPi);
    const Eigen::Vector3d tilt_axis(std::cos(phi_axis), std::sin(phi_axis), 0.0);
    const double tilt0 = rng.uniform(deg2rad(5.0), deg2rad(25.0));
    const double psi0 = rng.uniform(0.0, 2.0 * kPi);

    double dpsi = 0.0, tilt_amp = 0.0, tilt_phase = 0.0;
    if (cfg.rotation && n > 1) {
        dpsi = 0.6 * rate * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        tilt_amp = std::min(deg2rad(15.0), 0.3 * rate * n / (2.0 * kPi));
        tilt_phase = rng.uniform(0.0, 2.0 * kPi);
    }

    auto rotation_at = [&](int k) {
        const double tilt = tilt0 + (cfg.rotation && n > 1
                                         ? tilt_amp * std::sin(2.0 * kPi * k / n + tilt_phase)
                                         : 0.0);
        const double psi = psi0 + dpsi * k;
        return so3::exp(tilt * tilt_axis) * so3::rot_z(psi);
    };
    const Eigen::Matrix3d r_const = rotation_at(0);

    for (int attempt = 0; attempt < 32; ++attempt) {
        const double shrink = std::pow(0.7, attempt);
        const double mx = 0.5 * (box.xlo + box.xhi), sx = 0.5 * (box.xhi - box.xlo) * shrink;
        const double my = 0.5 * (box.ylo + box.yhi), sy = 0.5 * (box.yhi - box.ylo) * shrink;
        const double mz = 0.5 * (box.zlo + box.zhi), sz = 0.5 * (box.zhi - box.zlo) * shrink;

        Rng r = rng.fork(static_cast<std::uint64_t>(attempt) + 1);
        const Eigen::Vector3d c(r.uniform(mx - 0.5 * sx, mx + 0.5 * sx),
                                r.uniform(my - 0.5 * sy, my + 0.5 * sy),
                                r.uniform(mz - 0.5 * sz, mz + 0.5 * sz));

        std::vector<Pose6DoF> poses(static_cast<std::size_t>(n));
        if (!cfg.translation || n == 1) {
            for (int k = 0; k < n; ++k) poses[static_cast<std::size_t>(k)].t = c;
        } else if (!cfg.nonlinear) {
            const Eigen::Vector3d e(r.uniform(mx - sx, mx + sx), r.uniform(my - sy, my + sy),
                                    r.uniform(mz - sz, mz + sz));
            Eigen::Vector3d t0, v;
            for (int i = 0; i < 3; ++i) {
                t0(i) = detail::snap(c(i));
                v(i) = detail::snap((e(i) - c(i)) / (n - 1));
            }
            for (int k = 0; k < n; ++k)
                poses[static_cast<std::size_t>(k)].t = t0 + static_cast<double>(k) * v;
        } else {
            Eigen::Vector3d a1, a2, p1, p2;
            for (int i = 0; i < 3; ++i) {
                const double room = (i == 0 ? sx : i == 1 ? sy : sz);
                a1(i) = r.uniform(0.2, 0.55) * room;
                a2(i) = r.uniform(0.1, 0.35) * room;
                p1(i) = r.uniform(0.0, 2.0 * kPi);
                p2(i) = r.uniform(0.0, 2.0 * kPi);
            }
            for (int k = 0; k < n; ++k) {
                const double s = static_cast<double>(k) / n;
                Eigen::Vector3d t;
                for (int i = 0; i < 3; ++i)
                    t(i) = c(i) + a1(i) * std::sin(2.0 * kPi * s + p1(i)) +
                           a2(i) * std::sin(4.0 * kPi * s + p2(i));
                poses[static_cast<std::size_t>(k)].t = t;
            }
        }

        for (int k = 0; k < n; ++k)
            poses[static_cast<std::size_t>(k)].R = cfg.rotation ? rotation_at(k) : r_const;

        bool ok = true;
        for (const auto& p : poses)
            if (!detail::pose_visible(p, model, intr, cfg.depth_min, margin_px)) ok = false;
        if (ok) return poses;
    }
    throw DataError("infeasible trajectory config: could not fit motion inside the frustum");
}

/// Deterministic toy rendering: one filled disk per propeller with per-index
/// intensity {0.4, 0.6, 0.8, 1.0} plus cross-arm segments between opposite
/// keypoints (1-3, 2-4) on a black background. Keypoints whose center falls
/// outside the frame are skipped and flagged.
inline RasterImage render_frame(const Keypoints2D& kp, const CameraIntrinsics& intr, int patch) {
    if (patch <= 0 || intr.width % static_cast<std::uint32_t>(patch) != 0 ||
        intr.height % static_cast<std::uint32_t>(patch) != 0)
        throw DataError("patch size must divide image width and height");

    RasterImage img;
    img.width = static_cast<int>(intr.width);
    img.height = static_cast<int>(intr.height);
    img.pixels.assign(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height), 0.0);

    auto in_frame = [&](const Eigen::Vector2d& p) {
        return p.x() >= 0.0 && p.x() < static_cast<double>(img.width) && p.y() >= 0.0 &&
               p.y() < static_cast<double>(img.height);
    };
    for (int k = 0; k < kNumKeypoints; ++k)
        if (!in_frame(kp[k])) img.clipped = true;

    double min_pair = std::numeric_limits<double>::infinity();
    for (int a = 0; a < kNumKeypoints; ++a)
        for (int b = a + 1; b < kNumKeypoints; ++b)
            min_pair = std::min(min_pair, (kp[a] - kp[b]).norm());
    const double radius = std::max(1.5, 0.22 * min_pair);

    auto plot = [&](int row, int col, double v) {
        if (row < 0 || row >= img.height || col < 0 || col >= img.width) return;
        img.at(row, col) = std::max(img.at(row, col), v);
    };

    // cross arms between opposite propellers
    const int arm_pairs[2][2] = {{0, 2}, {1, 3}};
    for (const auto& pair : arm_pairs) {
        const Eigen::Vector2d a = kp[pair[0]], b = kp[pair[1]];
        if (!in_frame(a) || !in_frame(b)) continue;
        const double len = (b - a).norm();
        const int steps = 2 * static_cast<int>(std::ceil(len)) + 1;
        for (int s = 0; s <= steps; ++s) {
            const Eigen::Vector2d p = a + (b - a) * (static_cast<double>(s) / steps);
            plot(static_cast<int>(std::floor(p.y())), static_cast<int>(std::floor(p.x())), 0.25);
        }
    }

    for (int k = 0; k < kNumKeypoints; ++k) {
        if (!in_frame(kp[k])) continue;
        const double level = 0.4 + 0.2 * k;
        const int r0 = static_cast<int>(std::floor(kp[k].y() - radius)) - 1;
        const int r1 = static_cast<int>(std::ceil(kp[k].y() + radius)) + 1;
        const int c0 = static_cast<int>(std::floor(kp[k].x() - radius)) - 1;
        const int c1 = static_cast<int>(std::ceil(kp[k].x() + radius)) + 1;
        for (int row = r0; row <= r1; ++row) {
            for (int col = c0; col <= c1; ++col) {
                const double dx = (col + 0.5) - kp[k].x();
                const double dy = (row + 0.5) - kp[k].y();
                if (dx * dx + dy * dy <= radius * radius) plot(row, col, level);
            }
        }
    }
    return img;
}

/// Adds i.i.d. Gaussian pixel noise per coordinate. sigma == 0 returns the
/// input bit-exactly.
inline Keypoints2D add_noise(const Keypoints2D& kp, double sigma_px, Rng& rng) {
    if (sigma_px < 0.0) throw DataError("sigma_px must be >= 0");
    if (sigma_px == 0.0) return kp;
    Keypoints2D out = kp;
    for (int k = 0; k < kNumKeypoints; ++k) {
        out[k].x() += sigma_px * rng.normal();
        out[k].y() += sigma_px * rng.normal();
    }
    return out;
}

inline SequenceDataset generate_dataset(const TrajectoryConfig& cfg, const ObjectModel3D& model,
                                        const CameraIntrinsics& intr,
                                        const std::string& sequence_id = "") {
    cfg.validate();
    const auto poses = sample_trajectory(cfg, model, intr);
    Rng noise_rng = Rng(cfg.seed).fork(0x6e6f6973);

    SequenceDataset ds;
    ds.meta = {cfg.seed, cfg.sigma_px, cfg.translation, cfg.rotation, cfg.nonlinear};
    ds.records.reserve(poses.size());
    const std::string seq = sequence_id.empty() ? "seq-" + std::to_string(cfg.seed) : sequence_id;
    for (std::size_t k = 0; k < poses.size(); ++k) {
        FrameRecord rec;
        rec.frame_id = k;
        rec.sequence_id = seq;
        rec.intrinsics = intr;
        rec.model = model;
        rec.pose = poses[k];
        rec.kp2d_gt = project_keypoints(model, poses[k], intr);
        rec.kp2d_obs = add_noise(rec.kp2d_gt, cfg.sigma_px, noise_rng);
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

}  // namespace dronekey::synth
