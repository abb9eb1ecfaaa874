// Command-line entry point for the DroneKey toolkit. Subcommands cover the
// full pipeline (generate -> train -> predict -> solve-pose -> smooth ->
// eval) plus gradcheck and gate-dump diagnostics.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dronekey/dronekey.hpp"

namespace dk = dronekey;
namespace fs = std::filesystem;

namespace {

bool g_quiet = false;

void info(const std::string& msg) {
    if (!g_quiet) std::cerr << msg << '\n';
}

struct GenerateOpts {
    dk::synth::TrajectoryConfig traj;
    double fx = 800.0, fy = 800.0, cx = 320.0, cy = 320.0;
    std::uint32_t width = 640, height = 640;
    double half_diagonal = 0.15;
    std::string sequence_id;
    std::string out;
};

dk::CameraIntrinsics intrinsics_from(const GenerateOpts& o) {
    dk::CameraIntrinsics intr;
    intr.fx = o.fx;
    intr.fy = o.fy;
    intr.cx = o.cx;
    intr.cy = o.cy;
    intr.width = o.width;
    intr.height = o.height;
    if (!intr.valid()) throw dk::DataError("invalid camera intrinsics");
    return intr;
}

void run_generate(const GenerateOpts& o) {
    const auto intr = intrinsics_from(o);
    const auto model = dk::ObjectModel3D::square(o.half_diagonal);
    const auto ds = dk::synth::generate_dataset(o.traj, model, intr, o.sequence_id);
    dk::save_dataset(ds, o.out);
    info("wrote " + std::to_string(ds.records.size()) + " records to " + o.out);
}

struct TrainOpts {
    std::string data, config, out, log;
};

dk::keyhead::Hyperparams hyperparams_from_json(const nlohmann::ordered_json& j) {
    dk::keyhead::Hyperparams hp;
    if (j.contains("dim")) hp.dim = j.at("dim").get<int>();
    if (j.contains("heads")) hp.heads = j.at("heads").get<int>();
    if (j.contains("layers")) hp.layers = j.at("layers").get<int>();
    if (j.contains("patch")) hp.patch = j.at("patch").get<int>();
    hp.validate();
    return hp;
}

void run_train(const TrainOpts& o) {
    std::ifstream in(o.config);
    if (!in) throw dk::DataError("cannot open config: " + o.config);
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw dk::DataError(o.config + ": parse error: " + e.what());
    }
    auto cfg = dk::trainer::train_config_from_json(j);
    if (!o.out.empty()) cfg.checkpoint_path = o.out;
    if (!o.log.empty()) cfg.log_path = o.log;

    const auto ds = dk::load_dataset(o.data);
    if (ds.records.empty()) throw dk::DataError("training dataset is empty");

    dk::keyhead::Hyperparams hp;
    if (j.contains("model")) hp = hyperparams_from_json(j.at("model"));
    const auto& intr = ds.records.front().intrinsics;
    const Eigen::Vector2d center(static_cast<double>(intr.width) / 2.0,
                                 static_cast<double>(intr.height) / 2.0);
    auto model = dk::keyhead::init_model(hp, dk::splitmix64(cfg.seed ^ 0x6d6f64656c), center);

    const auto result = dk::trainer::train(ds, std::move(model), cfg);
    info("trained " + std::to_string(cfg.epochs) + " epochs; final loss " +
         std::to_string(result.log.back().loss));
}

struct PredictOpts {
    std::string data, ckpt, out;
};

void run_predict(const PredictOpts& o) {
    const auto ds = dk::load_dataset(o.data);
    const auto model = dk::keyhead::load_checkpoint(o.ckpt);
    const auto preds = dk::trainer::predict(ds, model);
    std::vector<std::uint64_t> ids;
    ids.reserve(ds.records.size());
    for (const auto& rec : ds.records) ids.push_back(rec.frame_id);
    dk::save_keypoint_predictions(ids, preds, o.out);
    info("wrote " + std::to_string(preds.size()) + " predictions to " + o.out);
}

struct SolvePoseOpts {
    std::string data, pred, out;
    bool use_gt = false;
    bool use_obs = false;
    bool hold_on_failure = false;
};

std::vector<dk::PoseRecord> solve_poses(const dk::SequenceDataset& ds,
                                        const std::vector<dk::Keypoints2D>& kps,
                                        bool hold_on_failure) {
    std::vector<dk::PoseRecord> rows;
    rows.reserve(ds.records.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& rec = ds.records[i];
        dk::PoseRecord row;
        row.frame_id = rec.frame_id;
        try {
            const auto sol = dk::pose3d::solve_pnp(kps[i], rec.model, rec.intrinsics);
            const auto cam_pts = dk::pose3d::camera_frame_keypoints(rec.model, sol.pose);
            const auto [r_kp, t_kp] = dk::pose3d::rotation_from_keypoints(cam_pts);
            row.pose = {r_kp * dk::pose3d::keypoint_frame_rotation(rec.model).transpose(), t_kp};
            row.reproj_rmse = sol.reprojection_rmse;
            row.converged = sol.converged;
        } catch (const dk::NumericalError&) {
            if (!hold_on_failure || rows.empty()) throw;
            // hold the previous pose and mark the frame unconverged
            row.pose = rows.back().pose;
            row.converged = false;
            double cost = 0.0;
            for (int k = 0; k < dk::kNumKeypoints; ++k) {
                const Eigen::Vector3d p = row.pose.apply(rec.model[k]);
                if (p.z() > 1e-9)
                    cost += (dk::pinhole_project(rec.intrinsics, p) - kps[i][k]).squaredNorm();
            }
            row.reproj_rmse = std::sqrt(cost / dk::kNumKeypoints);
        }
        rows.push_back(row);
    }
    return rows;
}

std::vector<dk::Keypoints2D> keypoints_for_solve(const dk::SequenceDataset& ds,
                                                 const SolvePoseOpts& o) {
    std::vector<dk::Keypoints2D> kps;
    kps.reserve(ds.records.size());
    if (o.use_gt || o.use_obs) {
        for (const auto& rec : ds.records) kps.push_back(o.use_gt ? rec.kp2d_gt : rec.kp2d_obs);
        return kps;
    }
    const auto preds = dk::load_keypoint_predictions(o.pred);
    if (preds.size() != ds.records.size())
        throw dk::DataError("prediction file does not cover every dataset frame");
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].first != ds.records[i].frame_id)
            throw dk::DataError("prediction frame_id mismatch at row " + std::to_string(i));
        kps.push_back(preds[i].second);
    }
    return kps;
}

void run_solve_pose(const SolvePoseOpts& o) {
    if (static_cast<int>(o.use_gt) + static_cast<int>(o.use_obs) + static_cast<int>(!o.pred.empty()) != 1)
        throw dk::DataError("choose exactly one keypoint source: --pred, --use-gt or --use-obs");
    const auto ds = dk::load_dataset(o.data);
    const auto kps = keypoints_for_solve(ds, o);
    const auto rows = solve_poses(ds, kps, o.hold_on_failure);
    dk::save_pose_records(rows, o.out);
    info("wrote " + std::to_string(rows.size()) + " poses to " + o.out);
}

struct SmoothOpts {
    std::string in, out;
    dk::tracking::NoiseParams np;
    bool no_filter_rotation = false;
};

void run_smooth(const SmoothOpts& o) {
    auto rows = dk::load_pose_records(o.in);
    if (rows.empty()) throw dk::DataError("no poses to smooth in " + o.in);
    std::vector<dk::Pose6DoF> poses;
    poses.reserve(rows.size());
    for (const auto& r : rows) poses.push_back(r.pose);
    const auto smoothed = dk::tracking::smooth_sequence(poses, o.np, !o.no_filter_rotation);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].pose = smoothed[i];
    dk::save_pose_records(rows, o.out);
    info("smoothed " + std::to_string(rows.size()) + " poses to " + o.out);
}

struct EvalOpts {
    std::vector<std::string> data;
    std::string pred, out;
};

dk::SequenceDataset load_merged(const std::vector<std::string>& paths) {
    dk::SequenceDataset merged;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        auto ds = dk::load_dataset(paths[i]);
        if (i == 0) merged.meta = ds.meta;
        merged.records.insert(merged.records.end(), ds.records.begin(), ds.records.end());
    }
    return merged;
}

void write_report(const nlohmann::ordered_json& j, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw dk::DataError("cannot open for writing: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw dk::DataError("write failed: " + path);
}

void run_eval_kp(const EvalOpts& o) {
    const auto ds = load_merged(o.data);
    const auto preds = dk::load_keypoint_predictions(o.pred);
    if (preds.size() != ds.records.size()) throw dk::DataError("predictions missing frames");
    std::vector<dk::Keypoints2D> kps;
    kps.reserve(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].first != ds.records[i].frame_id)
            throw dk::DataError("prediction frame_id mismatch at row " + std::to_string(i));
        kps.push_back(preds[i].second);
    }
    const auto rep = dk::metrics::evaluate(ds, &kps, nullptr);
    write_report(dk::metrics::report_to_json(rep), o.out);
    info("sr90=" + std::to_string(rep.kp->sr90) + " sr95=" + std::to_string(rep.kp->sr95) +
         " ap=" + std::to_string(rep.kp->ap));
}

void run_eval_pose(const EvalOpts& o) {
    const auto ds = load_merged(o.data);
    const auto rows = dk::load_pose_records(o.pred);
    if (rows.size() != ds.records.size()) throw dk::DataError("pose predictions missing frames");
    std::vector<dk::Pose6DoF> poses;
    poses.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].frame_id != ds.records[i].frame_id)
            throw dk::DataError("pose frame_id mismatch at row " + std::to_string(i));
        poses.push_back(rows[i].pose);
    }
    const auto rep = dk::metrics::evaluate(ds, nullptr, &poses);
    write_report(dk::metrics::report_to_json(rep), o.out);
    info("mae_angle=" + std::to_string(rep.pose->mae_angle_deg) + " rmse=" +
         std::to_string(rep.pose->rmse_m) + " mae=" + std::to_string(rep.pose->mae_m));
}

struct GradcheckOpts {
    int configs = 100;
    std::uint64_t seed = 2024;
};

int run_gradcheck(const GradcheckOpts& o) {
    const auto loss_res = dk::gradcheck::check_loss_gradients(o.configs, o.seed);
    std::printf("loss gradients:    max rel err %.3e (abs %.3e) at %s\n", loss_res.max_rel_err,
                loss_res.max_abs_err, loss_res.worst.c_str());
    const auto net_res = dk::gradcheck::check_network_gradients();
    std::printf("network gradients: max rel err %.3e (abs %.3e) at %s\n", net_res.max_rel_err,
                net_res.max_abs_err, net_res.worst.c_str());
    const double worst = std::max(loss_res.max_rel_err, net_res.max_rel_err);
    std::printf("max relative error: %.3e\n", worst);
    return worst <= 1e-5 ? 0 : 3;
}

struct GateDumpOpts {
    std::string ckpt, data, out;
};

void run_gate_dump(const GateDumpOpts& o) {
    const auto model = dk::keyhead::load_checkpoint(o.ckpt);
    const auto ds = dk::load_dataset(o.data);
    const Eigen::VectorXd mean_gate = dk::keyhead::dump_gate_weights(model, ds);
    std::ofstream out(o.out, std::ios::binary);
    if (!out) throw dk::DataError("cannot open for writing: " + o.out);
    out << "layer,mean_gate\n";
    char buf[64];
    for (int l = 0; l < mean_gate.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g\n", l + 1, mean_gate(l));
        out << buf;
    }
    info("wrote gate weights for " + std::to_string(mean_gate.size()) + " layers to " + o.out);
}

struct PipelineOpts {
    std::string out_dir;
    std::uint64_t seed = 7;
    int frames = 24;
    bool translation = true, rotation = true, nonlinear = false;
    double sigma = 0.0;
    int epochs = 40, batch_size = 4;
    double learning_rate = 0.02;
    int dim = 32, heads = 4, layers = 3, patch = 8;
};

void run_pipeline(const PipelineOpts& o) {
    fs::create_directories(o.out_dir);
    const auto path = [&](const char* name) { return (fs::path(o.out_dir) / name).string(); };

    // stage 1: synthetic data at a trainable desk-scale resolution
    GenerateOpts gen;
    gen.traj.n_frames = o.frames;
    gen.traj.translation = o.translation;
    gen.traj.rotation = o.rotation;
    gen.traj.nonlinear = o.nonlinear;
    gen.traj.sigma_px = o.sigma;
    gen.traj.seed = o.seed;
    gen.traj.depth_min = 0.8;
    gen.traj.depth_max = 1.6;
    gen.fx = gen.fy = 80.0;
    gen.cx = gen.cy = 32.0;
    gen.width = gen.height = 64;
    gen.sequence_id = "pipeline";
    gen.out = path("dataset.jsonl");
    run_generate(gen);
    const auto ds = dk::load_dataset(gen.out);

    // stage 2: train
    dk::trainer::TrainConfig tcfg;
    tcfg.epochs = o.epochs;
    tcfg.batch_size = o.batch_size;
    tcfg.learning_rate = o.learning_rate;
    tcfg.seed = o.seed;
    tcfg.checkpoint_path = path("checkpoint.json");
    tcfg.log_path = path("train_log.csv");
    dk::keyhead::Hyperparams hp{o.dim, o.heads, o.layers, o.patch};
    const Eigen::Vector2d center(32.0, 32.0);
    auto model = dk::keyhead::init_model(hp, dk::splitmix64(o.seed ^ 0x6d6f64656c), center);
    info("training " + std::to_string(o.epochs) + " epochs on " +
         std::to_string(ds.records.size()) + " frames");
    auto result = dk::trainer::train(ds, std::move(model), tcfg);

    // stage 3: predict
    const auto preds = dk::trainer::predict(ds, result.model);
    std::vector<std::uint64_t> ids;
    for (const auto& rec : ds.records) ids.push_back(rec.frame_id);
    dk::save_keypoint_predictions(ids, preds, path("pred_kp.jsonl"));

    // stage 4: geometric pose recovery from the predictions
    const auto pose_rows = solve_poses(ds, preds, /*hold_on_failure=*/true);
    dk::save_pose_records(pose_rows, path("poses_raw.jsonl"));

    // stage 5: Kalman smoothing
    std::vector<dk::Pose6DoF> raw_poses;
    for (const auto& r : pose_rows) raw_poses.push_back(r.pose);
    const auto smoothed = dk::tracking::smooth_sequence(raw_poses, dk::tracking::NoiseParams{});
    auto smooth_rows = pose_rows;
    for (std::size_t i = 0; i < smooth_rows.size(); ++i) smooth_rows[i].pose = smoothed[i];
    dk::save_pose_records(smooth_rows, path("poses_smoothed.jsonl"));

    // stage 6: gate-weight dump + combined report
    const Eigen::VectorXd mean_gate = dk::keyhead::dump_gate_weights(result.model, ds);
    {
        std::ofstream out(path("gate_weights.csv"), std::ios::binary);
        out << "layer,mean_gate\n";
        char buf[64];
        for (int l = 0; l < mean_gate.size(); ++l) {
            std::snprintf(buf, sizeof(buf), "%d,%.17g\n", l + 1, mean_gate(l));
            out << buf;
        }
    }

    const auto rep_kp_pose = dk::metrics::evaluate(ds, &preds, &smoothed);
    const auto rep_raw = dk::metrics::evaluate(ds, nullptr, &raw_poses);
    nlohmann::ordered_json report = dk::metrics::report_to_json(rep_kp_pose);
    report["raw_pose"] = dk::metrics::report_to_json(rep_raw);
    write_report(report, path("report.json"));
    info("pipeline complete; report at " + path("report.json"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DroneKey: drone keypoint detection and 6DoF pose estimation toolkit"};
    app.require_subcommand(1);
    std::uint64_t global_seed = 0;
    int threads = 1;
    app.add_option("--seed", global_seed, "default seed for seedable subcommands");
    app.add_option("--threads", threads, "worker threads (execution is currently single-threaded)");
    app.add_flag("--quiet", g_quiet, "suppress progress messages");

    GenerateOpts gen;
    auto* cgen = app.add_subcommand("generate", "generate a synthetic drone sequence");
    cgen->add_option("--frames", gen.traj.n_frames, "number of frames")->capture_default_str();
    cgen->add_flag("--translation,!--no-translation", gen.traj.translation, "translate over time");
    cgen->add_flag("--rotation,!--no-rotation", gen.traj.rotation, "rotate over time");
    cgen->add_flag("--nonlinear,!--no-nonlinear", gen.traj.nonlinear, "curved translation path");
    cgen->add_option("--sigma", gen.traj.sigma_px, "observation noise std, px")->capture_default_str();
    cgen->add_option("--seed", gen.traj.seed, "generator seed");
    cgen->add_option("--depth-min", gen.traj.depth_min, "m")->capture_default_str();
    cgen->add_option("--depth-max", gen.traj.depth_max, "m")->capture_default_str();
    cgen->add_option("--angular-rate", gen.traj.angular_rate_max_deg, "deg/frame")->capture_default_str();
    cgen->add_option("--fx", gen.fx)->capture_default_str();
    cgen->add_option("--fy", gen.fy)->capture_default_str();
    cgen->add_option("--cx", gen.cx)->capture_default_str();
    cgen->add_option("--cy", gen.cy)->capture_default_str();
    cgen->add_option("--width", gen.width)->capture_default_str();
    cgen->add_option("--height", gen.height)->capture_default_str();
    cgen->add_option("--half-diagonal", gen.half_diagonal, "propeller half-diagonal, m")
        ->capture_default_str();
    cgen->add_option("--sequence-id", gen.sequence_id, "sequence id (default seq-<seed>)");
    cgen->add_option("--out", gen.out, "output JSONL path")->required();

    TrainOpts train_opts;
    auto* ctrain = app.add_subcommand("train", "train the keypoint model");
    ctrain->add_option("--data", train_opts.data)->required();
    ctrain->add_option("--config", train_opts.config, "training config JSON")->required();
    ctrain->add_option("--out", train_opts.out, "checkpoint path");
    ctrain->add_option("--log", train_opts.log, "CSV log path (epoch,loss,scale)");

    PredictOpts pred_opts;
    auto* cpred = app.add_subcommand("predict", "run keypoint inference over a dataset");
    cpred->add_option("--data", pred_opts.data)->required();
    cpred->add_option("--ckpt", pred_opts.ckpt)->required();
    cpred->add_option("--out", pred_opts.out)->required();

    SolvePoseOpts sp;
    auto* csolve = app.add_subcommand("solve-pose", "recover 6DoF poses from keypoints");
    csolve->add_option("--data", sp.data)->required();
    csolve->add_option("--pred", sp.pred, "keypoint predictions JSONL");
    csolve->add_flag("--use-gt", sp.use_gt, "solve from ground-truth keypoints");
    csolve->add_flag("--use-obs", sp.use_obs, "solve from observed (noisy) keypoints");
    csolve->add_flag("--hold-on-failure", sp.hold_on_failure,
                     "keep the previous pose on per-frame solver failure");
    csolve->add_option("--out", sp.out)->required();

    SmoothOpts sm;
    auto* csmooth = app.add_subcommand("smooth", "Kalman-smooth a pose sequence");
    csmooth->add_option("--in", sm.in)->required();
    csmooth->add_option("--out", sm.out)->required();
    csmooth->add_option("--q-pos", sm.np.q_pos, "m^2/frame^2")->capture_default_str();
    csmooth->add_option("--q-rot", sm.np.q_rot, "rad^2/frame^2")->capture_default_str();
    csmooth->add_option("--r-pos", sm.np.r_pos, "m^2")->capture_default_str();
    csmooth->add_option("--r-rot", sm.np.r_rot, "rad^2")->capture_default_str();
    csmooth->add_flag("--no-filter-rotation", sm.no_filter_rotation,
                      "pass rotations through unfiltered");

    EvalOpts ek;
    auto* cek = app.add_subcommand("eval-kp", "keypoint metrics (OKS, SR@90/95, AP)");
    cek->add_option("--data", ek.data)->required()->expected(-1);
    cek->add_option("--pred", ek.pred)->required();
    cek->add_option("--out", ek.out)->required();

    EvalOpts ep;
    auto* cep = app.add_subcommand("eval-pose", "6DoF metrics (MAE-angle, RMSE, MAE)");
    cep->add_option("--data", ep.data)->required()->expected(-1);
    cep->add_option("--pred", ep.pred)->required();
    cep->add_option("--out", ep.out)->required();

    GradcheckOpts gc;
    auto* cgc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    cgc->add_option("--configs", gc.configs)->capture_default_str();
    cgc->add_option("--seed", gc.seed)->capture_default_str();

    GateDumpOpts gd;
    auto* cgd = app.add_subcommand("gate-dump", "per-layer mean gate weights as CSV");
    cgd->add_option("--ckpt", gd.ckpt)->required();
    cgd->add_option("--data", gd.data)->required();
    cgd->add_option("--out", gd.out)->required();

    PipelineOpts pl;
    auto* cpl = app.add_subcommand("pipeline", "run generate/train/predict/solve/smooth/eval");
    cpl->add_option("--out-dir", pl.out_dir)->required();
    cpl->add_option("--seed", pl.seed)->capture_default_str();
    cpl->add_option("--frames", pl.frames)->capture_default_str();
    cpl->add_flag("--translation,!--no-translation", pl.translation);
    cpl->add_flag("--rotation,!--no-rotation", pl.rotation);
    cpl->add_flag("--nonlinear,!--no-nonlinear", pl.nonlinear);
    cpl->add_option("--sigma", pl.sigma)->capture_default_str();
    cpl->add_option("--epochs", pl.epochs)->capture_default_str();
    cpl->add_option("--batch-size", pl.batch_size)->capture_default_str();
    cpl->add_option("--learning-rate", pl.learning_rate)->capture_default_str();
    cpl->add_option("--dim", pl.dim)->capture_default_str();
    cpl->add_option("--heads", pl.heads)->capture_default_str();
    cpl->add_option("--layers", pl.layers)->capture_default_str();
    cpl->add_option("--patch", pl.patch)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (cgen->parsed()) {
            if (cgen->count("--seed") == 0 && app.count("--seed") > 0) gen.traj.seed = global_seed;
            run_generate(gen);
        } else if (ctrain->parsed()) {
            run_train(train_opts);
        } else if (cpred->parsed()) {
            run_predict(pred_opts);
        } else if (csolve->parsed()) {
            run_solve_pose(sp);
        } else if (csmooth->parsed()) {
            run_smooth(sm);
        } else if (cek->parsed()) {
            run_eval_kp(ek);
        } else if (cep->parsed()) {
            run_eval_pose(ep);
        } else if (cgc->parsed()) {
            return run_gradcheck(gc);
        } else if (cgd->parsed()) {
            run_gate_dump(gd);
        } else if (cpl->parsed()) {
            if (cpl->count("--seed") == 0 && app.count("--seed") > 0) pl.seed = global_seed;
            run_pipeline(pl);
        }
    } catch (const dk::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 2;
    } catch (const dk::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
    return 0;
}
