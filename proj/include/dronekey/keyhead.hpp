#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dronekey/common.hpp"
#include "dronekey/synth.hpp"
#include "dronekey/types.hpp"

namespace dronekey::keyhead {

inline constexpr int kOutCoords = 2 * kNumKeypoints;  // 2K

struct Hyperparams {
    int dim = 64;    // embedding dimension d
    int heads = 4;   // attention heads h
    int layers = 6;  // encoder layers N
    int patch = 8;   // patch size, px

    void validate() const {
        if (dim <= 0 || heads <= 0 || layers <= 0 || patch <= 0)
            throw DataError("model hyperparameters must be positive");
        if (dim % heads != 0) throw DataError("dim must be divisible by heads");
        if (dim % 4 != 0) throw DataError("dim must be divisible by 4 for 2D positional encoding");
    }
};

struct AttentionLayer {
    Eigen::MatrixXd wq, wk, wv, wo;  // d x d, stored (out x in)
    Eigen::VectorXd bq, bk, bv, bo;
    Eigen::MatrixXd w1, w2;  // 4d x d and d x 4d feed-forward
    Eigen::VectorXd b1, b2;
    Eigen::VectorXd ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

/// All trainable parameters of the toy encoder + keypoint head.
struct EncoderModel {
    Hyperparams hp;
    Eigen::MatrixXd patch_embed_w;  // d x patch^2
    Eigen::VectorXd patch_embed_b;  // d
    std::vector<AttentionLayer> layers;
    std::vector<Eigen::MatrixXd> cr_w;  // per layer, 2K x d
    std::vector<Eigen::VectorXd> cr_b;  // per layer, 2K
    Eigen::MatrixXd gate_w;             // N x d
    Eigen::VectorXd gate_b;             // N

    EncoderModel zeros_like() const {
        EncoderModel z;
        z.hp = hp;
        z.patch_embed_w = Eigen::MatrixXd::Zero(patch_embed_w.rows(), patch_embed_w.cols());
        z.patch_embed_b = Eigen::VectorXd::Zero(patch_embed_b.size());
        z.layers.resize(layers.size());
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& a = layers[l];
            auto& b = z.layers[l];
            b.wq = Eigen::MatrixXd::Zero(a.wq.rows(), a.wq.cols());
            b.wk = Eigen::MatrixXd::Zero(a.wk.rows(), a.wk.cols());
            b.wv = Eigen::MatrixXd::Zero(a.wv.rows(), a.wv.cols());
            b.wo = Eigen::MatrixXd::Zero(a.wo.rows(), a.wo.cols());
            b.bq = Eigen::VectorXd::Zero(a.bq.size());
            b.bk = Eigen::VectorXd::Zero(a.bk.size());
            b.bv = Eigen::VectorXd::Zero(a.bv.size());
            b.bo = Eigen::VectorXd::Zero(a.bo.size());
            b.w1 = Eigen::MatrixXd::Zero(a.w1.rows(), a.w1.cols());
            b.w2 = Eigen::MatrixXd::Zero(a.w2.rows(), a.w2.cols());
            b.b1 = Eigen::VectorXd::Zero(a.b1.size());
            b.b2 = Eigen::VectorXd::Zero(a.b2.size());
            b.ln1_gamma = Eigen::VectorXd::Zero(a.ln1_gamma.size());
            b.ln1_beta = Eigen::VectorXd::Zero(a.ln1_beta.size());
            b.ln2_gamma = Eigen::VectorXd::Zero(a.ln2_gamma.size());
            b.ln2_beta = Eigen::VectorXd::Zero(a.ln2_beta.size());
        }
        z.cr_w.resize(cr_w.size());
        z.cr_b.resize(cr_b.size());
        for (std::size_t l = 0; l < cr_w.size(); ++l) {
            z.cr_w[l] = Eigen::MatrixXd::Zero(cr_w[l].rows(), cr_w[l].cols());
            z.cr_b[l] = Eigen::VectorXd::Zero(cr_b[l].size());
        }
        z.gate_w = Eigen::MatrixXd::Zero(gate_w.rows(), gate_w.cols());
        z.gate_b = Eigen::VectorXd::Zero(gate_b.size());
        return z;
    }
};

struct ParamView {
    std::string name;
    double* data;
    std::ptrdiff_t size;
};

/// Fixed-order traversal of every trainable tensor; the optimizer, the
/// checkpoint format, and the finite-difference checks all share it.
inline std::vector<ParamView> param_views(EncoderModel& m) {
    std::vector<ParamView> out;
    auto add = [&out](const std::string& name, auto& t) {
        out.push_back({name, t.data(), t.size()});
    };
    add("patch_embed.w", m.patch_embed_w);
    add("patch_embed.b", m.patch_embed_b);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l + 1) + ".";
        auto& a = m.layers[l];
        add(p + "ln1.gamma", a.ln1_gamma);
        add(p + "ln1.beta", a.ln1_beta);
        add(p + "attn.q.w", a.wq);
        add(p + "attn.q.b", a.bq);
        add(p + "attn.k.w", a.wk);
        add(p + "attn.k.b", a.bk);
        add(p + "attn.v.w", a.wv);
        add(p + "attn.v.b", a.bv);
        add(p + "attn.out.w", a.wo);
        add(p + "attn.out.b", a.bo);
        add(p + "ln2.gamma", a.ln2_gamma);
        add(p + "ln2.beta", a.ln2_beta);
        add(p + "ffn.w1", a.w1);
        add(p + "ffn.b1", a.b1);
        add(p + "ffn.w2", a.w2);
        add(p + "ffn.b2", a.b2);
    }
    for (std::size_t l = 0; l < m.cr_w.size(); ++l) {
        add("cr_proj." + std::to_string(l + 1) + ".w", m.cr_w[l]);
        add("cr_proj." + std::to_string(l + 1) + ".b", m.cr_b[l]);
    }
    add("gate_proj.w", m.gate_w);
    add("gate_proj.b", m.gate_b);
    return out;
}

inline std::size_t param_count(const EncoderModel& m) {
    std::size_t n = 0;
    for (const auto& v : param_views(const_cast<EncoderModel&>(m))) n += static_cast<std::size_t>(v.size);
    return n;
}

/// Xavier-uniform weights, zero biases, unit layer-norm gains. cr_bias_init
/// seeds the compact-representation biases so the untrained head predicts at
/// a chosen pixel (e.g. the image center) instead of sitting on the ReLU kink
/// at zero.
inline EncoderModel init_model(const Hyperparams& hp, std::uint64_t seed,
                               const Eigen::Vector2d& cr_bias_init = Eigen::Vector2d::Zero()) {
    hp.validate();
    EncoderModel m;
    m.hp = hp;
    Rng rng = Rng(seed).fork(0x696e6974);

    auto xavier = [&rng](int rows, int cols) {
        const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
        Eigen::MatrixXd w(rows, cols);
        for (int c = 0; c < cols; ++c)
            for (int r = 0; r < rows; ++r) w(r, c) = rng.uniform(-lim, lim);
        return w;
    };

    const int d = hp.dim;
    m.patch_embed_w = xavier(d, hp.patch * hp.patch);
    m.patch_embed_b = Eigen::VectorXd::Zero(d);
    m.layers.resize(static_cast<std::size_t>(hp.layers));
    for (auto& a : m.layers) {
        a.wq = xavier(d, d);
        a.wk = xavier(d, d);
        a.wv = xavier(d, d);
        a.wo = xavier(d, d);
        a.bq = Eigen::VectorXd::Zero(d);
        a.bk = Eigen::VectorXd::Zero(d);
        a.bv = Eigen::VectorXd::Zero(d);
        a.bo = Eigen::VectorXd::Zero(d);
        a.w1 = xavier(4 * d, d);
        a.w2 = xavier(d, 4 * d);
        a.b1 = Eigen::VectorXd::Zero(4 * d);
        a.b2 = Eigen::VectorXd::Zero(d);
        a.ln1_gamma = Eigen::VectorXd::Ones(d);
        a.ln1_beta = Eigen::VectorXd::Zero(d);
        a.ln2_gamma = Eigen::VectorXd::Ones(d);
        a.ln2_beta = Eigen::VectorXd::Zero(d);
    }
    m.cr_w.resize(static_cast<std::size_t>(hp.layers));
    m.cr_b.resize(static_cast<std::size_t>(hp.layers));
    Eigen::VectorXd cr_bias(kOutCoords);
    for (int k = 0; k < kNumKeypoints; ++k) {
        cr_bias(2 * k) = cr_bias_init.x();
        cr_bias(2 * k + 1) = cr_bias_init.y();
    }
    for (int l = 0; l < hp.layers; ++l) {
        m.cr_w[static_cast<std::size_t>(l)] = xavier(kOutCoords, d);
        m.cr_b[static_cast<std::size_t>(l)] = cr_bias;
    }
    m.gate_w = xavier(hp.layers, d);
    m.gate_b = Eigen::VectorXd::Zero(hp.layers);
    return m;
}

struct TokenGrid {
    Eigen::MatrixXd tokens;  // P x d
    int grid_h = 0, grid_w = 0;
};

/// 2D sinusoidal table: first d/2 dims encode the column, second half the
/// row, each as interleaved sin/cos over geometric frequencies.
inline Eigen::MatrixXd positional_encoding(int grid_h, int grid_w, int d) {
    if (d % 4 != 0) throw DataError("positional encoding requires dim divisible by 4");
    const int half = d / 2;
    Eigen::MatrixXd pe(grid_h * grid_w, d);
    for (int r = 0; r < grid_h; ++r) {
        for (int c = 0; c < grid_w; ++c) {
            const int p = r * grid_w + c;
            for (int i = 0; i < half / 2; ++i) {
                const double freq = std::pow(10000.0, -2.0 * i / half);
                pe(p, 2 * i) = std::sin(c * freq);
                pe(p, 2 * i + 1) = std::cos(c * freq);
                pe(p, half + 2 * i) = std::sin(r * freq);
                pe(p, half + 2 * i + 1) = std::cos(r * freq);
            }
        }
    }
    return pe;
}

/// Non-overlapping patches, row-major over the grid and within each patch.
inline Eigen::MatrixXd extract_patches(const synth::RasterImage& img, int patch) {
    if (patch <= 0 || img.width % patch != 0 || img.height % patch != 0)
        throw DataError("patch size must divide image dimensions");
    const int gh = img.height / patch, gw = img.width / patch;
    Eigen::MatrixXd out(gh * gw, patch * patch);
    for (int gr = 0; gr < gh; ++gr)
        for (int gc = 0; gc < gw; ++gc)
            for (int pr = 0; pr < patch; ++pr)
                for (int pc = 0; pc < patch; ++pc)
                    out(gr * gw + gc, pr * patch + pc) = img.at(gr * patch + pr, gc * patch + pc);
    return out;
}

inline TokenGrid embed_patches(const Eigen::MatrixXd& patches, const EncoderModel& m, int grid_h,
                               int grid_w) {
    if (patches.cols() != m.patch_embed_w.cols())
        throw DataError("patch dimension does not match the model");
    TokenGrid tg;
    tg.grid_h = grid_h;
    tg.grid_w = grid_w;
    tg.tokens = patches * m.patch_embed_w.transpose();
    tg.tokens.rowwise() += m.patch_embed_b.transpose();
    tg.tokens += positional_encoding(grid_h, grid_w, m.hp.dim);
    return tg;
}

/// x_p^(0) = PE(x_p) + x_p: flatten patches, embed linearly, add the table.
inline TokenGrid tokenize(const synth::RasterImage& img, const EncoderModel& m) {
    const Eigen::MatrixXd patches = extract_patches(img, m.hp.patch);
    return embed_patches(patches, m, img.height / m.hp.patch, img.width / m.hp.patch);
}

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
    return cdf + x * pdf;
}

constexpr double kLnEps = 1e-5;

struct LayerNormTrace {
    Eigen::MatrixXd xhat;   // normalized rows
    Eigen::VectorXd istd;   // per-row 1/sqrt(var+eps)
    Eigen::MatrixXd out;
};

inline LayerNormTrace layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gamma,
                                 const Eigen::VectorXd& beta) {
    LayerNormTrace t;
    const auto n = static_cast<double>(x.cols());
    t.xhat.resize(x.rows(), x.cols());
    t.istd.resize(x.rows());
    t.out.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().sum() / n;
        const double istd = 1.0 / std::sqrt(var + kLnEps);
        t.istd(r) = istd;
        t.xhat.row(r) = (x.row(r).array() - mean) * istd;
        t.out.row(r) = t.xhat.row(r).array() * gamma.transpose().array() + beta.transpose().array();
    }
    return t;
}

/// Returns dL/dx; accumulates parameter gradients.
inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const LayerNormTrace& t,
                                           const Eigen::VectorXd& gamma, Eigen::VectorXd& dgamma,
                                           Eigen::VectorXd& dbeta) {
    const auto n = static_cast<double>(dy.cols());
    Eigen::MatrixXd dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        dgamma += (dy.row(r).array() * t.xhat.row(r).array()).matrix().transpose();
        dbeta += dy.row(r).transpose();
        const Eigen::ArrayXd dxhat = dy.row(r).transpose().array() * gamma.array();
        const double m1 = dxhat.sum() / n;
        const double m2 = (dxhat * t.xhat.row(r).transpose().array()).sum() / n;
        dx.row(r) = (t.istd(r) * (dxhat - m1 - t.xhat.row(r).transpose().array() * m2)).matrix().transpose();
    }
    return dx;
}

}  // namespace detail

struct LayerTrace {
    Eigen::MatrixXd input;  // X^(l-1), P x d
    detail::LayerNormTrace ln1;
    Eigen::MatrixXd q, k, v;                // P x d
    std::vector<Eigen::MatrixXd> attn;      // per-head softmax, P x P
    Eigen::MatrixXd attn_concat;            // heads concatenated, P x d
    Eigen::MatrixXd x1;                     // input + attention branch
    detail::LayerNormTrace ln2;
    Eigen::MatrixXd ff_pre;  // P x 4d
    Eigen::MatrixXd out;     // X_EN^(l)
};

struct ForwardTrace {
    Eigen::MatrixXd patches;  // P x patch^2, tokenizer input
    TokenGrid tokens;         // x^(0) after embedding + PE
    std::vector<LayerTrace> layers;
    std::vector<Eigen::VectorXd> ir;  // X_IR^(l), d
    std::vector<Eigen::VectorXd> cr;  // X_CR^(l), 2K
    Eigen::VectorXd gate_logits;      // N
    Eigen::VectorXd gate;             // w_gate, simplex
    Eigen::VectorXd pre_relu;         // X_G, 2K
    Eigen::VectorXd prediction;       // y_pred = ReLU(X_G)

    Keypoints2D predicted_keypoints() const {
        Eigen::Matrix<double, kOutCoords, 1> v = prediction;
        return Keypoints2D::from_flat(v);
    }
};

namespace detail {

inline void encoder_layer_forward(const AttentionLayer& a, int heads, LayerTrace& t) {
    const Eigen::Index p = t.input.rows();
    const Eigen::Index d = t.input.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    t.ln1 = layer_norm(t.input, a.ln1_gamma, a.ln1_beta);
    t.q = t.ln1.out * a.wq.transpose();
    t.q.rowwise() += a.bq.transpose();
    t.k = t.ln1.out * a.wk.transpose();
    t.k.rowwise() += a.bk.transpose();
    t.v = t.ln1.out * a.wv.transpose();
    t.v.rowwise() += a.bv.transpose();

    t.attn.assign(static_cast<std::size_t>(heads), Eigen::MatrixXd());
    t.attn_concat.resize(p, d);
    for (int h = 0; h < heads; ++h) {
        const auto qh = t.q.middleCols(h * dh, dh);
        const auto kh = t.k.middleCols(h * dh, dh);
        const auto vh = t.v.middleCols(h * dh, dh);
        Eigen::MatrixXd scores = scale * (qh * kh.transpose());
        for (Eigen::Index r = 0; r < p; ++r) {
            const double mx = scores.row(r).maxCoeff();
            Eigen::ArrayXd e = (scores.row(r).array() - mx).exp();
            scores.row(r) = (e / e.sum()).matrix().transpose();
        }
        t.attn[static_cast<std::size_t>(h)] = scores;
        t.attn_concat.middleCols(h * dh, dh) = scores * vh;
    }

    Eigen::MatrixXd attn_out = t.attn_concat * a.wo.transpose();
    attn_out.rowwise() += a.bo.transpose();
    t.x1 = t.input + attn_out;

    t.ln2 = layer_norm(t.x1, a.ln2_gamma, a.ln2_beta);
    t.ff_pre = t.ln2.out * a.w1.transpose();
    t.ff_pre.rowwise() += a.b1.transpose();
    Eigen::MatrixXd act = t.ff_pre.unaryExpr([](double x) { return gelu(x); });
    Eigen::MatrixXd ff_out = act * a.w2.transpose();
    ff_out.rowwise() += a.b2.transpose();
    t.out = t.x1 + ff_out;
}

/// Returns dL/d(input); accumulates this layer's parameter gradients.
inline Eigen::MatrixXd encoder_layer_backward(const AttentionLayer& a, int heads,
                                              const LayerTrace& t, const Eigen::MatrixXd& dout,
                                              AttentionLayer& g) {
    const Eigen::Index d = t.input.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // feed-forward branch
    Eigen::MatrixXd act = t.ff_pre.unaryExpr([](double x) { return gelu(x); });
    const Eigen::MatrixXd& df2 = dout;
    g.w2 += df2.transpose() * act;
    g.b2 += df2.colwise().sum().transpose();
    Eigen::MatrixXd dact = df2 * a.w2;
    Eigen::MatrixXd df1 =
        dact.array() * t.ff_pre.unaryExpr([](double x) { return gelu_grad(x); }).array();
    g.w1 += df1.transpose() * t.ln2.out;
    g.b1 += df1.colwise().sum().transpose();
    Eigen::MatrixXd dln2_out = df1 * a.w1;
    Eigen::MatrixXd dx1 = layer_norm_backward(dln2_out, t.ln2, a.ln2_gamma, g.ln2_gamma, g.ln2_beta);
    dx1 += dout;  // residual

    // attention branch
    const Eigen::MatrixXd& dattn_out = dx1;
    g.wo += dattn_out.transpose() * t.attn_concat;
    g.bo += dattn_out.colwise().sum().transpose();
    Eigen::MatrixXd dconcat = dattn_out * a.wo;

    Eigen::MatrixXd dq(t.q.rows(), d), dk(t.k.rows(), d), dv(t.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const auto& attn = t.attn[static_cast<std::size_t>(h)];
        const auto qh = t.q.middleCols(h * dh, dh);
        const auto kh = t.k.middleCols(h * dh, dh);
        const auto vh = t.v.middleCols(h * dh, dh);
        const auto doh = dconcat.middleCols(h * dh, dh);

        Eigen::MatrixXd dattn = doh * vh.transpose();
        dv.middleCols(h * dh, dh) = attn.transpose() * doh;

        Eigen::MatrixXd dscores(attn.rows(), attn.cols());
        for (Eigen::Index r = 0; r < attn.rows(); ++r) {
            const double dot = dattn.row(r).dot(attn.row(r));
            dscores.row(r) = (attn.row(r).array() * (dattn.row(r).array() - dot)).matrix();
        }
        dq.middleCols(h * dh, dh) = scale * (dscores * kh);
        dk.middleCols(h * dh, dh) = scale * (dscores.transpose() * qh);
    }

    g.wq += dq.transpose() * t.ln1.out;
    g.bq += dq.colwise().sum().transpose();
    g.wk += dk.transpose() * t.ln1.out;
    g.bk += dk.colwise().sum().transpose();
    g.wv += dv.transpose() * t.ln1.out;
    g.bv += dv.colwise().sum().transpose();

    Eigen::MatrixXd dln1_out = dq * a.wq + dk * a.wk + dv * a.wv;
    Eigen::MatrixXd dinput = layer_norm_backward(dln1_out, t.ln1, a.ln1_gamma, g.ln1_gamma, g.ln1_beta);
    dinput += dx1;  // residual
    return dinput;
}

}  // namespace detail

/// Runs the N pre-norm self-attention layers, keeping the full trace in
/// `trace.layers`; used by both the public encoder_forward and the training
/// path.
inline void encoder_forward_traced(const TokenGrid& tokens, const EncoderModel& m,
                                   ForwardTrace& trace) {
    if (tokens.tokens.cols() != m.hp.dim) throw DataError("token dimension does not match model");
    trace.tokens = tokens;
    trace.layers.assign(static_cast<std::size_t>(m.hp.layers), LayerTrace{});
    const Eigen::MatrixXd* x = &trace.tokens.tokens;
    for (int l = 0; l < m.hp.layers; ++l) {
        auto& lt = trace.layers[static_cast<std::size_t>(l)];
        lt.input = *x;
        detail::encoder_layer_forward(m.layers[static_cast<std::size_t>(l)], m.hp.heads, lt);
        if (!lt.out.allFinite())
            throw NumericalError("non-finite activation in encoder layer " + std::to_string(l + 1));
        x = &lt.out;
    }
}

/// All N per-layer outputs X_EN^(1..N).
inline std::vector<Eigen::MatrixXd> encoder_forward(const TokenGrid& tokens, const EncoderModel& m) {
    ForwardTrace trace;
    encoder_forward_traced(tokens, m, trace);
    std::vector<Eigen::MatrixXd> out;
    out.reserve(trace.layers.size());
    for (auto& lt : trace.layers) out.push_back(lt.out);
    return out;
}

/// Keypoint head on top of the encoder outputs:
///   X_IR^(l) = mean over tokens,
///   X_CR^(l) = W_l X_IR^(l) + b_l,
///   w_gate   = softmax(W^g X_IR^(N) + b^g),
///   X_G      = sum_l w_gate^(l) X_CR^(l),
///   y_pred   = ReLU(X_G).
inline void head_forward_traced(const EncoderModel& m, ForwardTrace& trace) {
    const int n = m.hp.layers;
    if (static_cast<int>(trace.layers.size()) != n) throw DataError("trace does not match model");
    trace.ir.assign(static_cast<std::size_t>(n), Eigen::VectorXd());
    trace.cr.assign(static_cast<std::size_t>(n), Eigen::VectorXd());
    for (int l = 0; l < n; ++l) {
        const auto& out = trace.layers[static_cast<std::size_t>(l)].out;
        trace.ir[static_cast<std::size_t>(l)] =
            out.colwise().mean().transpose();
        trace.cr[static_cast<std::size_t>(l)] =
            m.cr_w[static_cast<std::size_t>(l)] * trace.ir[static_cast<std::size_t>(l)] +
            m.cr_b[static_cast<std::size_t>(l)];
    }
    trace.gate_logits = m.gate_w * trace.ir[static_cast<std::size_t>(n - 1)] + m.gate_b;
    const double mx = trace.gate_logits.maxCoeff();
    Eigen::ArrayXd e = (trace.gate_logits.array() - mx).exp();
    trace.gate = (e / e.sum()).matrix();

    trace.pre_relu = Eigen::VectorXd::Zero(kOutCoords);
    for (int l = 0; l < n; ++l)
        trace.pre_relu += trace.gate(l) * trace.cr[static_cast<std::size_t>(l)];
    trace.prediction = trace.pre_relu.cwiseMax(0.0);
}

/// Head on externally supplied encoder outputs (the spec-facing entry point).
inline ForwardTrace head_forward(const std::vector<Eigen::MatrixXd>& enc_outputs,
                                 const EncoderModel& m) {
    if (static_cast<int>(enc_outputs.size()) != m.hp.layers)
        throw DataError("expected one encoder output per layer");
    ForwardTrace trace;
    trace.layers.assign(enc_outputs.size(), LayerTrace{});
    for (std::size_t l = 0; l < enc_outputs.size(); ++l) trace.layers[l].out = enc_outputs[l];
    head_forward_traced(m, trace);
    return trace;
}

/// Full forward from pre-extracted patches (training path).
inline ForwardTrace forward_patches(const Eigen::MatrixXd& patches, const EncoderModel& m,
                                    int grid_h, int grid_w) {
    ForwardTrace trace;
    trace.patches = patches;
    const TokenGrid tg = embed_patches(patches, m, grid_h, grid_w);
    encoder_forward_traced(tg, m, trace);
    head_forward_traced(m, trace);
    return trace;
}

inline ForwardTrace forward(const synth::RasterImage& img, const EncoderModel& m) {
    return forward_patches(extract_patches(img, m.hp.patch), m,
                           img.height / m.hp.patch, img.width / m.hp.patch);
}

/// Exact reverse-mode gradients for every parameter, given dL/dy_pred.
/// Gradients flow through the gated sum into both the gate weights and every
/// layer's compact representation, and from each IR back into its encoder
/// layer.
inline EncoderModel backward(const ForwardTrace& trace, const EncoderModel& m,
                             const Eigen::Matrix<double, kOutCoords, 1>& loss_grad) {
    const int n = m.hp.layers;
    if (static_cast<int>(trace.layers.size()) != n || trace.ir.empty() ||
        trace.tokens.tokens.size() == 0 || trace.patches.size() == 0 ||
        trace.tokens.tokens.cols() != m.hp.dim)
        throw DataError("stale trace: does not match the model/forward pass");

    EncoderModel g = m.zeros_like();
    const auto p = static_cast<double>(trace.tokens.tokens.rows());

    // y = ReLU(X_G)
    Eigen::VectorXd dxg(kOutCoords);
    for (int i = 0; i < kOutCoords; ++i) dxg(i) = trace.pre_relu(i) > 0.0 ? loss_grad(i) : 0.0;

    // gated sum
    Eigen::VectorXd dgate(n);
    std::vector<Eigen::VectorXd> dir(static_cast<std::size_t>(n),
                                     Eigen::VectorXd::Zero(m.hp.dim));
    for (int l = 0; l < n; ++l) {
        const auto lu = static_cast<std::size_t>(l);
        dgate(l) = trace.cr[lu].dot(dxg);
        const Eigen::VectorXd dcr = trace.gate(l) * dxg;
        g.cr_w[lu] += dcr * trace.ir[lu].transpose();
        g.cr_b[lu] += dcr;
        dir[lu] += m.cr_w[lu].transpose() * dcr;
    }

    // softmax gate
    const double dot = dgate.dot(trace.gate);
    const Eigen::VectorXd dlogits = trace.gate.array() * (dgate.array() - dot);
    g.gate_w += dlogits * trace.ir[static_cast<std::size_t>(n - 1)].transpose();
    g.gate_b += dlogits;
    dir[static_cast<std::size_t>(n - 1)] += m.gate_w.transpose() * dlogits;

    // encoder stack; each layer output receives gradient from its IR and
    // from the next layer
    Eigen::MatrixXd dout =
        Eigen::MatrixXd::Ones(trace.tokens.tokens.rows(), 1) *
        (dir[static_cast<std::size_t>(n - 1)].transpose() / p);
    for (int l = n - 1; l >= 0; --l) {
        const auto lu = static_cast<std::size_t>(l);
        Eigen::MatrixXd din = detail::encoder_layer_backward(
            m.layers[lu], m.hp.heads, trace.layers[lu], dout, g.layers[lu]);
        if (l > 0) {
            dout = din + Eigen::MatrixXd::Ones(trace.tokens.tokens.rows(), 1) *
                             (dir[lu - 1].transpose() / p);
        } else {
            dout = din;
        }
    }

    // tokenizer (PE is a constant table)
    g.patch_embed_w += dout.transpose() * trace.patches;
    g.patch_embed_b += dout.colwise().sum().transpose();
    return g;
}

/// Mean gate weight per layer over a dataset; rows sum to 1.
inline Eigen::VectorXd dump_gate_weights(const EncoderModel& m, const SequenceDataset& ds) {
    if (ds.records.empty()) throw DataError("gate-weight dump needs a non-empty dataset");
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(m.hp.layers);
    for (const auto& rec : ds.records) {
        const auto img = synth::render_frame(rec.kp2d_gt, rec.intrinsics, m.hp.patch);
        const auto trace = forward(img, m);
        acc += trace.gate;
    }
    return acc / static_cast<double>(ds.records.size());
}

inline constexpr const char* kCheckpointFormat = "dronekey-checkpoint-v1";

inline void save_checkpoint(const EncoderModel& m, const std::string& path) {
    nlohmann::ordered_json j;
    j["format"] = kCheckpointFormat;
    j["hyperparams"] = {{"dim", m.hp.dim}, {"heads", m.hp.heads},
                        {"layers", m.hp.layers}, {"patch", m.hp.patch}};
    nlohmann::ordered_json params;
    for (const auto& v : param_views(const_cast<EncoderModel&>(m))) {
        params[v.name] = std::vector<double>(v.data, v.data + v.size);
    }
    j["params"] = std::move(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << j.dump() << '\n';
    if (!out) throw DataError("write failed: " + path);
}

inline EncoderModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path);
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": parse error: " + e.what());
    }
    try {
        if (j.at("format").get<std::string>() != kCheckpointFormat)
            throw DataError("unsupported checkpoint format tag");
        Hyperparams hp;
        hp.dim = j.at("hyperparams").at("dim").get<int>();
        hp.heads = j.at("hyperparams").at("heads").get<int>();
        hp.layers = j.at("hyperparams").at("layers").get<int>();
        hp.patch = j.at("hyperparams").at("patch").get<int>();
        EncoderModel m = init_model(hp, 0);
        for (auto& v : param_views(m)) {
            const auto arr = j.at("params").at(v.name).get<std::vector<double>>();
            if (static_cast<std::ptrdiff_t>(arr.size()) != v.size)
                throw DataError("checkpoint tensor " + v.name + " has wrong size");
            std::copy(arr.begin(), arr.end(), v.data);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
}

}  // namespace dronekey::keyhead
