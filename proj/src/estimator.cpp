// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/estimator.hpp"

#include <cmath>

namespace vcflow::estimator {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kRotaryBase = 10000.0;
constexpr double kTimeScale = 1000.0;  // t in [0,1] scaled before the sinusoid

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

// Row-wise layer norm without affine parameters; returns normalized rows and
// per-row inverse std.
void layernorm(const Mat& x, Mat& xhat, Vec& inv) {
    const Eigen::Index L = x.rows(), h = x.cols();
    xhat.resize(L, h);
    inv.resize(L);
    for (Eigen::Index r = 0; r < L; ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().mean();
        double iv = 1.0 / std::sqrt(var + kLnEps);
        inv[r] = iv;
        xhat.row(r) = (x.row(r).array() - mu) * iv;
    }
}

Mat layernorm_backward(const Mat& dy, const Mat& xhat, const Vec& inv) {
    const Eigen::Index L = dy.rows();
    Mat dx(L, dy.cols());
    for (Eigen::Index r = 0; r < L; ++r) {
        double mean_dy = dy.row(r).mean();
        double mean_dyx = dy.row(r).cwiseProduct(xhat.row(r)).mean();
        dx.row(r) = inv[r] * (dy.row(r).array() - mean_dy - xhat.row(r).array() * mean_dyx);
    }
    return dx;
}

// In-place rotary position rotation over each head's (2j, 2j+1) pairs.
// sign = +1 forward, -1 adjoint.
void apply_rotary(Mat& x, int n_heads, double sign) {
    const int L = static_cast<int>(x.rows());
    const int h = static_cast<int>(x.cols());
    const int hd = h / n_heads;
    const int half = hd / 2;
    for (int pos = 0; pos < L; ++pos) {
        for (int j = 0; j < half; ++j) {
            double freq = std::pow(kRotaryBase, -2.0 * j / hd);
            double angle = sign * pos * freq;
            double c = std::cos(angle), s = std::sin(angle);
            for (int head = 0; head < n_heads; ++head) {
                int base = head * hd + 2 * j;
                double a = x(pos, base), b = x(pos, base + 1);
                x(pos, base) = a * c - b * s;
                x(pos, base + 1) = a * s + b * c;
            }
        }
    }
}

inline void add_linear_grads(GradStore& grads, const Tensor& w, const Tensor& b, const Mat& input,
                             const Mat& dout) {
    grads.of(w).noalias() += input.transpose() * dout;
    grads.of(b).row(0) += dout.colwise().sum();
}

}  // namespace

EstimatorConfig EstimatorConfig::toy(int in_width, int out_width, int K) {
    EstimatorConfig c;
    c.n_layers = 4;
    c.n_heads = 4;
    c.hidden = 128;
    c.ffn = 256;
    c.in_width = in_width;
    c.out_width = out_width;
    c.max_d_levels = K;
    return c;
}

EstimatorConfig EstimatorConfig::paper(int in_width, int out_width, int K) {
    EstimatorConfig c;
    c.n_layers = 12;
    c.n_heads = 8;
    c.ffn = 768;
    c.in_width = in_width;
    c.out_width = out_width;
    c.max_d_levels = K;
    c.hidden = 0;  // solved below
    c.hidden = solve_hidden_for_target(100'000'000, c);
    return c;
}

void EstimatorConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || hidden < 1 || ffn < 1 || in_width < 1 || out_width < 1)
        throw ConfigError("estimator dims must be >= 1");
    if (hidden % n_heads != 0) throw ConfigError("hidden must be divisible by n_heads");
    if ((hidden / n_heads) % 2 != 0) throw ConfigError("head dim must be even for rotary pairs");
    if (max_d_levels < 0) throw ConfigError("max_d_levels must be >= 0");
}

int64_t count_params(const EstimatorConfig& cfg) {
    const int64_t h = cfg.hidden, f = cfg.ffn;
    int64_t total = 0;
    total += static_cast<int64_t>(cfg.in_width) * h + h;  // input projection
    total += 2 * h * h + 2 * h;                           // t-mlp
    total += static_cast<int64_t>(cfg.max_d_levels + 2) * h;
    total += cfg.n_layers * (10 * h * h + 2 * h * f + 11 * h + f);
    total += 2 * h * h + 2 * h;                           // final modulation
    total += h * cfg.out_width + cfg.out_width;           // output projection
    return total;
}

int solve_hidden_for_target(int64_t target, EstimatorConfig cfg) {
    int best = cfg.n_heads;
    int64_t best_err = std::numeric_limits<int64_t>::max();
    for (int h = cfg.n_heads; h <= 8192; h += cfg.n_heads) {
        if ((h / cfg.n_heads) % 2 != 0) continue;
        cfg.hidden = h;
        int64_t err = std::llabs(count_params(cfg) - target);
        if (err < best_err) {
            best_err = err;
            best = h;
        }
    }
    return best;
}

Estimator::Estimator(const EstimatorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int h = cfg_.hidden, f = cfg_.ffn;

    auto mk = [](const std::string& name, int r, int c) { return Tensor{name, Mat::Zero(r, c)}; };
    w_in = mk("est.w_in", cfg_.in_width, h);
    b_in = mk("est.b_in", 1, h);
    t_w1 = mk("est.t_w1", h, h);
    t_b1 = mk("est.t_b1", 1, h);
    t_w2 = mk("est.t_w2", h, h);
    t_b2 = mk("est.t_b2", 1, h);
    d_table = mk("est.d_table", cfg_.max_d_levels + 2, h);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "est.block" + std::to_string(l) + ".";
        Block b;
        b.w_mod = mk(p + "w_mod", h, 6 * h);
        b.b_mod = mk(p + "b_mod", 1, 6 * h);
        b.w_q = mk(p + "w_q", h, h);
        b.b_q = mk(p + "b_q", 1, h);
        b.w_k = mk(p + "w_k", h, h);
        b.b_k = mk(p + "b_k", 1, h);
        b.w_v = mk(p + "w_v", h, h);
        b.b_v = mk(p + "b_v", 1, h);
        b.w_o = mk(p + "w_o", h, h);
        b.b_o = mk(p + "b_o", 1, h);
        b.w_f1 = mk(p + "w_f1", h, f);
        b.b_f1 = mk(p + "b_f1", 1, f);
        b.w_f2 = mk(p + "w_f2", f, h);
        b.b_f2 = mk(p + "b_f2", 1, h);
        blocks.push_back(std::move(b));
    }
    f_mod_w = mk("est.f_mod_w", h, 2 * h);
    f_mod_b = mk("est.f_mod_b", 1, 2 * h);
    w_out = mk("est.w_out", h, cfg_.out_width);
    b_out = mk("est.b_out", 1, cfg_.out_width);

    // Init: lecun for plain linears; modulation and output projections stay
    // zero so the network is the identity with zero velocity at start.
    init_lecun(w_in, rng);
    init_lecun(t_w1, rng);
    init_lecun(t_w2, rng);
    init_gaussian(d_table, rng, 0.02);
    for (Block& b : blocks) {
        init_lecun(b.w_q, rng);
        init_lecun(b.w_k, rng);
        init_lecun(b.w_v, rng);
        init_lecun(b.w_o, rng);
        init_lecun(b.w_f1, rng);
        init_lecun(b.w_f2, rng);
    }
}

void Estimator::register_params(ParamRegistry& reg) {
    reg.add(w_in);
    reg.add(b_in);
    reg.add(t_w1);
    reg.add(t_b1);
    reg.add(t_w2);
    reg.add(t_b2);
    reg.add(d_table);
    for (Block& b : blocks) {
        reg.add(b.w_mod);
        reg.add(b.b_mod);
        reg.add(b.w_q);
        reg.add(b.b_q);
        reg.add(b.w_k);
        reg.add(b.b_k);
        reg.add(b.w_v);
        reg.add(b.b_v);
        reg.add(b.w_o);
        reg.add(b.b_o);
        reg.add(b.w_f1);
        reg.add(b.b_f1);
        reg.add(b.w_f2);
        reg.add(b.b_f2);
    }
    reg.add(f_mod_w);
    reg.add(f_mod_b);
    reg.add(w_out);
    reg.add(b_out);
}

void Estimator::randomize_all(Rng& rng, double std) {
    ParamRegistry reg;
    register_params(reg);
    for (Tensor* t : reg.items()) init_gaussian(*t, rng, std);
}

int Estimator::d_index(double d) const {
    if (d == 0.0) return cfg_.max_d_levels + 1;
    if (d > 0.0 && d <= 1.0) {
        double lvl = std::log2(1.0 / d);
        int k = static_cast<int>(std::lround(lvl));
        if (k >= 0 && k <= cfg_.max_d_levels && std::abs(std::ldexp(1.0, -k) - d) < 1e-12) return k;
    }
    throw GridError("step size " + std::to_string(d) + " is not 0 or 2^-k with k <= " +
                    std::to_string(cfg_.max_d_levels));
}

Vec Estimator::sinusoidal(double t) const {
    const int h = cfg_.hidden;
    const int half = h / 2;
    Vec emb(h);
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(kRotaryBase) * i / half);
        double arg = t * kTimeScale * freq;
        emb[i] = std::sin(arg);
        emb[half + i] = std::cos(arg);
    }
    return emb;
}

Mat Estimator::forward(const Mat& m, double t, double d) const {
    Ctx ctx;
    return forward_ctx(m, t, d, ctx);
}

Mat Estimator::forward_ctx(const Mat& m, double t, double d, Ctx& ctx) const {
    if (m.cols() != cfg_.in_width)
        throw ShapeError("estimator input width " + std::to_string(m.cols()) + " expected " +
                         std::to_string(cfg_.in_width));
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("estimator: t must lie in [0, 1]");
    if (!m.allFinite()) throw NumericError("estimator input contains non-finite values");

    const int h = cfg_.hidden;
    const int n_heads = cfg_.n_heads;
    const int hd = h / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    ctx.m_in = m;
    ctx.t = t;
    ctx.d_idx = d_index(d);

    // Conditioning vector from t and d.
    ctx.sin_emb = sinusoidal(t);
    ctx.t_a1 = (ctx.sin_emb.transpose() * t_w1.w + t_b1.w.row(0)).transpose();
    ctx.t_h1 = ctx.t_a1.unaryExpr([](double x) { return silu(x); });
    Vec t_out = (ctx.t_h1.transpose() * t_w2.w + t_b2.w.row(0)).transpose();
    ctx.cond = t_out + d_table.w.row(ctx.d_idx).transpose();
    ctx.cond_silu = ctx.cond.unaryExpr([](double x) { return silu(x); });

    Mat x;
    x.noalias() = m * w_in.w;
    x.rowwise() += b_in.w.row(0);
    ctx.x0 = x;

    ctx.blocks.clear();
    ctx.blocks.resize(blocks.size());
    for (size_t l = 0; l < blocks.size(); ++l) {
        const Block& blk = blocks[l];
        BlockCtx& bc = ctx.blocks[l];
        bc.x_in = x;

        bc.mod = (ctx.cond_silu.transpose() * blk.w_mod.w + blk.b_mod.w.row(0)).transpose();
        Vec sh1 = bc.mod.segment(0, h);
        Vec one_sc1 = bc.mod.segment(h, h).array() + 1.0;
        Vec g1 = bc.mod.segment(2 * h, h);
        Vec sh2 = bc.mod.segment(3 * h, h);
        Vec one_sc2 = bc.mod.segment(4 * h, h).array() + 1.0;
        Vec g2 = bc.mod.segment(5 * h, h);

        layernorm(x, bc.xhat1, bc.inv1);
        bc.h1 = bc.xhat1 * one_sc1.asDiagonal();
        bc.h1.rowwise() += sh1.transpose();

        bc.q.noalias() = bc.h1 * blk.w_q.w;
        bc.q.rowwise() += blk.b_q.w.row(0);
        bc.k.noalias() = bc.h1 * blk.w_k.w;
        bc.k.rowwise() += blk.b_k.w.row(0);
        bc.v.noalias() = bc.h1 * blk.w_v.w;
        bc.v.rowwise() += blk.b_v.w.row(0);
        apply_rotary(bc.q, n_heads, 1.0);
        apply_rotary(bc.k, n_heads, 1.0);

        const int L = static_cast<int>(x.rows());
        bc.attn_cat.resize(L, h);
        bc.probs.assign(static_cast<size_t>(n_heads), Mat());
        for (int head = 0; head < n_heads; ++head) {
            auto qh = bc.q.middleCols(head * hd, hd);
            auto kh = bc.k.middleCols(head * hd, hd);
            auto vh = bc.v.middleCols(head * hd, hd);
            Mat scores;
            scores.noalias() = qh * kh.transpose();
            scores *= att_scale;
            Mat& P = bc.probs[static_cast<size_t>(head)];
            P.resize(L, L);
            for (int r = 0; r < L; ++r) {
                double mx = scores.row(r).maxCoeff();
                P.row(r) = (scores.row(r).array() - mx).exp();
                P.row(r) /= P.row(r).sum();
            }
            bc.attn_cat.middleCols(head * hd, hd).noalias() = P * vh;
        }
        bc.attn_out.noalias() = bc.attn_cat * blk.w_o.w;
        bc.attn_out.rowwise() += blk.b_o.w.row(0);

        bc.x_mid = x + bc.attn_out * g1.asDiagonal();

        layernorm(bc.x_mid, bc.xhat2, bc.inv2);
        bc.h2 = bc.xhat2 * one_sc2.asDiagonal();
        bc.h2.rowwise() += sh2.transpose();

        bc.a1.noalias() = bc.h2 * blk.w_f1.w;
        bc.a1.rowwise() += blk.b_f1.w.row(0);
        bc.f1 = bc.a1.unaryExpr([](double u) { return gelu(u); });
        bc.f2.noalias() = bc.f1 * blk.w_f2.w;
        bc.f2.rowwise() += blk.b_f2.w.row(0);

        x = bc.x_mid + bc.f2 * g2.asDiagonal();
    }

    ctx.mod_f = (ctx.cond_silu.transpose() * f_mod_w.w + f_mod_b.w.row(0)).transpose();
    Vec shf = ctx.mod_f.segment(0, h);
    Vec one_scf = ctx.mod_f.segment(h, h).array() + 1.0;
    layernorm(x, ctx.xhat_f, ctx.inv_f);
    ctx.y_f = ctx.xhat_f * one_scf.asDiagonal();
    ctx.y_f.rowwise() += shf.transpose();

    Mat out;
    out.noalias() = ctx.y_f * w_out.w;
    out.rowwise() += b_out.w.row(0);
    if (!out.allFinite()) throw NumericError("estimator produced non-finite output");
    return out;
}

Mat Estimator::backward(const Ctx& ctx, const Mat& dv, GradStore& grads, bool want_input_grad) const {
    const int h = cfg_.hidden;
    const int n_heads = cfg_.n_heads;
    const int hd = h / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Vec dcond_silu = Vec::Zero(h);

    // Output projection and final modulated norm.
    add_linear_grads(grads, w_out, b_out, ctx.y_f, dv);
    Mat dy;
    dy.noalias() = dv * w_out.w.transpose();

    Vec one_scf = ctx.mod_f.segment(h, h).array() + 1.0;
    Eigen::VectorXd dmod_f(2 * h);
    dmod_f.segment(0, h) = dy.colwise().sum().transpose();
    dmod_f.segment(h, h) = dy.cwiseProduct(ctx.xhat_f).colwise().sum().transpose();
    Mat dxhat_f = dy * one_scf.asDiagonal();
    Mat dx = layernorm_backward(dxhat_f, ctx.xhat_f, ctx.inv_f);

    grads.of(f_mod_w).noalias() += ctx.cond_silu * dmod_f.transpose();
    grads.of(f_mod_b).row(0) += dmod_f.transpose();
    dcond_silu.noalias() += f_mod_w.w * dmod_f;

    for (int l = static_cast<int>(blocks.size()) - 1; l >= 0; --l) {
        const Block& blk = blocks[l];
        const BlockCtx& bc = ctx.blocks[static_cast<size_t>(l)];
        Vec one_sc1 = bc.mod.segment(h, h).array() + 1.0;
        Vec g1 = bc.mod.segment(2 * h, h);
        Vec one_sc2 = bc.mod.segment(4 * h, h).array() + 1.0;
        Vec g2 = bc.mod.segment(5 * h, h);
        Eigen::VectorXd dmod = Eigen::VectorXd::Zero(6 * h);

        // x_out = x_mid + f2 .* g2
        Mat df2 = dx * g2.asDiagonal();
        dmod.segment(5 * h, h) = dx.cwiseProduct(bc.f2).colwise().sum().transpose();
        add_linear_grads(grads, blk.w_f2, blk.b_f2, bc.f1, df2);
        Mat df1;
        df1.noalias() = df2 * blk.w_f2.w.transpose();
        Mat da1 = df1.cwiseProduct(bc.a1.unaryExpr([](double u) { return gelu_grad(u); }));
        add_linear_grads(grads, blk.w_f1, blk.b_f1, bc.h2, da1);
        Mat dh2;
        dh2.noalias() = da1 * blk.w_f1.w.transpose();

        dmod.segment(3 * h, h) = dh2.colwise().sum().transpose();
        dmod.segment(4 * h, h) = dh2.cwiseProduct(bc.xhat2).colwise().sum().transpose();
        Mat dxhat2 = dh2 * one_sc2.asDiagonal();
        Mat dx_mid = dx + layernorm_backward(dxhat2, bc.xhat2, bc.inv2);

        // x_mid = x_in + attn_out .* g1
        Mat dattn_out = dx_mid * g1.asDiagonal();
        dmod.segment(2 * h, h) = dx_mid.cwiseProduct(bc.attn_out).colwise().sum().transpose();
        add_linear_grads(grads, blk.w_o, blk.b_o, bc.attn_cat, dattn_out);
        Mat dattn_cat;
        dattn_cat.noalias() = dattn_out * blk.w_o.w.transpose();

        Mat dq = Mat::Zero(dx.rows(), h), dk = Mat::Zero(dx.rows(), h), dvv = Mat::Zero(dx.rows(), h);
        for (int head = 0; head < n_heads; ++head) {
            const Mat& P = bc.probs[static_cast<size_t>(head)];
            auto dao = dattn_cat.middleCols(head * hd, hd);
            auto qh = bc.q.middleCols(head * hd, hd);
            auto kh = bc.k.middleCols(head * hd, hd);
            auto vh = bc.v.middleCols(head * hd, hd);
            Mat dP;
            dP.noalias() = dao * vh.transpose();
            dvv.middleCols(head * hd, hd).noalias() = P.transpose() * dao;
            Vec rowsum = dP.cwiseProduct(P).rowwise().sum();
            dP.colwise() -= rowsum;
            Mat dS = P.cwiseProduct(dP);
            dq.middleCols(head * hd, hd).noalias() = dS * kh * att_scale;
            dk.middleCols(head * hd, hd).noalias() = dS.transpose() * qh * att_scale;
        }
        apply_rotary(dq, n_heads, -1.0);
        apply_rotary(dk, n_heads, -1.0);

        Mat dh1 = Mat::Zero(dx.rows(), h);
        add_linear_grads(grads, blk.w_q, blk.b_q, bc.h1, dq);
        add_linear_grads(grads, blk.w_k, blk.b_k, bc.h1, dk);
        add_linear_grads(grads, blk.w_v, blk.b_v, bc.h1, dvv);
        dh1.noalias() += dq * blk.w_q.w.transpose();
        dh1.noalias() += dk * blk.w_k.w.transpose();
        dh1.noalias() += dvv * blk.w_v.w.transpose();

        dmod.segment(0, h) = dh1.colwise().sum().transpose();
        dmod.segment(h, h) = dh1.cwiseProduct(bc.xhat1).colwise().sum().transpose();
        Mat dxhat1 = dh1 * one_sc1.asDiagonal();
        dx = dx_mid + layernorm_backward(dxhat1, bc.xhat1, bc.inv1);

        grads.of(blk.w_mod).noalias() += ctx.cond_silu * dmod.transpose();
        grads.of(blk.b_mod).row(0) += dmod.transpose();
        dcond_silu.noalias() += blk.w_mod.w * dmod;
    }

    // Input projection.
    grads.of(w_in).noalias() += ctx.m_in.transpose() * dx;
    grads.of(b_in).row(0) += dx.colwise().sum();

    // Conditioning path.
    Vec dcond = dcond_silu.cwiseProduct(ctx.cond.unaryExpr([](double u) { return silu_grad(u); }));
    grads.of(d_table).row(ctx.d_idx) += dcond.transpose();
    grads.of(t_w2).noalias() += ctx.t_h1 * dcond.transpose();
    grads.of(t_b2).row(0) += dcond.transpose();
    Vec dth = t_w2.w * dcond;
    Vec dta = dth.cwiseProduct(ctx.t_a1.unaryExpr([](double u) { return silu_grad(u); }));
    grads.of(t_w1).noalias() += ctx.sin_emb * dta.transpose();
    grads.of(t_b1).row(0) += dta.transpose();

    if (!want_input_grad) return Mat();
    Mat dm;
    dm.noalias() = dx * w_in.w.transpose();
    return dm;
}

}  // namespace vcflow::estimator
