// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/fusion.hpp"

#include <algorithm>
#include <cmath>

namespace vcflow::fusion {

Mat pad_blank(const Mat& e, int L_target, double blank_value) {
    const int T = static_cast<int>(e.rows());
    if (T > L_target)
        throw AlignmentError("pad_blank: length " + std::to_string(T) + " exceeds target " +
                             std::to_string(L_target) + " (implicit alignment forbids truncation)");
    Mat out(L_target, e.cols());
    out.topRows(T) = e;
    if (L_target > T) out.bottomRows(L_target - T).setConstant(blank_value);
    return out;
}

Mat interpolate_align(const Mat& e, int L_target) {
    const int T = static_cast<int>(e.rows());
    if (T < 2) throw std::invalid_argument("interpolate_align: need at least 2 source frames");
    if (L_target < 1) throw std::invalid_argument("interpolate_align: bad target length");
    Mat out(L_target, e.cols());
    if (L_target == 1) {
        out.row(0) = e.row(0);
        return out;
    }
    const double scale = static_cast<double>(T - 1) / static_cast<double>(L_target - 1);
    for (int o = 0; o < L_target; ++o) {
        double src = o * scale;
        int i0 = std::min(static_cast<int>(std::floor(src)), T - 2);
        double w = src - i0;
        out.row(o) = (1.0 - w) * e.row(i0) + w * e.row(i0 + 1);
    }
    return out;
}

Mat interpolate_align_backward(const Mat& dy, int T_source) {
    const int L = static_cast<int>(dy.rows());
    Mat dx = Mat::Zero(T_source, dy.cols());
    if (L == 1) {
        dx.row(0) = dy.row(0);
        return dx;
    }
    const double scale = static_cast<double>(T_source - 1) / static_cast<double>(L - 1);
    for (int o = 0; o < L; ++o) {
        double src = o * scale;
        int i0 = std::min(static_cast<int>(std::floor(src)), T_source - 2);
        double w = src - i0;
        dx.row(i0) += (1.0 - w) * dy.row(o);
        dx.row(i0 + 1) += w * dy.row(o);
    }
    return dx;
}

CondSpec build_cond_train(const Mat& mel_target, Rng& rng) {
    return build_cond_train_with(mel_target, rng.uniform(0.7, 1.0), rng.uniform());
}

CondSpec build_cond_train_with(const Mat& mel_target, double fraction, double offset_u) {
    const int L = static_cast<int>(mel_target.rows());
    if (L < 4) throw std::invalid_argument("build_cond: need at least 4 frames");
    int span = std::clamp(static_cast<int>(std::lround(fraction * L)), 1, L);
    int max_off = L - span;
    int off = std::min(static_cast<int>(offset_u * (max_off + 1)), max_off);
    CondSpec c;
    c.x_cond = mel_target;
    c.mask.assign(static_cast<size_t>(L), 0);
    for (int f = off; f < off + span; ++f) {
        c.mask[static_cast<size_t>(f)] = 1;
        c.x_cond.row(f).setZero();
    }
    return c;
}

CondSpec build_cond_infer(const Mat& prompt_mel, int L, int D_m) {
    const int P = static_cast<int>(prompt_mel.rows());
    if (P > 0 && prompt_mel.cols() != D_m) throw ShapeError("build_cond: prompt mel width mismatch");
    if (P > L) throw std::invalid_argument("build_cond: prompt longer than total length");
    CondSpec c;
    c.prompt_len = P;
    c.x_cond = Mat::Zero(L, D_m);
    if (P > 0) c.x_cond.topRows(P) = prompt_mel;
    c.mask.assign(static_cast<size_t>(L), 0);
    for (int f = P; f < L; ++f) c.mask[static_cast<size_t>(f)] = 1;
    return c;
}

FusionInput fuse(const EncodedConditions& enc, const CondSpec& cond, const Mat& x_t, double t,
                 double d, const FusionDims& dims, AlignMode mode) {
    const int L = static_cast<int>(x_t.rows());
    if (enc.e_bnf.cols() != dims.H || enc.e_ssl.cols() != dims.H || enc.e_pitch.cols() != dims.H)
        throw ShapeError("fuse: encoder widths do not match configured H");
    if (x_t.cols() != dims.D_m || cond.x_cond.cols() != dims.D_m)
        throw ShapeError("fuse: mel channel widths do not match configured D_m");
    if (static_cast<int>(enc.e_pitch.rows()) != L)
        throw AlignmentError("fuse: e_pitch length " + std::to_string(enc.e_pitch.rows()) +
                             " must equal x_t length " + std::to_string(L));
    if (static_cast<int>(cond.x_cond.rows()) != L || static_cast<int>(cond.mask.size()) != L)
        throw ShapeError("fuse: x_cond length must equal x_t length");

    Mat bnf_aligned = mode == AlignMode::kImplicit ? pad_blank(enc.e_bnf, L)
                                                   : interpolate_align(enc.e_bnf, L);
    Mat ssl_aligned = mode == AlignMode::kImplicit ? pad_blank(enc.e_ssl, L)
                                                   : interpolate_align(enc.e_ssl, L);

    FusionInput fi;
    fi.L = L;
    fi.prompt_len = cond.prompt_len;
    fi.t = t;
    fi.d = d;
    fi.m.resize(L, dims.width());
    const int H = dims.H;
    fi.m.middleCols(0, H) = bnf_aligned;
    fi.m.middleCols(H, H) = ssl_aligned;
    fi.m.middleCols(2 * H, H) = enc.e_pitch;
    fi.m.middleCols(3 * H, dims.D_m) = cond.x_cond;
    fi.m.middleCols(3 * H + dims.D_m, dims.D_m) = x_t;
    return fi;
}

ChannelSlices slice(const Mat& m, const FusionDims& dims) {
    if (m.cols() != dims.width()) throw ShapeError("slice: channel width does not match config");
    ChannelSlices s;
    const int H = dims.H;
    s.e_bnf = m.middleCols(0, H);
    s.e_ssl = m.middleCols(H, H);
    s.e_pitch = m.middleCols(2 * H, H);
    s.x_cond = m.middleCols(3 * H, dims.D_m);
    s.x_t = m.middleCols(3 * H + dims.D_m, dims.D_m);
    return s;
}

StreamGrads split_input_grad(const Mat& dm, const FusionDims& dims, int T_c, AlignMode mode) {
    if (dm.cols() != dims.width()) throw ShapeError("split_input_grad: width mismatch");
    const int H = dims.H;
    StreamGrads g;
    if (mode == AlignMode::kImplicit) {
        g.d_e_bnf = dm.middleCols(0, H).topRows(T_c);
        g.d_e_ssl = dm.middleCols(H, H).topRows(T_c);
    } else {
        g.d_e_bnf = interpolate_align_backward(dm.middleCols(0, H), T_c);
        g.d_e_ssl = interpolate_align_backward(dm.middleCols(H, H), T_c);
    }
    g.d_e_pitch = dm.middleCols(2 * H, H);
    return g;
}

}  // namespace vcflow::fusion
