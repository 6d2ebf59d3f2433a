// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/shortcut.hpp"

#include <cmath>

namespace vcflow::shortcut {

bool StepGrid::valid_step(double d) const {
    if (!(d > 0.0 && d <= 1.0)) return false;
    int k = static_cast<int>(std::lround(std::log2(1.0 / d)));
    return k >= 0 && k <= K && std::abs(std::ldexp(1.0, -k) - d) < 1e-12;
}

int StepGrid::level(double d) const {
    if (!valid_step(d)) throw GridError("step size " + std::to_string(d) + " is not on the dyadic grid");
    return static_cast<int>(std::lround(std::log2(1.0 / d)));
}

StepGrid::ScPair StepGrid::sample_sc(Rng& rng) const {
    if (K < 1) throw GridError("self-consistency draws need K >= 1");
    const int k = 1 + static_cast<int>(rng.uniform_int(K));
    const double d = std::ldexp(1.0, -k);
    // t uniform on the d-lattice, leaving room for the doubled step:
    // multiples of d in [0, 1 - 2d], i.e. 2^k - 1 slots.
    const int64_t slots = (static_cast<int64_t>(1) << k) - 1;
    const double t = d * static_cast<double>(rng.uniform_int(slots));
    return {t, d};
}

double masked_sumsq(const Mat& a, const Mat& b, const std::vector<char>& mask) {
    if (a.rows() != b.rows() || a.cols() != b.cols() ||
        static_cast<Eigen::Index>(mask.size()) != a.rows())
        throw ShapeError("masked_sumsq: shape mismatch");
    double s = 0.0;
    for (Eigen::Index r = 0; r < a.rows(); ++r)
        if (mask[static_cast<size_t>(r)]) s += (a.row(r) - b.row(r)).squaredNorm();
    return s;
}

int64_t masked_rows(const std::vector<char>& mask) {
    int64_t n = 0;
    for (char c : mask) n += c ? 1 : 0;
    return n;
}

ScTarget self_consistency_target(const VelocityFn& frozen, const Mat& x_t, double t, double d,
                                 int K, bool time_advance) {
    StepGrid grid{K};
    const int k = grid.level(d);
    if (k < 1) throw GridError("self-consistency needs 2d <= 1");
    // t must sit on the d-lattice with room for the doubled step.
    double ratio = t / d;
    if (std::abs(ratio - std::lround(ratio)) > 1e-9 || t + 2.0 * d > 1.0 + 1e-12)
        throw GridError("(t, d) pair is off the self-consistency lattice");

    ScTarget out;
    Mat s1 = frozen(x_t, t, d);
    out.x_mid = x_t + d * s1;
    Mat s2 = frozen(out.x_mid, time_advance ? t + d : t, d);
    out.s_target = 0.5 * s1 + 0.5 * s2;
    return out;
}

double flow_matching_loss(const VelocityFn& model, const std::vector<FmSample>& batch) {
    double sum = 0.0;
    int64_t elems = 0;
    for (const FmSample& s : batch) {
        Mat v = model(s.x_t, s.t, 0.0);
        sum += masked_sumsq(v, s.target, s.mask);
        elems += masked_rows(s.mask) * s.target.cols();
    }
    if (elems == 0) return 0.0;
    double loss = sum / static_cast<double>(elems);
    if (!std::isfinite(loss)) throw NumericError("flow-matching loss is non-finite");
    return loss;
}

double self_consistency_loss(const VelocityFn& model, const std::vector<ScSample>& batch) {
    double sum = 0.0;
    int64_t elems = 0;
    for (const ScSample& s : batch) {
        Mat v = model(s.x_t, s.t, 2.0 * s.d);
        sum += masked_sumsq(v, s.s_target, s.mask);
        elems += masked_rows(s.mask) * s.s_target.cols();
    }
    if (elems == 0) return 0.0;
    double loss = sum / static_cast<double>(elems);
    if (!std::isfinite(loss)) throw NumericError("self-consistency loss is non-finite");
    return loss;
}

Mat sample(const VelocityFn& model, Mat x, const std::vector<char>& gen_mask, int n_steps, int K,
           bool force_d0) {
    if (!is_power_of_two(n_steps) || n_steps > (1 << K))
        throw GridError("n_steps must be a power of two <= 2^" + std::to_string(K));
    if (static_cast<Eigen::Index>(gen_mask.size()) != x.rows())
        throw ShapeError("sample: mask length mismatch");

    const double d = 1.0 / static_cast<double>(n_steps);
    for (int i = 0; i < n_steps; ++i) {
        const double t = static_cast<double>(i) * d;
        Mat v = model(x, t, force_d0 ? 0.0 : d);
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            if (gen_mask[static_cast<size_t>(r)]) x.row(r) += d * v.row(r);
    }
    return x;
}

}  // namespace vcflow::shortcut
