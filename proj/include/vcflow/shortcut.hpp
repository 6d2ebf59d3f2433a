// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/common.hpp"

#include <functional>
#include <vector>

namespace vcflow::shortcut {

// A velocity query at (x_t, t, d); the callable rebuilds the estimator input
// from x_t internally (conditions are captured).
using VelocityFn = std::function<Mat(const Mat& x_t, double t, double d)>;

// Dyadic step lattice: d in {2^-k : k = 0..K}; for a chosen d, t ranges over
// integer multiples of d with t + d <= 1.
struct StepGrid {
    int K = 7;

    bool valid_step(double d) const;
    int level(double d) const;  // GridError when d is off-grid

    struct ScPair {
        double t;
        double d;  // the small step; the trained prediction uses 2d
    };
    // Training draw: k ~ U{1..K}, d = 2^-k, t uniform on multiples of 2d with
    // t + 2d <= 1. Guarantees (t, 2d) and (t + d, d) are valid evaluations.
    ScPair sample_sc(Rng& rng) const;
};

// Self-consistency batch fraction: 0 before S0, ramps linearly to 1/4 over S1
// steps, then stays at 1/4.
struct RampSchedule {
    int64_t S0 = 0;
    int64_t S1 = 0;
    static constexpr double kMaxFraction = 0.25;

    double fraction(int64_t step) const {
        if (step < S0) return 0.0;
        if (S1 <= 0 || step >= S0 + S1) return kMaxFraction;
        return kMaxFraction * static_cast<double>(step - S0) / static_cast<double>(S1);
    }
};

// Elementwise squared error summed over masked (generated) rows.
double masked_sumsq(const Mat& a, const Mat& b, const std::vector<char>& mask);
int64_t masked_rows(const std::vector<char>& mask);

struct ScTarget {
    Mat s_target;
    Mat x_mid;  // x_t advanced by the first small step
};

// Two-call composition target: s1 at (x_t, t, d), advance x' = x_t + s1 d,
// s2 at (x', t + d, d) [time_advance=true] or (x', t, d) [=false],
// s_target = (s1 + s2) / 2. The model must be queried gradient-free.
ScTarget self_consistency_target(const VelocityFn& frozen, const Mat& x_t, double t, double d,
                                 int K, bool time_advance = true);

// Reference (gradient-free) loss evaluation; the training loop mirrors these
// definitions with gradients attached.
struct FmSample {
    Mat x_t;
    Mat target;  // x_1 - x_0
    std::vector<char> mask;
    double t = 0.0;
};
double flow_matching_loss(const VelocityFn& model, const std::vector<FmSample>& batch);

struct ScSample {
    Mat x_t;
    Mat s_target;
    std::vector<char> mask;
    double t = 0.0;
    double d = 0.0;  // small step; the prediction is queried at 2d
};
double self_consistency_loss(const VelocityFn& model, const std::vector<ScSample>& batch);

// Euler sampling with uniform d = 1/n_steps. x_init already holds the prompt
// mel on non-generated rows and noise on generated rows; prompt rows are
// clamped (never integrated). force_d0 queries the model with the dedicated
// d = 0 embedding while stepping (plain flow-matching integration).
Mat sample(const VelocityFn& model, Mat x_init, const std::vector<char>& gen_mask, int n_steps,
           int K, bool force_d0 = false);

}  // namespace vcflow::shortcut
