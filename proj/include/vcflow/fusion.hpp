// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/common.hpp"

#include <vector>

namespace vcflow::fusion {

// Alignment of content-rate streams to the mel-rate length L:
// kImplicit appends blank frames (the model aligns); kInterp is the
// ablation baseline that stretches by linear interpolation.
enum class AlignMode { kImplicit, kInterp };

// Blank-frame padding: original frames occupy [0, T), blanks fill [T, L).
// Truncation is forbidden.
Mat pad_blank(const Mat& e, int L_target, double blank_value = 0.0);

// Linear time interpolation to L_target (endpoint-aligned); requires T >= 2.
Mat interpolate_align(const Mat& e, int L_target);
// Scatter-add adjoint of interpolate_align, for training the ablation arm.
Mat interpolate_align_backward(const Mat& dy, int T_source);

struct EncodedConditions {
    Mat e_bnf;    // [T_c x H]
    Mat e_ssl;    // [T_c x H]
    Mat e_pitch;  // [L x H]
};

// Conditioning mel: unmasked frames hold the prompt/visible mel, masked frames
// (the region to generate) are exactly zero.
struct CondSpec {
    Mat x_cond;              // [L x D_m]
    std::vector<char> mask;  // true = frame to be generated
    int prompt_len = 0;      // inference only; 0 in training mode
};

// Training mode: a contiguous span covering a fraction ~ U(0.7, 1.0) of frames
// at a random offset is masked (zeroed); the rest of the target is visible.
CondSpec build_cond_train(const Mat& mel_target, Rng& rng);
// Deterministic variant with injected draws (fraction, offset u in [0,1)).
CondSpec build_cond_train_with(const Mat& mel_target, double fraction, double offset_u);
// Inference mode: prompt mel occupies [0, prompt_len), zeros after; the mask
// is true exactly on the generated region.
CondSpec build_cond_infer(const Mat& prompt_mel, int L, int D_m);

// The estimator input: channel concatenation in the fixed order
// (e_bnf, e_ssl, e_pitch, x_cond, x_t), width 3H + 2*D_m.
struct FusionInput {
    Mat m;  // [L x (3H + 2 D_m)]
    int L = 0;
    int prompt_len = 0;
    double t = 0.0;
    double d = 0.0;
};

struct FusionDims {
    int H = 0;
    int D_m = 0;
    int width() const { return 3 * H + 2 * D_m; }
};

FusionInput fuse(const EncodedConditions& enc, const CondSpec& cond, const Mat& x_t, double t,
                 double d, const FusionDims& dims, AlignMode mode = AlignMode::kImplicit);

// Channel views (the concatenation inverse).
struct ChannelSlices {
    Mat e_bnf, e_ssl, e_pitch, x_cond, x_t;  // each [L x width]
};
ChannelSlices slice(const Mat& m, const FusionDims& dims);

// Splits an estimator input gradient back into per-stream gradients, undoing
// the padding/interpolation of fuse. x_cond/x_t channels carry no parameters.
struct StreamGrads {
    Mat d_e_bnf;    // [T_c x H]
    Mat d_e_ssl;    // [T_c x H]
    Mat d_e_pitch;  // [L x H]
};
StreamGrads split_input_grad(const Mat& dm, const FusionDims& dims, int T_c, AlignMode mode);

}  // namespace vcflow::fusion
