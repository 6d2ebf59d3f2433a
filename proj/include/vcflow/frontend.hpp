// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/params.hpp"

#include <vector>

namespace vcflow::frontend {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

// Two-layer affine + nonlinearity stack projecting a feature stream into the
// conditioning latent space; time length is preserved.
class ContentEncoder {
public:
    ContentEncoder(const std::string& name, int in_width, int latent);
    void register_params(ParamRegistry& reg);
    void init(Rng& rng);

    int in_width() const { return static_cast<int>(w1_.w.rows()); }
    int latent() const { return static_cast<int>(w2_.w.cols()); }

    struct Ctx {
        Mat x;   // input
        Mat a1;  // pre-activation of layer 1
        Mat h1;  // post-activation
    };

    Mat forward(const Mat& x) const;
    Mat forward_ctx(const Mat& x, Ctx& ctx) const;
    // Accumulates weight gradients; input gradients are not needed (inputs are data).
    void backward(const Ctx& ctx, const Mat& dy, GradStore& grads) const;

    Tensor w1_, b1_, w2_, b2_;
};

// Batch-wise SSL erasure. Per sample: threshold p ~ U(0,1), then erase with
// probability p (second uniform draw); erased samples are replaced entirely by
// standard Gaussian noise of identical shape. Marginal erase rate is 1/2.
struct ErasureMask {
    std::vector<char> erased;
    std::vector<double> thresholds;
};

ErasureMask random_erase(std::vector<Mat>& ssl_batch, Rng& rng);
// Deterministic variant with injected draws, used by tests and the training
// loop (which pre-draws all randomness single-threaded).
ErasureMask erase_with(std::vector<Mat>& ssl_batch, const std::vector<double>& thresholds,
                       const std::vector<double>& draws, Rng& noise_rng);

// Parallel biased transposed-convolution pitch encoder: log-pitch quantized to
// one-hot bins, P parallel stride-1 transposed-conv branches at dilations
// {1,2,4,8} (kernel 3), each with an additive bias, summed and cropped to T_m.
class Pbtc {
public:
    static constexpr int kBins = 64;
    static constexpr int kKernel = 3;
    static constexpr double kFMin = 55.0;  // Hz-analog of the lowest bin edge
    inline static const double kBinWidth = std::log(2.0) / 12.0;  // one semitone

    Pbtc(const std::string& name, int latent, std::vector<int> dilations = {1, 2, 4, 8});
    void register_params(ParamRegistry& reg);
    void init(Rng& rng);

    int latent() const { return latent_; }
    const std::vector<int>& dilations() const { return dilations_; }

    static int bin_index(double pitch_hz);
    static std::vector<int> quantize(const Vec& pitch);

    struct Ctx {
        std::vector<int> bins;
        int T = 0;
    };

    Mat forward(const Vec& pitch) const;
    Mat forward_ctx(const Vec& pitch, Ctx& ctx) const;
    void backward(const Ctx& ctx, const Mat& dy, GradStore& grads) const;

    // Per branch: weights [kKernel*kBins x latent] (tap-major blocks), bias [1 x latent].
    std::vector<Tensor> weights_, biases_;

private:
    int latent_;
    std::vector<int> dilations_;
};

}  // namespace vcflow::frontend
