// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/frontend.hpp"

#include <algorithm>
#include <cmath>

namespace vcflow::frontend {

ContentEncoder::ContentEncoder(const std::string& name, int in_width, int latent) {
    w1_ = {name + ".w1", Mat::Zero(in_width, latent)};
    b1_ = {name + ".b1", Mat::Zero(1, latent)};
    w2_ = {name + ".w2", Mat::Zero(latent, latent)};
    b2_ = {name + ".b2", Mat::Zero(1, latent)};
}

void ContentEncoder::register_params(ParamRegistry& reg) {
    reg.add(w1_);
    reg.add(b1_);
    reg.add(w2_);
    reg.add(b2_);
}

void ContentEncoder::init(Rng& rng) {
    init_lecun(w1_, rng);
    init_lecun(w2_, rng);
}

Mat ContentEncoder::forward(const Mat& x) const {
    Ctx ctx;
    return forward_ctx(x, ctx);
}

Mat ContentEncoder::forward_ctx(const Mat& x, Ctx& ctx) const {
    if (x.cols() != w1_.w.rows())
        throw ShapeError("encoder input width " + std::to_string(x.cols()) + " expected " +
                         std::to_string(w1_.w.rows()));
    ctx.x = x;
    ctx.a1.noalias() = x * w1_.w;
    ctx.a1.rowwise() += b1_.w.row(0);
    ctx.h1 = ctx.a1.unaryExpr([](double v) { return gelu(v); });
    Mat y;
    y.noalias() = ctx.h1 * w2_.w;
    y.rowwise() += b2_.w.row(0);
    return y;
}

void ContentEncoder::backward(const Ctx& ctx, const Mat& dy, GradStore& grads) const {
    grads.of(w2_).noalias() += ctx.h1.transpose() * dy;
    grads.of(b2_).row(0) += dy.colwise().sum();
    Mat dh1;
    dh1.noalias() = dy * w2_.w.transpose();
    Mat da1 = dh1.cwiseProduct(ctx.a1.unaryExpr([](double v) { return gelu_grad(v); }));
    grads.of(w1_).noalias() += ctx.x.transpose() * da1;
    grads.of(b1_).row(0) += da1.colwise().sum();
}

ErasureMask random_erase(std::vector<Mat>& ssl_batch, Rng& rng) {
    if (ssl_batch.empty()) throw std::invalid_argument("random_erase: empty batch");
    std::vector<double> thresholds(ssl_batch.size());
    std::vector<double> draws(ssl_batch.size());
    for (size_t i = 0; i < ssl_batch.size(); ++i) {
        thresholds[i] = rng.uniform();
        draws[i] = rng.uniform();
    }
    return erase_with(ssl_batch, thresholds, draws, rng);
}

ErasureMask erase_with(std::vector<Mat>& ssl_batch, const std::vector<double>& thresholds,
                       const std::vector<double>& draws, Rng& noise_rng) {
    if (ssl_batch.empty()) throw std::invalid_argument("random_erase: empty batch");
    if (thresholds.size() != ssl_batch.size() || draws.size() != ssl_batch.size())
        throw std::invalid_argument("random_erase: draw count mismatch");
    ErasureMask mask;
    mask.thresholds = thresholds;
    mask.erased.assign(ssl_batch.size(), 0);
    for (size_t i = 0; i < ssl_batch.size(); ++i) {
        if (draws[i] < thresholds[i]) {
            mask.erased[i] = 1;
            Mat& m = ssl_batch[i];
            for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = noise_rng.normal();
        }
    }
    return mask;
}

Pbtc::Pbtc(const std::string& name, int latent, std::vector<int> dilations)
    : latent_(latent), dilations_(std::move(dilations)) {
    for (size_t b = 0; b < dilations_.size(); ++b) {
        weights_.push_back({name + ".branch" + std::to_string(dilations_[b]) + ".w",
                            Mat::Zero(kKernel * kBins, latent)});
        biases_.push_back({name + ".branch" + std::to_string(dilations_[b]) + ".b", Mat::Zero(1, latent)});
    }
}

void Pbtc::register_params(ParamRegistry& reg) {
    for (size_t b = 0; b < weights_.size(); ++b) {
        reg.add(weights_[b]);
        reg.add(biases_[b]);
    }
}

void Pbtc::init(Rng& rng) {
    // One-hot inputs make fan-in effectively kKernel.
    for (auto& w : weights_) init_gaussian(w, rng, 1.0 / std::sqrt(static_cast<double>(kKernel)));
}

int Pbtc::bin_index(double pitch_hz) {
    if (!(pitch_hz > 0.0) || !std::isfinite(pitch_hz))
        throw std::domain_error("pbtc: pitch values must be positive and finite");
    int idx = static_cast<int>(std::floor((std::log(pitch_hz) - std::log(kFMin)) / kBinWidth));
    return std::clamp(idx, 0, kBins - 1);
}

std::vector<int> Pbtc::quantize(const Vec& pitch) {
    std::vector<int> bins(static_cast<size_t>(pitch.size()));
    for (Eigen::Index t = 0; t < pitch.size(); ++t) bins[static_cast<size_t>(t)] = bin_index(pitch[t]);
    return bins;
}

Mat Pbtc::forward(const Vec& pitch) const {
    Ctx ctx;
    return forward_ctx(pitch, ctx);
}

Mat Pbtc::forward_ctx(const Vec& pitch, Ctx& ctx) const {
    ctx.bins = quantize(pitch);
    ctx.T = static_cast<int>(pitch.size());
    const int T = ctx.T;
    Mat out = Mat::Zero(T, latent_);
    for (size_t b = 0; b < dilations_.size(); ++b) {
        const int dil = dilations_[b];
        const Mat& w = weights_[b].w;
        // Transposed conv with stride 1 over one-hot bins: tap k scatters input
        // frame t to output frame t + k*dil; frames beyond T are cropped.
        for (int t = 0; t < T; ++t) {
            const int row = ctx.bins[static_cast<size_t>(t)];
            for (int k = 0; k < kKernel; ++k) {
                const int o = t + k * dil;
                if (o < T) out.row(o) += w.row(k * kBins + row);
            }
        }
        out.rowwise() += biases_[b].w.row(0);
    }
    return out;
}

void Pbtc::backward(const Ctx& ctx, const Mat& dy, GradStore& grads) const {
    const int T = ctx.T;
    for (size_t b = 0; b < dilations_.size(); ++b) {
        const int dil = dilations_[b];
        Mat& dw = grads.of(weights_[b]);
        grads.of(biases_[b]).row(0) += dy.colwise().sum();
        for (int t = 0; t < T; ++t) {
            const int row = ctx.bins[static_cast<size_t>(t)];
            for (int k = 0; k < kKernel; ++k) {
                const int o = t + k * dil;
                if (o < T) dw.row(k * kBins + row) += dy.row(o);
            }
        }
    }
}

}  // namespace vcflow::frontend
