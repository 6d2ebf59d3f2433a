// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vcflow/frontend.hpp"

#include <cmath>

using namespace vcflow;
using namespace vcflow::frontend;

namespace {

Mat random_mat(int r, int c, Rng& rng) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// Central finite-difference directional derivative of a scalar loss over the
// registry parameters; the independent oracle for analytic gradients.
double fd_directional(ParamRegistry& reg, const std::vector<Mat>& dir,
                      const std::function<double()>& loss, double h) {
    const std::vector<double> flat = reg.flatten();
    std::vector<double> dir_flat;
    dir_flat.reserve(flat.size());
    for (const Mat& d : dir) dir_flat.insert(dir_flat.end(), d.data(), d.data() + d.size());

    std::vector<double> bumped(flat.size());
    for (size_t k = 0; k < flat.size(); ++k) bumped[k] = flat[k] + h * dir_flat[k];
    reg.unflatten(bumped);
    double up = loss();
    for (size_t k = 0; k < flat.size(); ++k) bumped[k] = flat[k] - h * dir_flat[k];
    reg.unflatten(bumped);
    double down = loss();
    reg.unflatten(flat);
    return (up - down) / (2.0 * h);
}

double dot_grads(const GradStore& g, const std::vector<Mat>& dir) {
    double s = 0.0;
    for (size_t i = 0; i < dir.size(); ++i) s += (g.all()[i].cwiseProduct(dir[i])).sum();
    return s;
}

}  // namespace

TEST_CASE("encoder preserves time length and is pure") {
    ContentEncoder enc("enc", 32, 64);
    Rng rng(3);
    enc.init(rng);
    Mat x = random_mat(50, 32, rng);
    Mat y1 = enc.forward(x);
    Mat y2 = enc.forward(x);
    CHECK(y1.rows() == 50);
    CHECK(y1.cols() == 64);
    CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero final layer gives zero output for any input") {
    ContentEncoder enc("enc", 16, 8);
    Rng rng(4);
    enc.init(rng);
    enc.w2_.w.setZero();
    enc.b2_.w.setZero();
    Mat x = random_mat(12, 16, rng);
    CHECK(enc.forward(x).cwiseAbs().maxCoeff() == 0.0);
    CHECK(enc.forward(Mat::Zero(12, 16)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encoder rejects width mismatch") {
    ContentEncoder enc("enc", 16, 8);
    Rng rng(5);
    enc.init(rng);
    CHECK_THROWS_AS(enc.forward(Mat::Zero(4, 17)), ShapeError);
}

TEST_CASE("encoder analytic gradients match finite differences") {
    ContentEncoder enc("enc", 10, 12);
    Rng rng(6);
    enc.init(rng);
    ParamRegistry reg;
    enc.register_params(reg);
    Mat x = random_mat(7, 10, rng);

    auto loss = [&] { return enc.forward(x).array().square().sum(); };

    ContentEncoder::Ctx ctx;
    Mat y = enc.forward_ctx(x, ctx);
    GradStore grads;
    grads.init(reg);
    enc.backward(ctx, 2.0 * y, grads);

    for (int trial = 0; trial < 4; ++trial) {
        std::vector<Mat> dir;
        double norm = 0.0;
        for (const Tensor* t : reg.items()) {
            Mat d = random_mat(static_cast<int>(t->w.rows()), static_cast<int>(t->w.cols()), rng);
            norm += d.squaredNorm();
            dir.push_back(std::move(d));
        }
        norm = std::sqrt(norm);
        for (auto& d : dir) d /= norm;
        double analytic = dot_grads(grads, dir);
        double fd = fd_directional(reg, dir, loss, 1e-5);
        CHECK(std::abs(analytic - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("forced thresholds give degenerate erase behaviour") {
    Rng rng(9);
    std::vector<Mat> batch = {random_mat(6, 5, rng), random_mat(4, 5, rng)};
    std::vector<Mat> orig = batch;

    SUBCASE("p = 0 never erases") {
        Rng noise(1);
        ErasureMask m = erase_with(batch, {0.0, 0.0}, {0.5, 0.9}, noise);
        CHECK_FALSE(m.erased[0]);
        CHECK_FALSE(m.erased[1]);
        CHECK((batch[0] - orig[0]).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("p = 1 always erases, nothing survives") {
        Rng noise(2);
        ErasureMask m = erase_with(batch, {1.0, 1.0}, {0.5, 0.999}, noise);
        CHECK(m.erased[0]);
        CHECK(m.erased[1]);
        for (size_t s = 0; s < batch.size(); ++s) {
            int equal = 0;
            for (Eigen::Index i = 0; i < batch[s].size(); ++i)
                if (batch[s].data()[i] == orig[s].data()[i]) ++equal;
            CHECK(equal == 0);  // continuous noise almost surely differs everywhere
        }
    }
}

TEST_CASE("empty batch is rejected") {
    std::vector<Mat> batch;
    Rng rng(1);
    CHECK_THROWS_AS(random_erase(batch, rng), std::invalid_argument);
}

TEST_CASE("erase rate converges to one half across seeds") {
    // Two-stage sampling: p ~ U(0,1) then Bernoulli(p). Marginal rate 1/2 with
    // indicator variance E[p(1-p)] + Var(p) = 1/4, so a 4-sigma band at
    // n = 10,000 is [0.48, 0.52].
    for (uint64_t seed : {111ull, 222ull, 333ull}) {
        Rng rng(seed);
        int n = 10000, erased = 0;
        std::vector<Mat> one = {Mat::Zero(2, 2)};
        for (int i = 0; i < n; ++i) {
            one[0].setZero();
            ErasureMask m = random_erase(one, rng);
            erased += m.erased[0] ? 1 : 0;
        }
        double rate = static_cast<double>(erased) / n;
        CHECK(rate >= 0.48);
        CHECK(rate <= 0.52);
    }
}

TEST_CASE("pbtc quantization: global pitch scale shifts bins uniformly") {
    Rng rng(12);
    Vec pitch(40);
    for (int i = 0; i < 40; ++i) pitch[i] = 100.0 * std::exp(0.1 * std::sin(0.3 * i));
    std::vector<int> base = Pbtc::quantize(pitch);
    // Doubling pitch is exactly 12 semitone bins (bin width log(2)/12).
    std::vector<int> shifted = Pbtc::quantize(2.0 * pitch);
    for (size_t i = 0; i < base.size(); ++i) CHECK(shifted[i] - base[i] == 12);
}

TEST_CASE("pbtc output length equals input length regardless of dilation") {
    Pbtc p("pbtc", 24);
    Rng rng(13);
    p.init(rng);
    for (int T : {9, 100, 257}) {
        Vec pitch = Vec::Constant(T, 150.0);
        Mat out = p.forward(pitch);
        CHECK(out.rows() == T);
        CHECK(out.cols() == 24);
    }
}

TEST_CASE("pbtc with zero weights returns the summed biases everywhere") {
    Pbtc p("pbtc", 6);
    for (size_t b = 0; b < p.weights_.size(); ++b) {
        p.weights_[b].w.setZero();
        p.biases_[b].w.setConstant(0.5 * static_cast<double>(b + 1));
    }
    Vec pitch = Vec::Constant(30, 200.0);
    Mat out = p.forward(pitch);
    const double expect = 0.5 * (1 + 2 + 3 + 4);
    CHECK((out.array() - expect).abs().maxCoeff() < 1e-12);
}

TEST_CASE("pbtc rejects non-positive pitch") {
    Pbtc p("pbtc", 6);
    Vec pitch = Vec::Constant(10, 100.0);
    pitch[3] = 0.0;
    CHECK_THROWS_AS(p.forward(pitch), std::domain_error);
    pitch[3] = -5.0;
    CHECK_THROWS_AS(p.forward(pitch), std::domain_error);
}

TEST_CASE("pbtc is translation equivariant away from edges") {
    Pbtc p("pbtc", 8);
    Rng rng(14);
    p.init(rng);
    const int T = 80, shift = 5;
    Vec pitch(T);
    for (int i = 0; i < T; ++i) pitch[i] = 120.0 * std::exp(0.2 * std::sin(0.37 * i));
    Vec pitch_shifted(T);
    for (int i = 0; i < T; ++i)
        pitch_shifted[i] = i < shift ? pitch[0] : pitch[i - shift];  // constant-padded shift

    Mat a = p.forward(pitch);
    Mat b = p.forward(pitch_shifted);
    // Edge effects reach max_dilation * (kernel - 1) = 16 rows.
    const int edge = 8 * (Pbtc::kKernel - 1);
    for (int o = shift + edge; o < T; ++o)
        CHECK((b.row(o) - a.row(o - shift)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("pbtc analytic gradients match finite differences") {
    Pbtc p("pbtc", 10);
    Rng rng(15);
    p.init(rng);
    ParamRegistry reg;
    p.register_params(reg);
    Vec pitch(25);
    for (int i = 0; i < 25; ++i) pitch[i] = 90.0 + 10.0 * (i % 7);

    auto loss = [&] { return p.forward(pitch).array().square().sum(); };
    Pbtc::Ctx ctx;
    Mat y = p.forward_ctx(pitch, ctx);
    GradStore grads;
    grads.init(reg);
    p.backward(ctx, 2.0 * y, grads);

    for (int trial = 0; trial < 3; ++trial) {
        std::vector<Mat> dir;
        double norm = 0.0;
        for (const Tensor* t : reg.items()) {
            Mat d = random_mat(static_cast<int>(t->w.rows()), static_cast<int>(t->w.cols()), rng);
            norm += d.squaredNorm();
            dir.push_back(std::move(d));
        }
        norm = std::sqrt(norm);
        for (auto& d : dir) d /= norm;
        double analytic = dot_grads(grads, dir);
        double fd = fd_directional(reg, dir, loss, 1e-5);
        CHECK(std::abs(analytic - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
}
