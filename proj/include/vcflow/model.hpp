// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/estimator.hpp"
#include "vcflow/frontend.hpp"
#include "vcflow/fusion.hpp"
#include "vcflow/shortcut.hpp"

#include <memory>

namespace vcflow::model {

struct ModelConfig {
    int H = 64;   // conditioning latent width
    int D_b = 32;
    int D_s = 48;
    int D_m = 24;
    int K = 7;
    std::string preset = "toy";  // estimator preset: toy | paper
    fusion::AlignMode align = fusion::AlignMode::kImplicit;
};

// The full conditional velocity model: content encoders + PBTC + fusion glue
// around the DiT estimator. Owns every trainable tensor.
class VcModel {
public:
    VcModel(const ModelConfig& cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    fusion::FusionDims dims() const { return {cfg_.H, cfg_.D_m}; }

    // Gradient-free conditioning encode (inference path).
    fusion::EncodedConditions encode(const Mat& bnf, const Mat& ssl, const Vec& pitch) const;

    // Velocity closure over fixed conditions; rebuilds m_t from x each call.
    shortcut::VelocityFn velocity_fn(fusion::EncodedConditions enc, fusion::CondSpec cond) const;

    frontend::ContentEncoder enc_bnf;
    frontend::ContentEncoder enc_ssl;
    frontend::Pbtc pbtc;
    estimator::Estimator est;

private:
    ModelConfig cfg_;
    ParamRegistry reg_;
};

}  // namespace vcflow::model
