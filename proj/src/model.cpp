// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/model.hpp"

namespace vcflow::model {

namespace {

estimator::EstimatorConfig make_est_config(const ModelConfig& cfg) {
    const int in_width = 3 * cfg.H + 2 * cfg.D_m;
    if (cfg.preset == "toy") return estimator::EstimatorConfig::toy(in_width, cfg.D_m, cfg.K);
    if (cfg.preset == "paper") return estimator::EstimatorConfig::paper(in_width, cfg.D_m, cfg.K);
    throw ConfigError("unknown estimator preset: " + cfg.preset);
}

estimator::Estimator make_estimator(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed(seed, 11, 0));
    return estimator::Estimator(make_est_config(cfg), rng);
}

}  // namespace

VcModel::VcModel(const ModelConfig& cfg, uint64_t init_seed)
    : enc_bnf("enc_bnf", cfg.D_b, cfg.H),
      enc_ssl("enc_ssl", cfg.D_s, cfg.H),
      pbtc("pbtc", cfg.H),
      est(make_estimator(cfg, init_seed)),
      cfg_(cfg) {
    Rng rng(mix_seed(init_seed, 12, 0));
    enc_bnf.init(rng);
    enc_ssl.init(rng);
    pbtc.init(rng);

    enc_bnf.register_params(reg_);
    enc_ssl.register_params(reg_);
    pbtc.register_params(reg_);
    est.register_params(reg_);
}

fusion::EncodedConditions VcModel::encode(const Mat& bnf, const Mat& ssl, const Vec& pitch) const {
    fusion::EncodedConditions enc;
    enc.e_bnf = enc_bnf.forward(bnf);
    enc.e_ssl = enc_ssl.forward(ssl);
    enc.e_pitch = pbtc.forward(pitch);
    return enc;
}

shortcut::VelocityFn VcModel::velocity_fn(fusion::EncodedConditions enc,
                                          fusion::CondSpec cond) const {
    const fusion::FusionDims d = dims();
    const fusion::AlignMode align = cfg_.align;
    const estimator::Estimator* net = &est;
    return [enc = std::move(enc), cond = std::move(cond), d, align, net](
               const Mat& x_t, double t, double dd) -> Mat {
        fusion::FusionInput fi = fusion::fuse(enc, cond, x_t, t, dd, d, align);
        return net->forward(fi.m, t, dd);
    };
}

}  // namespace vcflow::model
