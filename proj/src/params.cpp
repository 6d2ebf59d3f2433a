// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/params.hpp"

#include <cmath>
#include <istream>
#include <ostream>

namespace vcflow {

namespace {

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void put_mat(std::ostream& os, const Mat& m) {
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
}
void get_mat(std::istream& is, Mat& m) {
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * 8));
}

}  // namespace

std::vector<double> ParamRegistry::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(scalar_count()));
    for (const Tensor* t : items_)
        flat.insert(flat.end(), t->w.data(), t->w.data() + t->w.size());
    return flat;
}

void ParamRegistry::unflatten(const std::vector<double>& flat) {
    if (static_cast<int64_t>(flat.size()) != scalar_count())
        throw ShapeError("unflatten: size mismatch");
    size_t k = 0;
    for (Tensor* t : items_) {
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(k),
                  flat.begin() + static_cast<std::ptrdiff_t>(k + static_cast<size_t>(t->w.size())),
                  t->w.data());
        k += static_cast<size_t>(t->w.size());
    }
}

void GradStore::init(const ParamRegistry& reg) {
    g_.clear();
    g_.reserve(reg.size());
    for (const Tensor* t : reg.items()) g_.push_back(Mat::Zero(t->w.rows(), t->w.cols()));
}

void GradStore::zero() {
    for (Mat& m : g_) m.setZero();
}

void GradStore::add(const GradStore& other) {
    for (size_t i = 0; i < g_.size(); ++i) g_[i] += other.g_[i];
}

void AdamW::init(const ParamRegistry& reg) {
    m_.clear();
    v_.clear();
    t_ = 0;
    for (const Tensor* t : reg.items()) {
        m_.push_back(Mat::Zero(t->w.rows(), t->w.cols()));
        v_.push_back(Mat::Zero(t->w.rows(), t->w.cols()));
    }
}

void AdamW::step(ParamRegistry& reg, const GradStore& grads, double lr, double grad_clip) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));

    double scale = 1.0;
    if (grad_clip > 0.0) {
        double sq = 0.0;
        for (const Mat& g : grads.all()) sq += g.squaredNorm();
        double norm = std::sqrt(sq);
        if (norm > grad_clip) scale = grad_clip / norm;
    }

    for (size_t i = 0; i < reg.size(); ++i) {
        Mat& w = reg.items()[i]->w;
        const Mat& g0 = grads.all()[i];
        Mat g = scale == 1.0 ? g0 : Mat(scale * g0);
        m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
        v_[i] = beta2 * v_[i] + (1.0 - beta2) * g.cwiseProduct(g);
        Mat mhat = m_[i] / bc1;
        Mat vhat = v_[i] / bc2;
        w -= lr * weight_decay * w;
        w.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    }
}

void AdamW::serialize(std::ostream& os) const {
    put_u64(os, static_cast<uint64_t>(t_));
    put_u32(os, static_cast<uint32_t>(m_.size()));
    for (size_t i = 0; i < m_.size(); ++i) {
        put_mat(os, m_[i]);
        put_mat(os, v_[i]);
    }
}

void AdamW::deserialize(std::istream& is, const ParamRegistry& reg) {
    init(reg);
    t_ = static_cast<int64_t>(get_u64(is));
    uint32_t n = get_u32(is);
    if (n != m_.size()) throw LoadError("optimizer state tensor count mismatch");
    for (size_t i = 0; i < m_.size(); ++i) {
        get_mat(is, m_[i]);
        get_mat(is, v_[i]);
    }
    if (!is) throw LoadError("truncated optimizer state");
}

void write_param_block(std::ostream& os, const ParamRegistry& reg) {
    put_u32(os, static_cast<uint32_t>(reg.size()));
    for (const Tensor* t : reg.items()) {
        put_u32(os, static_cast<uint32_t>(t->name.size()));
        os.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
        put_u32(os, static_cast<uint32_t>(t->w.rows()));
        put_u32(os, static_cast<uint32_t>(t->w.cols()));
        put_mat(os, t->w);
    }
}

void read_param_block(std::istream& is, ParamRegistry& reg) {
    uint32_t n = get_u32(is);
    if (n != reg.size()) throw LoadError("parameter tensor count mismatch");
    for (Tensor* t : reg.items()) {
        uint32_t len = get_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        uint32_t rows = get_u32(is);
        uint32_t cols = get_u32(is);
        if (name != t->name || rows != t->w.rows() || cols != t->w.cols())
            throw LoadError("parameter layout mismatch at " + t->name + " (file has " + name + ")");
        get_mat(is, t->w);
    }
    if (!is) throw LoadError("truncated parameter block");
}

void init_gaussian(Tensor& t, Rng& rng, double std) {
    for (Eigen::Index i = 0; i < t.w.size(); ++i) t.w.data()[i] = std * rng.normal();
}

}  // namespace vcflow
