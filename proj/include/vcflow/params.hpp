// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/common.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace vcflow {

// A named trainable matrix. Vectors/biases are stored as [1 x n].
struct Tensor {
    std::string name;
    Mat w;
    int id = -1;  // assigned at registration, indexes GradStore slots
};

// Fixed-order registry over module-owned tensors. Registration order defines
// the flat parameter layout used by the optimizer, checkpoints, and
// finite-difference direction vectors.
class ParamRegistry {
public:
    void add(Tensor& t) {
        t.id = static_cast<int>(items_.size());
        items_.push_back(&t);
    }
    const std::vector<Tensor*>& items() const { return items_; }
    size_t size() const { return items_.size(); }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const Tensor* t : items_) n += t->w.size();
        return n;
    }

    // Flat views (registration order, row-major within each tensor).
    std::vector<double> flatten() const;
    void unflatten(const std::vector<double>& flat);

private:
    std::vector<Tensor*> items_;
};

// Per-thread gradient accumulator mirroring a registry's layout.
class GradStore {
public:
    void init(const ParamRegistry& reg);
    void zero();
    void add(const GradStore& other);

    Mat& of(const Tensor& t) { return g_[static_cast<size_t>(t.id)]; }
    const Mat& of(const Tensor& t) const { return g_[static_cast<size_t>(t.id)]; }
    std::vector<Mat>& all() { return g_; }
    const std::vector<Mat>& all() const { return g_; }

private:
    std::vector<Mat> g_;
};

// Decoupled-weight-decay adaptive-moment optimizer.
class AdamW {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void init(const ParamRegistry& reg);
    void step(ParamRegistry& reg, const GradStore& grads, double lr, double grad_clip = 0.0);
    int64_t steps_taken() const { return t_; }

    void serialize(std::ostream& os) const;
    void deserialize(std::istream& is, const ParamRegistry& reg);

private:
    std::vector<Mat> m_, v_;
    int64_t t_ = 0;
};

// Checkpoint helpers: named f64 tensors with shape validation on read.
void write_param_block(std::ostream& os, const ParamRegistry& reg);
void read_param_block(std::istream& is, ParamRegistry& reg);

// Initializers.
void init_gaussian(Tensor& t, Rng& rng, double std);
inline void init_lecun(Tensor& t, Rng& rng) {
    init_gaussian(t, rng, 1.0 / std::sqrt(static_cast<double>(t.w.rows())));
}

}  // namespace vcflow
