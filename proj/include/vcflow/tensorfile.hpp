// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "vcflow/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vcflow {

// Single-tensor binary container, little-endian:
//   magic "RTEN" | version u8 = 1 | dtype u8 (0 = float32) | ndim u8 |
//   ndim x u32 dims | row-major float32 payload.
// Write->read round trips are bit-exact on the float32 payload.
struct TensorData {
    std::vector<uint32_t> dims;
    std::vector<float> data;

    size_t elements() const {
        size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

void write_tensor(const std::string& path, const std::vector<uint32_t>& dims,
                  const float* data, size_t count);
TensorData read_tensor(const std::string& path);

// Mat/Vec adapters (double in core, float32 on disk).
void write_matrix(const std::string& path, const Mat& m);
void write_vector(const std::string& path, const Vec& v);
Mat read_matrix(const std::string& path);
Vec read_vector(const std::string& path);

}  // namespace vcflow
