// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "vcflow/tensorfile.hpp"

#include <cstring>
#include <fstream>

namespace vcflow {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'E', 'N'};
constexpr uint8_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(const std::string& path, const std::vector<uint32_t>& dims,
                  const float* data, size_t count) {
    if (dims.empty() || dims.size() > 255)
        throw FormatError("tensor ndim must be in 1..255, got " + std::to_string(dims.size()));
    size_t expect = 1;
    for (uint32_t d : dims) expect *= d;
    if (expect != count)
        throw ShapeError("payload count " + std::to_string(count) + " does not match dims product " +
                         std::to_string(expect));

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(kDtypeF32));
    os.put(static_cast<char>(dims.size()));
    for (uint32_t d : dims) put_u32(os, d);
    static_assert(sizeof(float) == 4);
    // float32 is stored little-endian; this writer assumes an LE host.
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
    if (!os) throw IoError("write failed: " + path);
}

TensorData read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic in " + path);
    int version = is.get();
    int dtype = is.get();
    int ndim = is.get();
    if (version != kVersion) throw FormatError("unsupported version in " + path);
    if (dtype != kDtypeF32) throw FormatError("unsupported dtype in " + path);
    if (ndim < 1) throw FormatError("bad ndim in " + path);

    TensorData t;
    t.dims.resize(static_cast<size_t>(ndim));
    for (int i = 0; i < ndim; ++i) t.dims[static_cast<size_t>(i)] = get_u32(is);
    if (!is) throw IntegrityError("truncated header in " + path);

    size_t n = t.elements();
    t.data.resize(n);
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * 4));
    if (static_cast<size_t>(is.gcount()) != n * 4) throw IntegrityError("truncated payload in " + path);
    // Trailing bytes mean the file does not match its own header.
    is.peek();
    if (!is.eof()) throw IntegrityError("trailing bytes in " + path);
    return t;
}

void write_matrix(const std::string& path, const Mat& m) {
    std::vector<float> buf(static_cast<size_t>(m.size()));
    size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) buf[k++] = static_cast<float>(m(r, c));
    write_tensor(path, {static_cast<uint32_t>(m.rows()), static_cast<uint32_t>(m.cols())}, buf.data(),
                 buf.size());
}

void write_vector(const std::string& path, const Vec& v) {
    std::vector<float> buf(static_cast<size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(v[i]);
    write_tensor(path, {static_cast<uint32_t>(v.size())}, buf.data(), buf.size());
}

Mat read_matrix(const std::string& path) {
    TensorData t = read_tensor(path);
    if (t.dims.size() != 2) throw ShapeError("expected 2-D tensor in " + path);
    Mat m(t.dims[0], t.dims[1]);
    size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<double>(t.data[k++]);
    return m;
}

Vec read_vector(const std::string& path) {
    TensorData t = read_tensor(path);
    if (t.dims.size() != 1) throw ShapeError("expected 1-D tensor in " + path);
    Vec v(t.dims[0]);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<double>(t.data[static_cast<size_t>(i)]);
    return v;
}

}  // namespace vcflow
