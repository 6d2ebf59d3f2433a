// Copyright 2026 The vcflow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vcflow {

// All in-core math is double; on-disk tensors are float32 (see tensorfile.hpp).
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error("format error: " + m) {}
};
struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& m) : std::runtime_error("integrity error: " + m) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("i/o error: " + m) {}
};
struct GridError : std::runtime_error {
    explicit GridError(const std::string& m) : std::runtime_error("step grid error: " + m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};
struct AlignmentError : std::runtime_error {
    explicit AlignmentError(const std::string& m) : std::runtime_error("alignment error: " + m) {}
};
struct PairingError : std::runtime_error {
    explicit PairingError(const std::string& m) : std::runtime_error("pairing error: " + m) {}
};
struct AdapterError : std::runtime_error {
    explicit AdapterError(const std::string& m) : std::runtime_error("adapter error: " + m) {}
};
struct LoadError : std::runtime_error {
    explicit LoadError(const std::string& m) : std::runtime_error("load error: " + m) {}
};
struct ContaminationError : std::runtime_error {
    explicit ContaminationError(const std::string& m) : std::runtime_error("contamination error: " + m) {}
};

// Deterministic RNG. mt19937_64 has a standard-pinned sequence; the uniform and
// normal transforms below are hand-rolled so draws are identical across
// platforms and standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        return static_cast<int64_t>((static_cast<__uint128_t>(eng_()) * static_cast<__uint128_t>(n)) >> 64);
    }

    // Standard normal via Box-Muller, spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_ << " " << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << std::hexfloat << spare_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        int hs = 0;
        is >> eng_ >> hs >> std::hexfloat >> spare_;
        if (!is) throw FormatError("bad rng state string");
        has_spare_ = hs != 0;
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Stable per-item stream seeding (corpus items, epoch permutations).
inline uint64_t mix_seed(uint64_t seed, uint64_t stream, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1) + 0xbf58476d1ce4e5b9ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline bool is_power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

inline void check_finite(const Mat& m, const char* what) {
    if (!m.allFinite()) throw NumericError(std::string(what) + " contains non-finite values");
}

}  // namespace vcflow
