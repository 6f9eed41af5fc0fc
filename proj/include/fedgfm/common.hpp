#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fedgfm {

// All dense values are row-major double matrices. Scalars are 1x1, row
// vectors 1xd, per-node columns nx1. Reductions accumulate in double
// regardless of what a storage backend might use.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntVector = Eigen::Matrix<std::int32_t, Eigen::Dynamic, 1>;

// Error taxonomy. Exit codes: 2 config, 3 data/format, 4 numeric, 1 other.
class Error : public std::runtime_error {
public:
    Error(std::string msg, int exit_code) : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
    int exit_code() const { return exit_code_; }

private:
    int exit_code_;
};

class ContractViolation : public Error {
public:
    explicit ContractViolation(const std::string& msg) : Error("contract violation: " + msg, 1) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg, 2) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error("data error: " + msg, 3) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg, 4) {}
};

// FNV-1a, used for parameter digests and seed derivation.
inline std::uint64_t fnv1a_init() { return 1469598103934665603ULL; }

inline std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<std::uint64_t>(p[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t h, std::uint64_t v) { return fnv1a_bytes(h, &v, sizeof v); }

inline std::uint64_t fnv1a_matrix(std::uint64_t h, const Matrix& m) {
    h = fnv1a_u64(h, static_cast<std::uint64_t>(m.rows()));
    h = fnv1a_u64(h, static_cast<std::uint64_t>(m.cols()));
    return fnv1a_bytes(h, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

std::string hex_digest(std::uint64_t h);

// Splitmix-style mix for deriving per-(client, round) seeds from one root seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline double relative_error(double a, double b) {
    return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

}  // namespace fedgfm
