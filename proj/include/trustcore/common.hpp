#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace trustcore {

using Real = float;
using MatX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
using RowMatX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecX = Eigen::Vector<Real, Eigen::Dynamic>;
using VecXi = Eigen::VectorXi;
using IdList = std::vector<int>;

template <class S>
using MatT = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VecT = Eigen::Vector<S, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Errors. One type per contract family so tests can match precisely.
// ---------------------------------------------------------------------------
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : Error {
    using Error::Error;
};
struct CorruptLabelError : FormatError {
    using FormatError::FormatError;
};
struct DegenerateSplitError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ParamError : Error {
    using Error::Error;
};
struct LookupError : Error {
    using Error::Error;
};
struct GeometryError : Error {
    using Error::Error;
};
struct InsufficientPoolError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct TrainingDivergedError : Error {
    using Error::Error;
};
struct UnlearnStallError : Error {
    using Error::Error;
};
struct UndefinedAsrError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct StageError : Error {
    StageError(std::string stage_name, const std::string& what)
        : Error("stage " + stage_name + ": " + what), stage(std::move(stage_name)) {}
    std::string stage;
};

// ---------------------------------------------------------------------------
// Hashing (FNV-1a 64). Used for parameter-group change detection and for
// deriving independent per-stage RNG seeds from one base seed.
// ---------------------------------------------------------------------------
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

template <class S>
std::uint64_t hash_matrix(const MatT<S>& m, std::uint64_t h = 1469598103934665603ull) {
    h = fnv1a(&m, 0, h);  // keep seed chaining uniform
    const auto rows = m.rows(), cols = m.cols();
    h = fnv1a(&rows, sizeof(rows), h);
    h = fnv1a(&cols, sizeof(cols), h);
    return fnv1a(m.data(), sizeof(S) * static_cast<std::size_t>(m.size()), h);
}

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& tag,
                                 std::uint64_t salt = 0) {
    std::uint64_t h = fnv1a(&base, sizeof(base));
    h = fnv1a(tag, h);
    return fnv1a(&salt, sizeof(salt), h);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions below are hand-rolled so streams are reproducible across
// standard libraries as well.
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        if (n <= 0) throw ParamError("uniform_int: n must be positive");
        const auto r = static_cast<unsigned __int128>(gen_()) * static_cast<unsigned __int128>(n);
        return static_cast<int>(r >> 64);
    }

    Real normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = static_cast<Real>(r * std::sin(a));
        have_spare_ = true;
        return static_cast<Real>(r * std::cos(a));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(static_cast<int>(i)))]);
        }
    }

    // Independent child stream; identical (seed, tag, salt) gives an
    // identical stream regardless of how much this Rng has been consumed.
    Rng fork(const std::string& tag, std::uint64_t salt = 0) const {
        return Rng(derive_seed(seed_, tag, salt));
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    Real spare_ = 0;
};

// Fill a matrix with N(0, stddev) draws, column-major order.
template <class S>
void fill_normal(MatT<S>& m, Rng& rng, S stddev) {
    S* p = m.data();
    for (Eigen::Index i = 0; i < m.size(); ++i) p[i] = static_cast<S>(rng.normal()) * stddev;
}

// Fraction-of-count arithmetic with an epsilon guard so that fractions whose
// product is a whole number never round the wrong way (0.01 * 500 must be 5).
inline std::size_t floor_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

inline std::size_t ceil_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

}  // namespace trustcore
