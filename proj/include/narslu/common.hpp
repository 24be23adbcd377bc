#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace narslu {

using Index = Eigen::Index;

// Row-major throughout: matches the on-disk layout of checkpoints and
// feature files, so loads/stores are straight memcpys.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// Error taxonomy. The CLI maps these onto exit codes (usage 1, io 2,
// numeric 3); library code throws and never exits.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct InfeasibleTargetError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

inline std::string shape_str(Index rows, Index cols) {
    std::ostringstream os;
    os << "[" << rows << "x" << cols << "]";
    return os.str();
}

template <typename Scalar>
std::string shape_str(const Matrix<Scalar>& m) {
    return shape_str(m.rows(), m.cols());
}

// Deterministic RNG used everywhere randomness is needed. mt19937_64 has a
// standardized sequence, and the derived draws below avoid the
// implementation-defined std::*_distribution classes, so identical seeds give
// identical streams on any platform. State round-trips through text for
// resumable training.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ContractError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return x % n;
    }

    int range_int(int lo, int hi) {  // inclusive bounds
        if (hi < lo) throw ContractError("Rng::range_int: empty range");
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    double uniform() {  // [0, 1) with 53 random bits
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Box-Muller, cosine branch only: one value per call keeps the state
    // exactly equal to the engine state (no cached spare to serialize).
    double gaussian() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw IoError("Rng::load_state: malformed state string");
    }

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace narslu
