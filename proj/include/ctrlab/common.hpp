#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ctrlab {

// ---------------------------------------------------------------------------
// Error hierarchy. CLI maps ConfigError -> exit 2, IoError -> exit 3, and
// every other contract violation -> exit 4.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DimError : public Error {
public:
    explicit DimError(const std::string& msg) : Error(msg) {}
};

/// NaN/Inf rejected eagerly; silent propagation hides training bugs.
class NonFiniteError : public Error {
public:
    explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

class InvariantError : public Error {
public:
    explicit InvariantError(const std::string& msg) : Error(msg) {}
};

class RegistryError : public ConfigError {
public:
    explicit RegistryError(const std::string& msg) : ConfigError(msg) {}
};

class VocabError : public Error {
public:
    explicit VocabError(const std::string& msg) : Error(msg) {}
};

class TieError : public Error {
public:
    explicit TieError(const std::string& msg) : Error(msg) {}
};

class DegenerateInputError : public Error {
public:
    explicit DegenerateInputError(const std::string& msg) : Error(msg) {}
};

class ScheduleError : public Error {
public:
    explicit ScheduleError(const std::string& msg) : Error(msg) {}
};

class PartitionError : public InvariantError {
public:
    explicit PartitionError(const std::string& msg) : InvariantError(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// the distributions below are hand-rolled because the std:: ones are
// implementation-defined and would break byte-identical replay.
// ---------------------------------------------------------------------------

namespace rng {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Named stream derivation: hash of root seed + purpose string + indices.
/// Adding a new consumer never perturbs existing streams.
inline std::uint64_t derive(std::uint64_t root, std::string_view purpose,
                            std::initializer_list<std::uint64_t> ids = {}) {
    std::uint64_t h = fnv1a(purpose);
    h = fnv1a_u64(root, h);
    for (std::uint64_t id : ids) {
        h = fnv1a_u64(id, h);
    }
    return splitmix64(h);
}

class Stream {
public:
    explicit Stream(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t bits() { return eng_(); }

    /// Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1]; never zero, safe under log().
    double uniform_pos() { return (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; consumes two uniforms per call.
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v = eng_();
        while (v >= limit) {
            v = eng_();
        }
        return v % n;
    }

    int range(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    long binomial(long n, double p) {
        long clicks = 0;
        for (long i = 0; i < n; ++i) {
            if (uniform() < p) {
                ++clicks;
            }
        }
        return clicks;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace rng

/// Scalar logistic; saturates cleanly at the extremes.
inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace ctrlab
