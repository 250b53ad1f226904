#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace metavim {

using Vec = std::vector<double>;

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
// bad input documents, bad CLI arguments, malformed checkpoints (exit code 2)
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};
// non-finite losses or gradients (exit code 3)
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// splitmix64 generator. Identical sequences on every platform, which keeps
// schedules, initializations and rollouts reproducible byte for byte.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return int(next_u64() % uint64_t(n)); }

    double normal() {
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    void fill_normal(Vec& out) {
        for (double& x : out) x = normal();
    }

    // independent substream, stable under reordering of other streams
    static Rng fork(uint64_t seed, uint64_t stream) {
        return Rng(mix64(seed ^ mix64(stream)));
    }
    static Rng fork(uint64_t seed, uint64_t a, uint64_t b) {
        return Rng(mix64(mix64(seed ^ mix64(a)) ^ mix64(b)));
    }

private:
    uint64_t state_;
};

}  // namespace metavim
