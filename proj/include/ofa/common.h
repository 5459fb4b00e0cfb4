#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ofa {

// One exception type per error class surfaced by the library.
struct DimError : std::runtime_error {
    explicit DimError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};
struct InvalidArchError : std::runtime_error {
    explicit InvalidArchError(const std::string& msg) : std::runtime_error("invalid arch: " + msg) {}
};
struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error("state error: " + msg) {}
};
struct InputError : std::runtime_error {
    explicit InputError(const std::string& msg) : std::runtime_error("input error: " + msg) {}
};
struct ManifestError : std::runtime_error {
    explicit ManifestError(const std::string& msg) : std::runtime_error("manifest error: " + msg) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};
struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& msg) : std::runtime_error("corruption error: " + msg) {}
};
struct InfeasibleError : std::runtime_error {
    explicit InfeasibleError(const std::string& msg) : std::runtime_error("infeasible constraint: " + msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error("divergence: " + msg) {}
};

// Tunes the process allocator for the tensor workload: large activation
// buffers churn every step, so they must stay in the arena instead of being
// mmapped and faulted in anew. Call once at startup in long-running tools.
void configure_runtime();

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Combines a seed with stream tags into an independent derived seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

constexpr uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

inline uint64_t fnv1a(const void* ptr, size_t n, uint64_t h = kFnvBasis) {
    const auto* p = static_cast<const unsigned char*>(ptr);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic RNG. All draws go through explicit algorithms on top of
// mt19937 raw output so that serialized state alone reproduces any stream
// (std::*_distribution internals never participate).
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : gen_(static_cast<uint32_t>(splitmix64(seed))) {
        // decorrelate nearby integer seeds
        gen_.seed(static_cast<uint32_t>(splitmix64(seed)) ^ static_cast<uint32_t>(splitmix64(seed) >> 32));
    }

    uint32_t u32() { return gen_(); }

    uint64_t u64() {
        uint64_t hi = gen_();
        return (hi << 32) | gen_();
    }

    // [0, 1) with 53-bit resolution
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds, unbiased via rejection
    int uniform_int(int lo, int hi) {
        uint32_t n = static_cast<uint32_t>(hi - lo) + 1u;
        if (n == 0) return lo + static_cast<int>(u32());  // full 32-bit range
        uint32_t limit = UINT32_MAX - UINT32_MAX % n;
        uint32_t x;
        do {
            x = u32();
        } while (x >= limit);
        return lo + static_cast<int>(x % n);
    }

    // Box-Muller without the cached spare, so state is just the engine state.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Marsaglia-Tsang; alpha < 1 boosted through the alpha+1 recurrence.
    double gamma(double alpha) {
        if (alpha < 1.0) {
            double u = uniform();
            if (u <= 0.0) u = 0x1.0p-53;
            return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
        }
        double d = alpha - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    double beta(double a, double b) {
        double x = gamma(a);
        double y = gamma(b);
        double s = x + y;
        if (s <= 0.0) return 0.5;
        return x / s;
    }

    std::string serialize() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        if (is.fail()) throw FormatError("bad rng state string");
    }

  private:
    std::mt19937 gen_;
};

// Independent stream for (seed, tags): used for per-step randomness so an
// interrupted run resumes bit-identically from the step counter alone.
inline Rng derive_rng(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    return Rng(mix_seed(seed, a, b, c));
}

// stream tags
constexpr uint64_t kStreamInit = 1;
constexpr uint64_t kStreamShuffle = 2;
constexpr uint64_t kStreamAugment = 3;
constexpr uint64_t kStreamArch = 4;
constexpr uint64_t kStreamMixup = 5;
constexpr uint64_t kStreamSearch = 6;

}  // namespace ofa
