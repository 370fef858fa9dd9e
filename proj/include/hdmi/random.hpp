#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace hdmi {

// SplitMix64 finalizer. Used to derive independent seed substreams from a
// master seed plus a list of integer keys (replication, method, chain, ...).
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = mix64(base);
    for (auto k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
    return h;
}

/// Random stream owned by exactly one computation. Wraps a 64-bit Mersenne
/// twister with the distributions the samplers need.
class Rng {
public:
    using engine_type = std::mt19937_64;

    explicit Rng(std::uint64_t seed = 0x5eed) : engine_(seed) {}

    engine_type& engine() { return engine_; }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double gaussian() { return normal_(engine_); }

    double gaussian(double mean, double sd) { return mean + sd * normal_(engine_); }

    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) throw std::invalid_argument("Rng::index: empty range");
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    double gamma(double shape, double rate) { return std::exp(log_gamma(shape, rate)); }

    /// Log of a Gamma(shape, rate) draw. Shapes below one use
    /// G(a) = G(a + 1) U^(1/a), which underflows in linear scale for small a.
    double log_gamma(double shape, double rate) {
        if (shape >= 1.0) return std::log(std::gamma_distribution<double>(shape, 1.0)(engine_)) - std::log(rate);
        const double g = std::gamma_distribution<double>(shape + 1.0, 1.0)(engine_);
        const double u = 1.0 - uniform();
        return std::log(g) + std::log(u) / shape - std::log(rate);
    }

    double chi_squared(double df) { return std::chi_squared_distribution<double>(df)(engine_); }

    double beta(double a, double b) {
        const double x = gamma(a, 1.0);
        const double y = gamma(b, 1.0);
        if (x + y == 0.0) return a / (a + b);
        return x / (x + y);
    }

    double inverse_gamma(double shape, double rate) { return 1.0 / gamma(shape, rate); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Sample of size k without replacement from {0, ..., n-1}, in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + index(n - i);
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

    std::vector<std::size_t> bootstrap_indices(std::size_t n) {
        std::vector<std::size_t> out(n);
        for (auto& v : out) v = index(n);
        return out;
    }

private:
    engine_type engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Normal distribution helpers
// ---------------------------------------------------------------------------

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// log Phi(z), accurate deep into the lower tail.
inline double log_normal_cdf(double z) {
    // erfc keeps full relative precision until it underflows near z = -37.
    if (z > -35.0) return std::log(normal_cdf(z));
    // Asymptotic expansion of the Mills ratio.
    const double z2 = z * z;
    double series = 1.0;
    double term = 1.0;
    for (int k = 1; k <= 6; ++k) {
        term *= -(2.0 * k - 1.0) / z2;
        series += term;
    }
    return -0.5 * z2 - std::log(-z) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(series);
}

/// Draw from N(0,1) truncated to [a, +inf).
inline double truncated_standard_normal_lower(Rng& rng, double a) {
    if (a <= 0.0) {
        for (;;) {
            const double x = rng.gaussian();
            if (x >= a) return x;
        }
    }
    if (a < 0.45) {
        // Half-normal rejection.
        for (;;) {
            const double x = std::abs(rng.gaussian());
            if (x >= a) return x;
        }
    }
    // Robert (1995) translated-exponential proposal.
    const double alpha = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
        const double x = a - std::log(1.0 - rng.uniform()) / alpha;
        const double d = x - alpha;
        if (rng.uniform() <= std::exp(-0.5 * d * d)) return x;
    }
}

/// Draw from N(mean, sd^2) restricted to (0, +inf).
inline double truncated_normal_positive(Rng& rng, double mean, double sd) {
    return mean + sd * truncated_standard_normal_lower(rng, -mean / sd);
}

/// Draw from N(mean, sd^2) restricted to (-inf, 0).
inline double truncated_normal_negative(Rng& rng, double mean, double sd) {
    return -truncated_normal_positive(rng, -mean, sd);
}

inline double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

} // namespace hdmi
