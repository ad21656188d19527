#include "kgrl/rng.hpp"

#include <cmath>
#include <numbers>

#include "kgrl/errors.hpp"

namespace kgrl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

CounterRng::CounterRng(std::uint64_t seed, std::uint64_t stream)
    : key_(splitmix64(seed ^ splitmix64(stream * 0xA24BAED4963EE407ULL + 1))), counter_(0) {}

std::uint64_t CounterRng::next_u64() {
    return splitmix64(key_ + counter_++ * 0x9E3779B97F4A7C15ULL);
}

double CounterRng::uniform() {
    // 53 mantissa bits -> [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double CounterRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t CounterRng::uniform_index(std::uint64_t n) {
    if (n == 0) throw UsageError("uniform_index: n must be positive");
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

double CounterRng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double CounterRng::gumbel() {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -std::log(-std::log(u) + 1e-300);
}

int CounterRng::categorical(std::span<const double> pmf) {
    if (pmf.empty()) throw UsageError("categorical: empty pmf");
    double sum = 0.0;
    for (double p : pmf) {
        if (!(p >= 0.0)) throw UsageError("categorical: negative or NaN probability");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw UsageError("categorical: pmf sums to " + std::to_string(sum));
    const double r = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < pmf.size(); ++i) {
        acc += pmf[i];
        if (r < acc) return static_cast<int>(i);
    }
    return static_cast<int>(pmf.size()) - 1;
}

}  // namespace kgrl
