#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace kgrl {

// Counter-based pseudo-random generator. The state is (key, counter); every
// draw advances the counter and feeds it through the splitmix64 finalizer,
// so streams can be re-created from (seed, stream) and never depend on call
// history beyond the number of draws.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();

    // Uniform on [0, 1).
    double uniform();
    // Uniform on [lo, hi).
    double uniform(double lo, double hi);
    // Integer uniform on [0, n).
    std::uint64_t uniform_index(std::uint64_t n);
    // Standard normal via Box-Muller (one value per call).
    double normal();
    // Standard Gumbel: -log(-log(U)).
    double gumbel();
    // Index sample from an (unnormalized is rejected) pmf via inverse CDF.
    int categorical(std::span<const double> pmf);

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_;
};

}  // namespace kgrl
