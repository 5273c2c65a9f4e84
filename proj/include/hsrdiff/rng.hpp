#ifndef HSRDIFF_RNG_HPP
#define HSRDIFF_RNG_HPP

#include <cmath>
#include <cstdint>

namespace hsrdiff {

namespace detail {

// SplitMix64 finalizer; bijective on u64.
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based generator: the draw sequence is a pure function of (seed,
// counter), so persisting those two words restores the stream exactly.
class rng {
public:
    explicit rng(std::uint64_t seed, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    std::uint64_t next_u64() {
        ++counter_;
        return detail::mix64(seed_ + 0x9E3779B97F4A7C15ULL * counter_);
    }

    // [0, 1)
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // (0, 1); never returns an exact endpoint
    double uniform_open01() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    // inclusive on both ends
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Box-Muller without caching: each call consumes exactly two raw draws,
    // keeping the stream position independent of call parity.
    double normal() {
        const double u1 = uniform_open01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Derive an independent sub-stream; used to give data generation, init,
    // training, and sampling their own generators from one root seed.
    rng split(std::uint64_t stream) const {
        return rng(detail::mix64(seed_ ^ detail::mix64(stream + 0x632BE59BD9B4E019ULL)));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }
    void set_counter(std::uint64_t c) { counter_ = c; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

}  // namespace hsrdiff

#endif  // HSRDIFF_RNG_HPP
