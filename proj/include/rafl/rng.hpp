#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace rafl {

// Seeded generator with library-independent sampling routines, so a seed
// produces the same stream regardless of standard-library distribution
// implementations. The full state round-trips through a string.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (one draw per call, no cached spare).
    double normal();
    /// Normal(0, std) resampled until it lies within ±bound·std.
    double truncated_normal(double std, double bound = 2.0);

    std::string state() const;
    void restore(const std::string& state);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream label into an independent seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

} // namespace rafl
