#pragma once

#include <cstdint>

#include "dsmoe/matrix.hpp"

namespace dsmoe {

// splitmix64 stream (Steele/Lea/Flood mixing constants). Deterministic across
// platforms: identical seed, identical stream, pure 64-bit integer arithmetic.
struct RngState {
    std::uint64_t state = 0;

    RngState() = default;
    explicit RngState(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double next_double();

    // Standard normal via Box–Muller; burns two uniforms per draw (no spare
    // caching, so the stream position stays a pure function of draw count).
    double next_gaussian();
};

// i.i.d. normal(0, std²) entries in row-major draw order.
Matrix gaussian_init(RngState& rng, int rows, int cols, double std_dev);

}  // namespace dsmoe
