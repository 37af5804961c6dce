#include "dsmoe/rng.hpp"

#include <cmath>
#include <numbers>

#include "dsmoe/error.hpp"

namespace dsmoe {

std::uint64_t RngState::next_u64() {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double RngState::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::next_gaussian() {
    // u1 in (0, 1] so log() stays finite.
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

Matrix gaussian_init(RngState& rng, int rows, int cols, double std_dev) {
    if (!(std_dev > 0.0)) {
        throw ParamError("gaussian_init: std must be positive, got " + std::to_string(std_dev));
    }
    Matrix m(rows, cols);
    double* p = m.data();
    const std::size_t n = m.size();
    // Box–Muller in pairs; the sine partner of the last draw is discarded when
    // n is odd. Keeps the layout a pure function of (seed, rows, cols, std).
    std::size_t i = 0;
    while (i < n) {
        const double u1 = 1.0 - rng.next_double();
        const double u2 = rng.next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        p[i++] = std_dev * (r * std::cos(a));
        if (i < n) {
            p[i++] = std_dev * (r * std::sin(a));
        }
    }
    m.check_finite("gaussian_init");
    return m;
}

}  // namespace dsmoe
