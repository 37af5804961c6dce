#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace dsmoe {

// Numerically stable sigmoid: no overflow for large |x|.
inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double sigmoid_prime(double x) {
    const double s = sigmoid(x);
    return s * (1.0 - s);
}

inline double silu(double x) { return x * sigmoid(x); }

inline double silu_prime(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

// Max-subtraction stabilized softmax over one row, in place.
void softmax_row_inplace(std::span<double> v);

std::vector<double> softmax_row(std::span<const double> v);

}  // namespace dsmoe
