#pragma once

#include "dsmoe/matrix.hpp"

namespace dsmoe {

inline constexpr double kRmsNormEps = 1e-5;

struct RmsNormCache {
    Matrix input;                  // [T,d]
    std::vector<double> inv_rms;   // length T
};

// y[t] = x[t] * inv_rms(x[t]) ⊙ w, with inv_rms = 1/sqrt(mean(x²) + eps).
// `weight` is a 1×d row vector.
Matrix rmsnorm_forward(const Matrix& x, const Matrix& weight, RmsNormCache* cache);

// Returns d_x; accumulates the weight gradient into d_weight (1×d).
Matrix rmsnorm_backward(const RmsNormCache& cache, const Matrix& weight, const Matrix& d_out,
                        Matrix& d_weight);

}  // namespace dsmoe
