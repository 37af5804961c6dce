#include "dsmoe/rmsnorm.hpp"

#include <cmath>

#include "dsmoe/error.hpp"

namespace dsmoe {

Matrix rmsnorm_forward(const Matrix& x, const Matrix& weight, RmsNormCache* cache) {
    const int t_len = x.rows(), d = x.cols();
    if (weight.rows() != 1 || weight.cols() != d) {
        throw ShapeError("rmsnorm: weight shape " + shape_str(weight) + " does not match input " +
                         shape_str(x));
    }
    Matrix y(t_len, d);
    std::vector<double> inv_rms(t_len);
    const double* w = weight.row(0);
    for (int t = 0; t < t_len; ++t) {
        const double* xr = x.row(t);
        double ss = 0.0;
        for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const double inv = 1.0 / std::sqrt(ss / d + kRmsNormEps);
        inv_rms[t] = inv;
        double* yr = y.row(t);
        for (int j = 0; j < d; ++j) yr[j] = xr[j] * inv * w[j];
    }
    y.check_finite("rmsnorm_forward");
    if (cache != nullptr) {
        cache->input = x;
        cache->inv_rms = std::move(inv_rms);
    }
    return y;
}

Matrix rmsnorm_backward(const RmsNormCache& cache, const Matrix& weight, const Matrix& d_out,
                        Matrix& d_weight) {
    const Matrix& x = cache.input;
    const int t_len = x.rows(), d = x.cols();
    if (!d_out.same_shape(x)) {
        throw ContractError("rmsnorm_backward: d_out shape " + shape_str(d_out) +
                            " does not match cached input " + shape_str(x));
    }
    if (d_weight.rows() != 1 || d_weight.cols() != d) d_weight = Matrix(1, d);
    Matrix d_x(t_len, d);
    const double* w = weight.row(0);
    double* dw = d_weight.row(0);
    for (int t = 0; t < t_len; ++t) {
        const double* xr = x.row(t);
        const double* go = d_out.row(t);
        double* dx = d_x.row(t);
        const double inv = cache.inv_rms[t];
        // proj = Σ_j g_j·w_j·x_j, shared by every dx_k via the rms term.
        double proj = 0.0;
        for (int j = 0; j < d; ++j) {
            proj += go[j] * w[j] * xr[j];
            dw[j] += go[j] * xr[j] * inv;
        }
        const double inv3_over_d = inv * inv * inv / d;
        for (int k = 0; k < d; ++k) {
            dx[k] = go[k] * w[k] * inv - xr[k] * proj * inv3_over_d;
        }
    }
    d_x.check_finite("rmsnorm_backward");
    return d_x;
}

}  // namespace dsmoe
