#include "dsmoe/ffn.hpp"

#include "dsmoe/activations.hpp"
#include "dsmoe/error.hpp"

namespace dsmoe {

void DenseFFN::validate() const {
    if (!w_gate.same_shape(u_up) || v_down.rows() != w_gate.cols() ||
        v_down.cols() != w_gate.rows()) {
        throw ShapeError("DenseFFN: inconsistent shapes w_gate=" + shape_str(w_gate) +
                         " u_up=" + shape_str(u_up) + " v_down=" + shape_str(v_down));
    }
}

void FFNGrads::ensure_shape(const DenseFFN& ffn) {
    if (!w_gate.same_shape(ffn.w_gate)) w_gate = Matrix(ffn.w_gate.rows(), ffn.w_gate.cols());
    if (!u_up.same_shape(ffn.u_up)) u_up = Matrix(ffn.u_up.rows(), ffn.u_up.cols());
    if (!v_down.same_shape(ffn.v_down)) v_down = Matrix(ffn.v_down.rows(), ffn.v_down.cols());
}

Matrix ffn_forward(const DenseFFN& ffn, const Matrix& h, FFNCache* cache) {
    if (h.cols() != ffn.hidden_dim()) {
        throw ShapeError("ffn_forward: input " + shape_str(h) + " does not match w_gate " +
                         shape_str(ffn.w_gate));
    }
    Matrix pre_gate = matmul(h, ffn.w_gate);  // [T,D]
    Matrix pre_up = matmul(h, ffn.u_up);      // [T,D]

    Matrix mixed(pre_gate.rows(), pre_gate.cols());
    for (int t = 0; t < mixed.rows(); ++t) {
        const double* pg = pre_gate.row(t);
        const double* pu = pre_up.row(t);
        double* mr = mixed.row(t);
        for (int j = 0; j < mixed.cols(); ++j) {
            mr[j] = silu(pg[j]) * pu[j];
        }
    }
    mixed.check_finite("ffn_forward");
    Matrix out = matmul(mixed, ffn.v_down);  // [T,d]
    if (cache != nullptr) {
        cache->ffn = &ffn;
        cache->input = h;
        cache->pre_gate = std::move(pre_gate);
        cache->pre_up = std::move(pre_up);
    }
    return out;
}

Matrix ffn_backward(const FFNCache& cache, const Matrix& d_out, FFNGrads& grads) {
    if (cache.ffn == nullptr) {
        throw ContractError("ffn_backward: cache not produced by ffn_forward");
    }
    const DenseFFN& ffn = *cache.ffn;
    const Matrix& h = cache.input;
    if (d_out.rows() != h.rows() || d_out.cols() != ffn.hidden_dim()) {
        throw ContractError("ffn_backward: d_out " + shape_str(d_out) +
                            " does not match cached forward of " + shape_str(h));
    }
    grads.ensure_shape(ffn);

    const int t_len = h.rows(), inter = ffn.inter_dim();

    // Recompute mixed = silu(pre_gate) ⊙ pre_up for the v_down gradient.
    Matrix mixed(t_len, inter);
    for (int t = 0; t < t_len; ++t) {
        const double* pg = cache.pre_gate.row(t);
        const double* pu = cache.pre_up.row(t);
        double* mr = mixed.row(t);
        for (int j = 0; j < inter; ++j) mr[j] = silu(pg[j]) * pu[j];
    }

    Matrix d_mixed = matmul(d_out, transposed(ffn.v_down));  // [T,D]
    matmul_tn_into(grads.v_down, mixed, d_out, /*accumulate=*/true);

    Matrix d_pre_gate(t_len, inter);
    Matrix d_pre_up(t_len, inter);
    for (int t = 0; t < t_len; ++t) {
        const double* dm = d_mixed.row(t);
        const double* pg = cache.pre_gate.row(t);
        const double* pu = cache.pre_up.row(t);
        double* dg = d_pre_gate.row(t);
        double* du = d_pre_up.row(t);
        for (int j = 0; j < inter; ++j) {
            dg[j] = dm[j] * pu[j] * silu_prime(pg[j]);
            du[j] = dm[j] * silu(pg[j]);
        }
    }
    d_pre_gate.check_finite("ffn_backward");
    d_pre_up.check_finite("ffn_backward");

    matmul_tn_into(grads.w_gate, h, d_pre_gate, /*accumulate=*/true);
    matmul_tn_into(grads.u_up, h, d_pre_up, /*accumulate=*/true);

    Matrix d_h = matmul(d_pre_gate, transposed(ffn.w_gate));
    Matrix d_h_up = matmul(d_pre_up, transposed(ffn.u_up));
    add_into(d_h, d_h_up);
    return d_h;
}

}  // namespace dsmoe
