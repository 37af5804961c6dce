#pragma once

#include "dsmoe/matrix.hpp"

namespace dsmoe {

// SwiGLU feed-forward block: out = (silu(h·w_gate) ⊙ (h·u_up)) · v_down.
struct DenseFFN {
    Matrix w_gate;  // [d,D]
    Matrix u_up;    // [d,D]
    Matrix v_down;  // [D,d]

    int hidden_dim() const { return w_gate.rows(); }
    int inter_dim() const { return w_gate.cols(); }
    void validate() const;
};

struct FFNCache {
    const DenseFFN* ffn = nullptr;  // identity of the forward's block
    Matrix input;                   // h [T,d]
    Matrix pre_gate;                // h·w_gate [T,D]
    Matrix pre_up;                  // h·u_up [T,D]
};

struct FFNGrads {
    Matrix w_gate;
    Matrix u_up;
    Matrix v_down;

    void ensure_shape(const DenseFFN& ffn);
};

Matrix ffn_forward(const DenseFFN& ffn, const Matrix& h, FFNCache* cache);

// Returns d_h; accumulates parameter gradients into `grads`.
Matrix ffn_backward(const FFNCache& cache, const Matrix& d_out, FFNGrads& grads);

}  // namespace dsmoe
