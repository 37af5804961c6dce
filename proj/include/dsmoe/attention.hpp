#pragma once

#include <vector>

#include "dsmoe/matrix.hpp"

namespace dsmoe {

// Multi-head scaled dot-product attention with a strict causal mask:
// position t attends to positions <= t only.
struct AttentionBlock {
    Matrix wq, wk, wv, wo;  // [d,d] each
    int head_count = 1;

    int hidden_dim() const { return wq.rows(); }
    void validate() const;
};

struct AttnCache {
    const AttentionBlock* block = nullptr;
    Matrix input;                // [T,d]
    Matrix q, k, v;              // [T,d]
    std::vector<Matrix> probs;   // per head, [T,T] row-softmax with causal zeros
    Matrix concat;               // [T,d] pre-wo head outputs
};

struct AttnGrads {
    Matrix wq, wk, wv, wo;

    void ensure_shape(const AttentionBlock& block);
};

Matrix attn_forward(const AttentionBlock& block, const Matrix& h, AttnCache* cache);

// Returns d_h; accumulates parameter gradients into `grads`.
Matrix attn_backward(const AttnCache& cache, const Matrix& d_out, AttnGrads& grads);

}  // namespace dsmoe
