#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dsmoe/ffn.hpp"
#include "dsmoe/matrix.hpp"
#include "dsmoe/rng.hpp"

namespace dsmoe {

// One contiguous slice of a partitioned SwiGLU FFN: columns of w_gate/u_up
// and the matching rows of v_down.
struct ExpertFFN {
    Matrix w;  // [d, D/n]
    Matrix u;  // [d, D/n]
    Matrix v;  // [D/n, d]
};

// Partitioned FFN with a thresholded sigmoid gate. An expert contributes to a
// token's output only when its gate value strictly exceeds tau; outputs of
// the surviving experts are rescaled by n/active_count.
struct DSMoELayer {
    std::vector<ExpertFFN> experts;
    Matrix gate_y;   // [d, n]
    double tau = 0.5;
    int n = 0;

    int hidden_dim() const { return gate_y.rows() > 0 ? gate_y.rows() : (experts.empty() ? 0 : experts[0].w.rows()); }
    int expert_inter_dim() const { return experts.empty() ? 0 : experts[0].w.cols(); }
    void validate() const;
};

// Hard gate: identity strictly above tau, zero at or below.
inline double g_piecewise(double x, double tau) { return x > tau ? x : 0.0; }

// Per-token routing decision for one layer.
struct GateDecision {
    Matrix gate_values;               // g = σ(h·Y), [T,n]
    std::vector<std::uint8_t> active; // row-major [T,n], g > tau strictly
    std::vector<int> active_count;    // length T
    std::vector<double> scale;        // n/active_count, or 1.0 when count == 0

    bool is_active(int t, int i, int n) const { return active[static_cast<std::size_t>(t) * n + i] != 0; }
};

struct DSMoEForwardFlags {
    bool ste = true;    // marks the cache: gate columns of inactive experts get
                        // gradient (straight-through) instead of exact zero
    bool use_g = true;  // false: smooth mix over all experts, no mask, no scale
    std::optional<double> tau_override;  // evaluation-time threshold substitute
    bool clamp_gates_to_one = false;     // test hook: gate values forced to exactly 1
};

// Per-expert intermediates for the tokens the expert actually ran on.
struct ExpertSlice {
    std::vector<int> tokens;  // token indices, ascending
    Matrix pre_gate;          // [|tokens|, D/n]
    Matrix pre_up;            // [|tokens|, D/n]
    Matrix out;               // o_i rows, [|tokens|, d]
};

struct DSMoECache {
    const DSMoELayer* layer = nullptr;
    Matrix input;  // [T,d]
    GateDecision gates;
    DSMoEForwardFlags flags;
    std::vector<ExpertSlice> slices;  // one per expert
};

struct DSMoEGrads {
    std::vector<FFNGrads> experts;  // w/u/v gradients per expert
    Matrix gate_y;                  // [d,n]

    void ensure_shape(const DSMoELayer& layer);
};

// Splits a dense FFN into n experts along the intermediate dimension.
// Expert i takes columns [i·D/n, (i+1)·D/n) of w_gate/u_up and the matching
// rows of v_down; values are copied, never altered. The gate is left zeroed
// (every gate value is exactly 0.5 = σ(0), hence inactive under a strict
// threshold of 0.5) until init_gate runs.
DSMoELayer partition_ffn(const DenseFFN& dense, int n);

void init_gate(DSMoELayer& layer, RngState& rng, double std_dev);

// Inverse of partition_ffn: concatenates expert blocks back, bit-exactly.
DenseFFN reconstruct_dense(const DSMoELayer& layer);

Matrix dsmoe_forward(const DSMoELayer& layer, const Matrix& h, const DSMoEForwardFlags& flags,
                     DSMoECache* cache);

// Forward with externally supplied gate values (bypasses σ(h·Y)); the main
// entry point funnels through this, and tests inject exact gate values here.
Matrix dsmoe_forward_given_gates(const DSMoELayer& layer, const Matrix& h, Matrix gate_values,
                                 const DSMoEForwardFlags& flags, DSMoECache* cache);

// Returns d_h; accumulates into `grads`. STE semantics come from the cache's
// flags. `extra_gate_logit_grad`, when given, is added to the gate-logit
// gradient before it is pushed into Y and h (the sparsity-loss path).
Matrix dsmoe_backward(const DSMoECache& cache, const Matrix& d_out, DSMoEGrads& grads,
                      const Matrix* extra_gate_logit_grad = nullptr);

// Counts expert evaluations (one per token×expert pair actually computed) in
// forward passes. Thread-local so concurrent evaluations stay independent.
std::uint64_t expert_eval_count();
void reset_expert_eval_count();

}  // namespace dsmoe
