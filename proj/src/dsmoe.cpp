#include "dsmoe/dsmoe.hpp"

#include <cmath>
#include <cstddef>
#include <string>

#include "dsmoe/activations.hpp"
#include "dsmoe/error.hpp"
#include "dsmoe/log.hpp"

namespace dsmoe {

namespace {

thread_local std::uint64_t g_expert_evals = 0;

// Copies the listed rows of src into a dense slice matrix, preserving order.
Matrix gather_rows(const Matrix& src, const std::vector<int>& rows) {
    Matrix out(static_cast<int>(rows.size()), src.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const double* in = src.row(rows[r]);
        double* dst = out.row(static_cast<int>(r));
        for (int c = 0; c < src.cols(); ++c) dst[c] = in[c];
    }
    return out;
}

double row_dot(const double* a, const double* b, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

// o_i = (silu(x·w) ⊙ (x·u)) · v for one expert over the given token rows;
// optionally exposes the two pre-activation products.
Matrix expert_forward(const ExpertFFN& e, const Matrix& x, Matrix* pre_gate_out, Matrix* pre_up_out) {
    Matrix pre_gate = matmul(x, e.w);
    Matrix pre_up = matmul(x, e.u);
    Matrix mixed(pre_gate.rows(), pre_gate.cols());
    for (int i = 0; i < mixed.size(); ++i) mixed.data()[i] = silu(pre_gate.data()[i]) * pre_up.data()[i];
    Matrix out = matmul(mixed, e.v);
    if (pre_gate_out) *pre_gate_out = std::move(pre_gate);
    if (pre_up_out) *pre_up_out = std::move(pre_up);
    return out;
}

}  // namespace

void DSMoELayer::validate() const {
    if (n < 2) throw ParamError("dsmoe layer: expert count must be >= 2, got " + std::to_string(n));
    if (static_cast<int>(experts.size()) != n)
        throw ParamError("dsmoe layer: has " + std::to_string(experts.size()) + " experts, expected " +
                         std::to_string(n));
    if (!(tau > 0.0 && tau < 1.0))
        throw ParamError("dsmoe layer: tau must lie in (0,1), got " + std::to_string(tau));
    const int d = experts[0].w.rows();
    const int dn = experts[0].w.cols();
    for (const ExpertFFN& e : experts) {
        if (e.w.rows() != d || e.w.cols() != dn || e.u.rows() != d || e.u.cols() != dn ||
            e.v.rows() != dn || e.v.cols() != d)
            throw ShapeError("dsmoe layer: expert shapes inconsistent");
    }
    if (gate_y.rows() != d || gate_y.cols() != n)
        throw ShapeError("dsmoe layer: gate is " + shape_str(gate_y) + ", expected " + std::to_string(d) +
                         "x" + std::to_string(n));
}

void DSMoEGrads::ensure_shape(const DSMoELayer& layer) {
    if (static_cast<int>(experts.size()) != layer.n) {
        experts.assign(layer.n, FFNGrads{});
        for (int i = 0; i < layer.n; ++i) {
            experts[i].w_gate = Matrix(layer.experts[i].w.rows(), layer.experts[i].w.cols());
            experts[i].u_up = Matrix(layer.experts[i].u.rows(), layer.experts[i].u.cols());
            experts[i].v_down = Matrix(layer.experts[i].v.rows(), layer.experts[i].v.cols());
        }
    }
    if (gate_y.rows() != layer.gate_y.rows() || gate_y.cols() != layer.gate_y.cols())
        gate_y = Matrix(layer.gate_y.rows(), layer.gate_y.cols());
}

DSMoELayer partition_ffn(const DenseFFN& dense, int n) {
    dense.validate();
    if (n < 2) throw ParamError("partition_ffn: expert count must be >= 2, got " + std::to_string(n));
    const int d = dense.hidden_dim();
    const int D = dense.inter_dim();
    if (D % n != 0)
        throw ParamError("partition_ffn: expert count " + std::to_string(n) +
                         " does not divide intermediate width " + std::to_string(D));
    const int dn = D / n;

    DSMoELayer layer;
    layer.n = n;
    layer.tau = 0.5;
    layer.gate_y = Matrix(d, n);  // zeroed: every gate value is exactly 0.5 until init_gate
    layer.experts.reserve(n);
    for (int i = 0; i < n; ++i) {
        ExpertFFN e{Matrix(d, dn), Matrix(d, dn), Matrix(dn, d)};
        const int col0 = i * dn;
        for (int r = 0; r < d; ++r) {
            const double* wg = dense.w_gate.row(r);
            const double* uu = dense.u_up.row(r);
            double* we = e.w.row(r);
            double* ue = e.u.row(r);
            for (int c = 0; c < dn; ++c) {
                we[c] = wg[col0 + c];
                ue[c] = uu[col0 + c];
            }
        }
        for (int r = 0; r < dn; ++r) {
            const double* vd = dense.v_down.row(col0 + r);
            double* ve = e.v.row(r);
            for (int c = 0; c < d; ++c) ve[c] = vd[c];
        }
        layer.experts.push_back(std::move(e));
    }
    return layer;
}

void init_gate(DSMoELayer& layer, RngState& rng, double std_dev) {
    layer.validate();
    layer.gate_y = gaussian_init(rng, layer.hidden_dim(), layer.n, std_dev);
}

DenseFFN reconstruct_dense(const DSMoELayer& layer) {
    layer.validate();
    const int d = layer.hidden_dim();
    const int dn = layer.expert_inter_dim();
    const int D = dn * layer.n;
    DenseFFN dense{Matrix(d, D), Matrix(d, D), Matrix(D, d)};
    for (int i = 0; i < layer.n; ++i) {
        const ExpertFFN& e = layer.experts[i];
        const int col0 = i * dn;
        for (int r = 0; r < d; ++r) {
            double* wg = dense.w_gate.row(r);
            double* uu = dense.u_up.row(r);
            const double* we = e.w.row(r);
            const double* ue = e.u.row(r);
            for (int c = 0; c < dn; ++c) {
                wg[col0 + c] = we[c];
                uu[col0 + c] = ue[c];
            }
        }
        for (int r = 0; r < dn; ++r) {
            double* vd = dense.v_down.row(col0 + r);
            const double* ve = e.v.row(r);
            for (int c = 0; c < d; ++c) vd[c] = ve[c];
        }
    }
    return dense;
}

Matrix dsmoe_forward(const DSMoELayer& layer, const Matrix& h, const DSMoEForwardFlags& flags,
                     DSMoECache* cache) {
    Matrix z = matmul(h, layer.gate_y);  // [T,n]
    for (int i = 0; i < z.size(); ++i) z.data()[i] = sigmoid(z.data()[i]);
    return dsmoe_forward_given_gates(layer, h, std::move(z), flags, cache);
}

Matrix dsmoe_forward_given_gates(const DSMoELayer& layer, const Matrix& h, Matrix gate_values,
                                 const DSMoEForwardFlags& flags, DSMoECache* cache) {
    layer.validate();
    const int d = layer.hidden_dim();
    const int n = layer.n;
    if (h.cols() != d)
        throw ShapeError("dsmoe forward: input is " + shape_str(h) + ", expected cols " + std::to_string(d));
    const int T = h.rows();
    if (gate_values.rows() != T || gate_values.cols() != n)
        throw ShapeError("dsmoe forward: gate values are " + shape_str(gate_values) + ", expected " +
                         std::to_string(T) + "x" + std::to_string(n));
    if (flags.clamp_gates_to_one) gate_values.fill(1.0);
    gate_values.check_finite("dsmoe gate values");

    const double tau = flags.tau_override.value_or(layer.tau);
    if (!(tau > 0.0 && tau < 1.0))
        throw ParamError("dsmoe forward: tau must lie in (0,1), got " + std::to_string(tau));

    GateDecision gates;
    gates.gate_values = std::move(gate_values);
    gates.active.assign(static_cast<std::size_t>(T) * n, 0);
    gates.active_count.assign(T, 0);
    gates.scale.assign(T, 1.0);
    int zero_active_tokens = 0;
    for (int t = 0; t < T; ++t) {
        const double* g = gates.gate_values.row(t);
        int count = 0;
        for (int i = 0; i < n; ++i) {
            if (g[i] > tau) {  // strict: g == tau stays inactive
                gates.active[static_cast<std::size_t>(t) * n + i] = 1;
                ++count;
            }
        }
        gates.active_count[t] = count;
        gates.scale[t] = count > 0 ? static_cast<double>(n) / count : 1.0;
        if (count == 0) ++zero_active_tokens;
    }
    if (zero_active_tokens > 0)
        logging::debug("dsmoe forward: %d of %d tokens activated no expert (residual carries them)",
                       zero_active_tokens, T);

    std::vector<ExpertSlice> slices(n);
    Matrix out(T, d);  // zeroed; per token accumulate Σ g·o in ascending expert order, scale once after
    for (int i = 0; i < n; ++i) {
        ExpertSlice& slice = slices[i];
        if (flags.use_g) {
            for (int t = 0; t < T; ++t)
                if (gates.is_active(t, i, n)) slice.tokens.push_back(t);
        } else {
            slice.tokens.resize(T);
            for (int t = 0; t < T; ++t) slice.tokens[t] = t;
        }
        if (slice.tokens.empty()) continue;
        Matrix x = gather_rows(h, slice.tokens);
        slice.out = expert_forward(layer.experts[i], x, &slice.pre_gate, &slice.pre_up);
        g_expert_evals += slice.tokens.size();
        for (std::size_t r = 0; r < slice.tokens.size(); ++r) {
            const int t = slice.tokens[r];
            const double g = gates.gate_values(t, i);
            const double* o = slice.out.row(static_cast<int>(r));
            double* dst = out.row(t);
            for (int c = 0; c < d; ++c) dst[c] += g * o[c];
        }
    }
    if (flags.use_g) {
        for (int t = 0; t < T; ++t) {
            const double s = gates.scale[t];
            if (s == 1.0) continue;
            double* row = out.row(t);
            for (int c = 0; c < d; ++c) row[c] *= s;
        }
    }
    out.check_finite("dsmoe forward output");

    if (cache) {
        cache->layer = &layer;
        cache->input = h;
        cache->gates = std::move(gates);
        cache->flags = flags;
        cache->slices = std::move(slices);
    }
    return out;
}

Matrix dsmoe_backward(const DSMoECache& cache, const Matrix& d_out, DSMoEGrads& grads,
                      const Matrix* extra_gate_logit_grad) {
    if (!cache.layer) throw ContractError("dsmoe backward: cache has no layer");
    const DSMoELayer& layer = *cache.layer;
    const int T = cache.input.rows();
    const int d = layer.hidden_dim();
    const int n = layer.n;
    if (d_out.rows() != T || d_out.cols() != d)
        throw ShapeError("dsmoe backward: upstream gradient is " + shape_str(d_out) + ", expected " +
                         std::to_string(T) + "x" + std::to_string(d));
    if (static_cast<int>(cache.slices.size()) != n)
        throw ContractError("dsmoe backward: cache slice count mismatch");
    grads.ensure_shape(layer);

    const bool use_g = cache.flags.use_g;
    const bool ste = cache.flags.ste;
    Matrix d_h(T, d);
    Matrix d_z(T, n);  // gate-logit gradient, assembled then pushed through Y and h once

    for (int i = 0; i < n; ++i) {
        const ExpertSlice& slice = cache.slices[i];
        const ExpertFFN& e = layer.experts[i];
        if (!slice.tokens.empty()) {
            const int rows = static_cast<int>(slice.tokens.size());
            const int dn = e.w.cols();
            // Upstream gradient per ran token, scaled by this expert's forward weight
            // (scale treated as a constant; gate value enters the chain rule directly).
            Matrix d_out_slice(rows, d);
            for (int r = 0; r < rows; ++r) {
                const int t = slice.tokens[r];
                const double g = cache.gates.gate_values(t, i);
                const double m = use_g ? cache.gates.scale[t] * g : g;
                const double* src = d_out.row(t);
                double* dst = d_out_slice.row(r);
                for (int c = 0; c < d; ++c) dst[c] = m * src[c];
            }
            // Gate path for ran tokens: d/dg of (scale · g · o) with o fixed.
            for (int r = 0; r < rows; ++r) {
                const int t = slice.tokens[r];
                const double g = cache.gates.gate_values(t, i);
                const double mult = use_g ? cache.gates.scale[t] : 1.0;
                const double dot = row_dot(d_out.row(t), slice.out.row(r), d);
                d_z(t, i) = mult * dot * g * (1.0 - g);
            }
            Matrix mixed(rows, dn);
            for (int k = 0; k < mixed.size(); ++k)
                mixed.data()[k] = silu(slice.pre_gate.data()[k]) * slice.pre_up.data()[k];
            matmul_tn_into(grads.experts[i].v_down, mixed, d_out_slice, /*accumulate=*/true);
            Matrix d_mixed = matmul(d_out_slice, transposed(e.v));
            Matrix d_pg(rows, dn);
            Matrix d_pu(rows, dn);
            for (int k = 0; k < d_mixed.size(); ++k) {
                const double pg = slice.pre_gate.data()[k];
                d_pg.data()[k] = d_mixed.data()[k] * slice.pre_up.data()[k] * silu_prime(pg);
                d_pu.data()[k] = d_mixed.data()[k] * silu(pg);
            }
            Matrix x = gather_rows(cache.input, slice.tokens);
            matmul_tn_into(grads.experts[i].w_gate, x, d_pg, /*accumulate=*/true);
            matmul_tn_into(grads.experts[i].u_up, x, d_pu, /*accumulate=*/true);
            Matrix d_x = matmul(d_pg, transposed(e.w));
            add_into(d_x, matmul(d_pu, transposed(e.u)));
            for (int r = 0; r < rows; ++r) {
                const double* src = d_x.row(r);
                double* dst = d_h.row(slice.tokens[r]);
                for (int c = 0; c < d; ++c) dst[c] += src[c];
            }
        }
        // Straight-through: gate logits of experts that did not run still receive
        // gradient, which needs their would-be outputs.
        if (use_g && ste && static_cast<int>(slice.tokens.size()) < T) {
            std::vector<int> skipped;
            skipped.reserve(T - slice.tokens.size());
            std::size_t r = 0;
            for (int t = 0; t < T; ++t) {
                if (r < slice.tokens.size() && slice.tokens[r] == t) {
                    ++r;
                    continue;
                }
                skipped.push_back(t);
            }
            Matrix x = gather_rows(cache.input, skipped);
            Matrix o = expert_forward(e, x, nullptr, nullptr);
            for (std::size_t k = 0; k < skipped.size(); ++k) {
                const int t = skipped[k];
                const double g = cache.gates.gate_values(t, i);
                const double dot = row_dot(d_out.row(t), o.row(static_cast<int>(k)), d);
                d_z(t, i) = cache.gates.scale[t] * dot * g * (1.0 - g);
            }
        }
    }

    if (extra_gate_logit_grad) {
        if (extra_gate_logit_grad->rows() != T || extra_gate_logit_grad->cols() != n)
            throw ShapeError("dsmoe backward: extra gate gradient is " + shape_str(*extra_gate_logit_grad) +
                             ", expected " + std::to_string(T) + "x" + std::to_string(n));
        add_into(d_z, *extra_gate_logit_grad);
    }

    matmul_tn_into(grads.gate_y, cache.input, d_z, /*accumulate=*/true);
    matmul_into(d_h, d_z, transposed(layer.gate_y), /*accumulate=*/true);
    d_h.check_finite("dsmoe backward d_h");
    return d_h;
}

std::uint64_t expert_eval_count() { return g_expert_evals; }
void reset_expert_eval_count() { g_expert_evals = 0; }

}  // namespace dsmoe
