#include "dsmoe/attention.hpp"

#include <cmath>

#include "dsmoe/activations.hpp"
#include "dsmoe/error.hpp"

namespace dsmoe {

void AttentionBlock::validate() const {
    const int d = wq.rows();
    auto square = [&](const Matrix& m) { return m.rows() == d && m.cols() == d; };
    if (!square(wq) || !square(wk) || !square(wv) || !square(wo)) {
        throw ShapeError("AttentionBlock: projections must share shape " + shape_str(wq));
    }
    if (head_count < 1 || d % head_count != 0) {
        throw ShapeError("AttentionBlock: head_count " + std::to_string(head_count) +
                         " must divide d=" + std::to_string(d));
    }
}

void AttnGrads::ensure_shape(const AttentionBlock& block) {
    const int d = block.hidden_dim();
    auto ensure = [&](Matrix& m) {
        if (m.rows() != d || m.cols() != d) m = Matrix(d, d);
    };
    ensure(wq);
    ensure(wk);
    ensure(wv);
    ensure(wo);
}

Matrix attn_forward(const AttentionBlock& block, const Matrix& h, AttnCache* cache) {
    block.validate();
    const int t_len = h.rows(), d = block.hidden_dim();
    if (h.cols() != d) {
        throw ShapeError("attn_forward: input " + shape_str(h) + " does not match wq " +
                         shape_str(block.wq));
    }
    const int heads = block.head_count;
    const int hd = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix q = matmul(h, block.wq);
    Matrix k = matmul(h, block.wk);
    Matrix v = matmul(h, block.wv);

    Matrix concat(t_len, d);
    std::vector<Matrix> probs;
    probs.reserve(heads);

    for (int hh = 0; hh < heads; ++hh) {
        const int co = hh * hd;
        Matrix p(t_len, t_len);  // masked entries stay exactly 0
        for (int i = 0; i < t_len; ++i) {
            double* prow = p.row(i);
            for (int j = 0; j <= i; ++j) {
                double s = 0.0;
                const double* qi = q.row(i) + co;
                const double* kj = k.row(j) + co;
                for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
                prow[j] = s * inv_scale;
            }
            softmax_row_inplace({prow, static_cast<std::size_t>(i + 1)});
        }
        for (int i = 0; i < t_len; ++i) {
            const double* prow = p.row(i);
            double* orow = concat.row(i) + co;
            for (int c = 0; c < hd; ++c) orow[c] = 0.0;
            for (int j = 0; j <= i; ++j) {
                const double pij = prow[j];
                const double* vj = v.row(j) + co;
                for (int c = 0; c < hd; ++c) orow[c] += pij * vj[c];
            }
        }
        probs.push_back(std::move(p));
    }
    concat.check_finite("attn_forward");
    Matrix out = matmul(concat, block.wo);

    if (cache != nullptr) {
        cache->block = &block;
        cache->input = h;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->concat = std::move(concat);
    }
    return out;
}

Matrix attn_backward(const AttnCache& cache, const Matrix& d_out, AttnGrads& grads) {
    if (cache.block == nullptr) {
        throw ContractError("attn_backward: cache not produced by attn_forward");
    }
    const AttentionBlock& block = *cache.block;
    const Matrix& h = cache.input;
    const int t_len = h.rows(), d = block.hidden_dim();
    if (d_out.rows() != t_len || d_out.cols() != d) {
        throw ContractError("attn_backward: d_out " + shape_str(d_out) +
                            " does not match cached forward of " + shape_str(h));
    }
    grads.ensure_shape(block);
    const int heads = block.head_count;
    const int hd = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Matrix d_concat = matmul(d_out, transposed(block.wo));
    matmul_tn_into(grads.wo, cache.concat, d_out, /*accumulate=*/true);

    Matrix d_q(t_len, d), d_k(t_len, d), d_v(t_len, d);

    for (int hh = 0; hh < heads; ++hh) {
        const int co = hh * hd;
        const Matrix& p = cache.probs[hh];
        for (int i = 0; i < t_len; ++i) {
            const double* prow = p.row(i);
            const double* dco = d_concat.row(i) + co;

            // d_v accumulation and dP over the causal window.
            std::vector<double> dp(i + 1);
            for (int j = 0; j <= i; ++j) {
                const double* vj = cache.v.row(j) + co;
                double s = 0.0;
                for (int c = 0; c < hd; ++c) s += dco[c] * vj[c];
                dp[j] = s;
                double* dvj = d_v.row(j) + co;
                const double pij = prow[j];
                for (int c = 0; c < hd; ++c) dvj[c] += pij * dco[c];
            }
            // Softmax backward within the window.
            double inner = 0.0;
            for (int j = 0; j <= i; ++j) inner += dp[j] * prow[j];
            double* dqi = d_q.row(i) + co;
            for (int j = 0; j <= i; ++j) {
                const double ds = prow[j] * (dp[j] - inner) * inv_scale;
                const double* kj = cache.k.row(j) + co;
                const double* qi = cache.q.row(i) + co;
                double* dkj = d_k.row(j) + co;
                for (int c = 0; c < hd; ++c) {
                    dqi[c] += ds * kj[c];
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }
    d_q.check_finite("attn_backward");

    matmul_tn_into(grads.wq, h, d_q, /*accumulate=*/true);
    matmul_tn_into(grads.wk, h, d_k, /*accumulate=*/true);
    matmul_tn_into(grads.wv, h, d_v, /*accumulate=*/true);

    Matrix d_h = matmul(d_q, transposed(block.wq));
    add_into(d_h, matmul(d_k, transposed(block.wk)));
    add_into(d_h, matmul(d_v, transposed(block.wv)));
    return d_h;
}

}  // namespace dsmoe
