#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "dsmoe/activations.hpp"
#include "dsmoe/attention.hpp"
#include "dsmoe/error.hpp"
#include "dsmoe/ffn.hpp"
#include "dsmoe/rmsnorm.hpp"
#include "dsmoe/rng.hpp"
#include "oracles.hpp"

using namespace dsmoe;
using namespace testutil;

namespace {

DenseFFN make_ffn(RngState& rng, int d, int D) {
    DenseFFN f;
    f.w_gate = random_matrix(rng, d, D, 0.5);
    f.u_up = random_matrix(rng, d, D, 0.5);
    f.v_down = random_matrix(rng, D, d, 0.5);
    return f;
}

// Scalar-loop SwiGLU: out[t] = (silu(h_t·W) ⊙ (h_t·U)) · V.
Matrix ffn_ref(const DenseFFN& f, const Matrix& h) {
    const int T = h.rows(), d = f.hidden_dim(), D = f.inter_dim();
    Matrix out(T, d);
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < D; ++j) {
            double a = 0.0, b = 0.0;
            for (int k = 0; k < d; ++k) {
                a += h(t, k) * f.w_gate(k, j);
                b += h(t, k) * f.u_up(k, j);
            }
            const double m = silu(a) * b;
            for (int c = 0; c < d; ++c) out(t, c) += m * f.v_down(j, c);
        }
    }
    return out;
}

// Weighted-sum scalar loss over a forward output: L = Σ C ⊙ f(x).
double weighted(const Matrix& out, const Matrix& c) {
    double s = 0.0;
    for (int r = 0; r < out.rows(); ++r)
        for (int j = 0; j < out.cols(); ++j) s += out(r, j) * c(r, j);
    return s;
}

}  // namespace

TEST_CASE("ffn_forward matches scalar SwiGLU reference") {
    RngState rng{21};
    for (int trial = 0; trial < 5; ++trial) {
        const int d = 2 + static_cast<int>(rng.next_u64() % 6);
        const int D = 2 + static_cast<int>(rng.next_u64() % 10);
        const int T = 1 + static_cast<int>(rng.next_u64() % 5);
        const DenseFFN f = make_ffn(rng, d, D);
        const Matrix h = random_matrix(rng, T, d);
        CHECK(max_abs_diff(ffn_forward(f, h, nullptr), ffn_ref(f, h)) < 1e-12);
    }
}

TEST_CASE("ffn_forward validates shapes") {
    RngState rng{22};
    DenseFFN f = make_ffn(rng, 4, 8);
    CHECK_THROWS_AS(ffn_forward(f, random_matrix(rng, 3, 5), nullptr), ShapeError);
    f.v_down = Matrix(7, 4);
    CHECK_THROWS_AS(f.validate(), ShapeError);
}

TEST_CASE("ffn_backward matches finite differences") {
    RngState rng{23};
    const int d = 5, D = 8, T = 4;
    DenseFFN f = make_ffn(rng, d, D);
    Matrix h = random_matrix(rng, T, d);
    const Matrix c = random_matrix(rng, T, d);

    const auto loss = [&] { return weighted(ffn_forward(f, h, nullptr), c); };

    FFNCache cache;
    ffn_forward(f, h, &cache);
    FFNGrads grads;
    grads.ensure_shape(f);
    const Matrix d_h = ffn_backward(cache, c, grads);

    CHECK(fd_check_matrix(f.w_gate, grads.w_gate, loss) < 1e-6);
    CHECK(fd_check_matrix(f.u_up, grads.u_up, loss) < 1e-6);
    CHECK(fd_check_matrix(f.v_down, grads.v_down, loss) < 1e-6);
    CHECK(fd_check_matrix(h, d_h, loss) < 1e-6);
}

TEST_CASE("ffn_backward accumulates into existing gradients") {
    RngState rng{24};
    const DenseFFN f = make_ffn(rng, 3, 4);
    const Matrix h = random_matrix(rng, 2, 3);
    const Matrix c = random_matrix(rng, 2, 3);

    FFNCache cache;
    ffn_forward(f, h, &cache);
    FFNGrads once;
    once.ensure_shape(f);
    ffn_backward(cache, c, once);

    FFNGrads twice;
    twice.ensure_shape(f);
    ffn_backward(cache, c, twice);
    ffn_backward(cache, c, twice);
    for (int r = 0; r < once.w_gate.rows(); ++r)
        for (int j = 0; j < once.w_gate.cols(); ++j)
            CHECK(twice.w_gate(r, j) == doctest::Approx(2.0 * once.w_gate(r, j)).epsilon(1e-12));
}

TEST_CASE("rmsnorm_forward matches scalar reference") {
    RngState rng{25};
    const int T = 4, d = 6;
    const Matrix x = random_matrix(rng, T, d, 2.0);
    Matrix w = random_matrix(rng, 1, d);
    const Matrix y = rmsnorm_forward(x, w, nullptr);
    for (int t = 0; t < T; ++t) {
        double ms = 0.0;
        for (int c = 0; c < d; ++c) ms += x(t, c) * x(t, c);
        const double inv = 1.0 / std::sqrt(ms / d + kRmsNormEps);
        for (int c = 0; c < d; ++c) CHECK(y(t, c) == doctest::Approx(x(t, c) * inv * w(0, c)).epsilon(1e-14));
    }
}

TEST_CASE("rmsnorm with unit weight preserves scale-invariant direction") {
    RngState rng{26};
    Matrix x = random_matrix(rng, 1, 8);
    const Matrix w(1, 8, 1.0);
    const Matrix y1 = rmsnorm_forward(x, w, nullptr);
    Matrix x2 = x;
    scale_inplace(x2, 3.0);
    const Matrix y2 = rmsnorm_forward(x2, w, nullptr);
    // eps keeps this from being exact; at unit magnitudes it is very close.
    CHECK(max_abs_diff(y1, y2) < 1e-4);
}

TEST_CASE("rmsnorm_backward matches finite differences") {
    RngState rng{27};
    const int T = 3, d = 7;
    Matrix x = random_matrix(rng, T, d);
    Matrix w = random_matrix(rng, 1, d);
    const Matrix c = random_matrix(rng, T, d);

    const auto loss = [&] { return weighted(rmsnorm_forward(x, w, nullptr), c); };

    RmsNormCache cache;
    rmsnorm_forward(x, w, &cache);
    Matrix d_w(1, d);
    const Matrix d_x = rmsnorm_backward(cache, w, c, d_w);

    CHECK(fd_check_matrix(x, d_x, loss) < 1e-6);
    CHECK(fd_check_matrix(w, d_w, loss) < 1e-6);
}

TEST_CASE("attention with one token reduces to v·wo") {
    RngState rng{28};
    AttentionBlock blk;
    const int d = 8;
    blk.wq = random_matrix(rng, d, d);
    blk.wk = random_matrix(rng, d, d);
    blk.wv = random_matrix(rng, d, d);
    blk.wo = random_matrix(rng, d, d);
    blk.head_count = 2;
    const Matrix h = random_matrix(rng, 1, d);
    // One position: each head's softmax over a single score is 1, so the
    // output is exactly (h·wv)·wo.
    const Matrix expect = matmul(matmul(h, blk.wv), blk.wo);
    CHECK(max_abs_diff(attn_forward(blk, h, nullptr), expect) < 1e-12);
}

TEST_CASE("attention single head matches scalar reference") {
    RngState rng{29};
    AttentionBlock blk;
    const int d = 4, T = 5;
    blk.wq = random_matrix(rng, d, d);
    blk.wk = random_matrix(rng, d, d);
    blk.wv = random_matrix(rng, d, d);
    blk.wo = random_matrix(rng, d, d);
    blk.head_count = 1;
    const Matrix h = random_matrix(rng, T, d);

    const Matrix q = matmul_ref(h, blk.wq);
    const Matrix k = matmul_ref(h, blk.wk);
    const Matrix v = matmul_ref(h, blk.wv);
    Matrix concat(T, d);
    for (int i = 0; i < T; ++i) {
        std::vector<double> row(static_cast<std::size_t>(i) + 1);
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += q(i, c) * k(j, c);
            row[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(d));
        }
        const auto p = softmax_row(row);
        for (int c = 0; c < d; ++c) {
            double o = 0.0;
            for (int j = 0; j <= i; ++j) o += p[static_cast<std::size_t>(j)] * v(j, c);
            concat(i, c) = o;
        }
    }
    const Matrix expect = matmul_ref(concat, blk.wo);
    CHECK(max_abs_diff(attn_forward(blk, h, nullptr), expect) < 1e-12);
}

TEST_CASE("causal mask: future tokens cannot influence earlier outputs") {
    RngState rng{30};
    AttentionBlock blk;
    const int d = 8, T = 6;
    blk.wq = random_matrix(rng, d, d);
    blk.wk = random_matrix(rng, d, d);
    blk.wv = random_matrix(rng, d, d);
    blk.wo = random_matrix(rng, d, d);
    blk.head_count = 4;
    Matrix h = random_matrix(rng, T, d);
    const Matrix base = attn_forward(blk, h, nullptr);

    // Perturb the last token; rows 0..T-2 must be bit-identical.
    for (int c = 0; c < d; ++c) h(T - 1, c) += 10.0;
    const Matrix bumped = attn_forward(blk, h, nullptr);
    for (int i = 0; i < T - 1; ++i)
        for (int c = 0; c < d; ++c) CHECK(base(i, c) == bumped(i, c));
}

TEST_CASE("attention probs are strictly causal") {
    RngState rng{31};
    AttentionBlock blk;
    const int d = 6, T = 5;
    blk.wq = random_matrix(rng, d, d);
    blk.wk = random_matrix(rng, d, d);
    blk.wv = random_matrix(rng, d, d);
    blk.wo = random_matrix(rng, d, d);
    blk.head_count = 3;
    const Matrix h = random_matrix(rng, T, d);
    AttnCache cache;
    attn_forward(blk, h, &cache);
    REQUIRE(cache.probs.size() == 3);
    for (const Matrix& p : cache.probs) {
        for (int i = 0; i < T; ++i) {
            double sum = 0.0;
            for (int j = 0; j < T; ++j) {
                if (j > i) CHECK(p(i, j) == 0.0);
                sum += p(i, j);
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("attn_backward matches finite differences") {
    RngState rng{32};
    AttentionBlock blk;
    const int d = 8, T = 5;
    blk.wq = random_matrix(rng, d, d, 0.6);
    blk.wk = random_matrix(rng, d, d, 0.6);
    blk.wv = random_matrix(rng, d, d, 0.6);
    blk.wo = random_matrix(rng, d, d, 0.6);
    blk.head_count = 2;
    Matrix h = random_matrix(rng, T, d);
    const Matrix c = random_matrix(rng, T, d);

    const auto loss = [&] { return weighted(attn_forward(blk, h, nullptr), c); };

    AttnCache cache;
    attn_forward(blk, h, &cache);
    AttnGrads grads;
    grads.ensure_shape(blk);
    const Matrix d_h = attn_backward(cache, c, grads);

    CHECK(fd_check_matrix(blk.wq, grads.wq, loss) < 1e-6);
    CHECK(fd_check_matrix(blk.wk, grads.wk, loss) < 1e-6);
    CHECK(fd_check_matrix(blk.wv, grads.wv, loss) < 1e-6);
    CHECK(fd_check_matrix(blk.wo, grads.wo, loss) < 1e-6);
    CHECK(fd_check_matrix(h, d_h, loss) < 1e-6);
}

TEST_CASE("attention validates head divisibility") {
    AttentionBlock blk;
    blk.wq = Matrix(6, 6);
    blk.wk = Matrix(6, 6);
    blk.wv = Matrix(6, 6);
    blk.wo = Matrix(6, 6);
    blk.head_count = 4;  // 6 % 4 != 0
    CHECK_THROWS_AS(blk.validate(), ShapeError);
    blk.head_count = 0;
    CHECK_THROWS_AS(blk.validate(), ShapeError);
    blk.head_count = 3;
    CHECK_NOTHROW(blk.validate());
}

TEST_CASE("backward without a forward cache is rejected") {
    AttnCache cache;
    AttnGrads grads;
    CHECK_THROWS_AS(attn_backward(cache, Matrix(1, 4), grads), ContractError);
    FFNCache fcache;
    FFNGrads fgrads;
    CHECK_THROWS_AS(ffn_backward(fcache, Matrix(1, 4), fgrads), ContractError);
}
