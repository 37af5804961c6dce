#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "dsmoe/error.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/rng.hpp"
#include "oracles.hpp"

using namespace dsmoe;
using namespace testutil;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 16;
    c.hidden_dim = 8;
    c.inter_dim = 16;
    c.layer_count = 2;
    c.head_count = 2;
    c.max_seq_len = 8;
    return c;
}

std::vector<int> make_tokens(RngState& rng, int len, int vocab) {
    std::vector<int> t(static_cast<std::size_t>(len));
    for (int& x : t) x = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(vocab));
    return t;
}

// Independent cross-entropy: long-form logsumexp per row, mean over rows.
double lm_loss_ref(const Matrix& logits, std::span<const int> targets) {
    double total = 0.0;
    for (int t = 0; t < logits.rows(); ++t) {
        double mx = logits(t, 0);
        for (int c = 1; c < logits.cols(); ++c) mx = std::max(mx, logits(t, c));
        double z = 0.0;
        for (int c = 0; c < logits.cols(); ++c) z += std::exp(logits(t, c) - mx);
        total += mx + std::log(z) - logits(t, targets[static_cast<std::size_t>(t)]);
    }
    return total / logits.rows();
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());
    c.head_count = 3;  // does not divide hidden_dim 8
    CHECK_THROWS_AS(c.validate(), ParamError);
    c = tiny_config();
    c.vocab_size = 0;
    CHECK_THROWS_AS(c.validate(), ParamError);
    c = tiny_config();
    c.max_seq_len = 0;
    CHECK_THROWS_AS(c.validate(), ParamError);
}

TEST_CASE("init_dense_model shapes and determinism") {
    const ModelConfig c = tiny_config();
    RngState a{3}, b{3};
    const Model m1 = init_dense_model(c, a, 0.02);
    const Model m2 = init_dense_model(c, b, 0.02);
    CHECK(m1.layers.size() == 2);
    CHECK(m1.tok_emb.rows() == 16);
    CHECK(m1.tok_emb.cols() == 8);
    CHECK(m1.pos_emb.rows() == 8);
    CHECK(m1.out_proj.rows() == 8);
    CHECK(m1.out_proj.cols() == 16);
    CHECK(!m1.is_dsmoe());
    // Norm weights start at exactly 1.
    for (int i = 0; i < 8; ++i) CHECK(m1.layers[0].attn_norm(0, i) == 1.0);

    bool same = true;
    visit_params(m1, [&](const std::string&, const Matrix& t1) { (void)t1; });
    std::vector<const Matrix*> p1, p2;
    visit_params(m1, [&](const std::string&, const Matrix& t) { p1.push_back(&t); });
    visit_params(m2, [&](const std::string&, const Matrix& t) { p2.push_back(&t); });
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) same = same && bit_equal(*p1[i], *p2[i]);
    CHECK(same);
}

TEST_CASE("visit_params yields the documented tensor count and names") {
    const ModelConfig c = tiny_config();
    RngState rng{4};
    const Model m = init_dense_model(c, rng, 0.02);
    std::vector<std::string> names;
    visit_params(m, [&](const std::string& n, const Matrix&) { names.push_back(n); });
    // 9 per dense layer + embeddings + output head.
    CHECK(names.size() == 2 * 9 + 3);
    CHECK(names.front() == "tok_emb");
    CHECK(names[1] == "pos_emb");
    CHECK(names[2] == "layers.0.attn_norm");
    CHECK(names[8] == "layers.0.ffn.w_gate");
    CHECK(names.back() == "out_proj");
}

TEST_CASE("model_forward validates tokens") {
    const ModelConfig c = tiny_config();
    RngState rng{5};
    const Model m = init_dense_model(c, rng, 0.02);
    DSMoEForwardFlags flags;
    std::vector<int> bad{0, 1, 99};  // out of vocab
    CHECK_THROWS_AS(model_forward(m, bad, flags, nullptr), InputError);
    std::vector<int> neg{0, -1};
    CHECK_THROWS_AS(model_forward(m, neg, flags, nullptr), InputError);
    std::vector<int> long_seq(9, 1);  // exceeds max_seq_len 8
    CHECK_THROWS_AS(model_forward(m, long_seq, flags, nullptr), InputError);
    std::vector<int> empty;
    CHECK_THROWS_AS(model_forward(m, empty, flags, nullptr), InputError);
}

TEST_CASE("logits are causal end to end") {
    const ModelConfig c = tiny_config();
    RngState rng{6};
    const Model m = init_dense_model(c, rng, 0.05);
    DSMoEForwardFlags flags;
    std::vector<int> toks{1, 2, 3, 4, 5};
    const Matrix base = model_forward(m, toks, flags, nullptr);
    std::vector<int> bumped = toks;
    bumped[4] = 9;
    const Matrix alt = model_forward(m, bumped, flags, nullptr);
    for (int t = 0; t < 4; ++t)
        for (int v = 0; v < c.vocab_size; ++v) CHECK(base(t, v) == alt(t, v));
    // And the changed position must actually differ somewhere.
    double diff = 0.0;
    for (int v = 0; v < c.vocab_size; ++v) diff = std::max(diff, std::abs(base(4, v) - alt(4, v)));
    CHECK(diff > 0.0);
}

TEST_CASE("zeroed sublayers pass the embedding straight through") {
    const ModelConfig c = tiny_config();
    RngState rng{7};
    Model m = init_dense_model(c, rng, 0.05);
    for (auto& layer : m.layers) {
        layer.attn.wq.zero();
        layer.attn.wk.zero();
        layer.attn.wv.zero();
        layer.attn.wo.zero();
        auto& f = std::get<DenseFFN>(layer.ffn);
        f.w_gate.zero();
        f.u_up.zero();
        f.v_down.zero();
    }
    std::vector<int> toks{3, 1, 4};
    DSMoEForwardFlags flags;
    ModelCache cache;
    const Matrix logits = model_forward(m, toks, flags, &cache);

    Matrix emb(3, c.hidden_dim);
    for (int t = 0; t < 3; ++t)
        for (int k = 0; k < c.hidden_dim; ++k)
            emb(t, k) = m.tok_emb(toks[static_cast<std::size_t>(t)], k) + m.pos_emb(t, k);
    CHECK(bit_equal(cache.final_hidden, emb));
    CHECK(bit_equal(logits, matmul(emb, m.out_proj)));
}

TEST_CASE("lm_loss on uniform logits equals log vocab") {
    Matrix logits(3, 16, 0.7);  // constant rows -> uniform distribution
    std::vector<int> targets{0, 5, 15};
    CHECK(lm_loss(logits, targets) == doctest::Approx(std::log(16.0)).epsilon(1e-14));
}

TEST_CASE("lm_loss approaches zero under a confident correct prediction") {
    Matrix logits(2, 8);
    logits(0, 3) = 50.0;
    logits(1, 1) = 50.0;
    std::vector<int> targets{3, 1};
    CHECK(lm_loss(logits, targets) < 1e-12);
}

TEST_CASE("lm_loss matches independent reference on random logits") {
    RngState rng{8};
    const Matrix logits = random_matrix(rng, 6, 12, 3.0);
    std::vector<int> targets;
    for (int t = 0; t < 6; ++t) targets.push_back(static_cast<int>(rng.next_u64() % 12));
    CHECK(lm_loss(logits, targets) == doctest::Approx(lm_loss_ref(logits, targets)).epsilon(1e-13));
}

TEST_CASE("lm_loss validates targets") {
    Matrix logits(3, 8);
    std::vector<int> wrong_len{1, 2};
    CHECK_THROWS_AS(lm_loss(logits, wrong_len), ShapeError);
    std::vector<int> oob{1, 2, 8};
    CHECK_THROWS_AS(lm_loss(logits, oob), InputError);
}

TEST_CASE("lm_loss_with_grad matches finite differences of lm_loss") {
    RngState rng{9};
    Matrix logits = random_matrix(rng, 4, 10, 2.0);
    std::vector<int> targets{7, 0, 3, 9};
    Matrix d(4, 10);
    const double base = lm_loss_with_grad(logits, targets, d);
    CHECK(base == doctest::Approx(lm_loss(logits, targets)).epsilon(1e-14));
    const auto loss = [&] { return lm_loss(logits, targets); };
    CHECK(fd_check_matrix(logits, d, loss) < 1e-6);
    // Rows of softmax-minus-onehot sum to zero.
    for (int t = 0; t < 4; ++t) {
        double s = 0.0;
        for (int v = 0; v < 10; ++v) s += d(t, v);
        CHECK(s == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("model_backward matches finite differences on every tensor") {
    const ModelConfig c = tiny_config();
    RngState rng{10};
    Model m = init_dense_model(c, rng, 0.1);
    std::vector<int> toks = make_tokens(rng, 6, c.vocab_size);
    std::vector<int> targets = make_tokens(rng, 6, c.vocab_size);
    DSMoEForwardFlags flags;

    const auto loss = [&] {
        const Matrix logits = model_forward(m, toks, flags, nullptr);
        return lm_loss(logits, targets);
    };

    ModelCache cache;
    const Matrix logits = model_forward(m, toks, flags, &cache);
    Matrix d_logits(logits.rows(), logits.cols());
    lm_loss_with_grad(logits, targets, d_logits);
    ModelGrads grads;
    grads.ensure_shape(m);
    model_backward(m, cache, d_logits, grads);

    std::vector<Matrix*> params;
    visit_params(m, [&](const std::string&, Matrix& t) { params.push_back(&t); });
    std::vector<Matrix*> gs;
    visit_grads(grads, [&](Matrix& t) { gs.push_back(&t); });
    REQUIRE(params.size() == gs.size());

    RngState pick{77};
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const int samples = std::min(8, params[i]->size());
        worst = std::max(worst, fd_check_sample(*params[i], *gs[i], loss, pick, samples));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("param_count matches a hand sum") {
    const ModelConfig c = tiny_config();
    RngState rng{11};
    const Model m = init_dense_model(c, rng, 0.02);
    // tok 16*8 + pos 8*8 + per layer (2*8 norms + 4*64 attn + 3*(8*16 or 16*8)) + out 8*16
    const std::int64_t expect = 128 + 64 + 2 * (16 + 256 + 384) + 128;
    CHECK(param_count(m) == expect);
    CHECK(ffn_param_count_per_layer(m) == 384);
}

TEST_CASE("dense model keeps ffn cache identity stable for backward") {
    // A second forward on the same cache object must leave it usable.
    const ModelConfig c = tiny_config();
    RngState rng{12};
    Model m = init_dense_model(c, rng, 0.05);
    std::vector<int> toks{1, 2, 3};
    DSMoEForwardFlags flags;
    ModelCache cache;
    model_forward(m, toks, flags, &cache);
    model_forward(m, toks, flags, &cache);
    Matrix d(3, c.vocab_size, 0.1);
    ModelGrads grads;
    grads.ensure_shape(m);
    CHECK_NOTHROW(model_backward(m, cache, d, grads));
}
