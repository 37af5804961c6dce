#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dsmoe/attention.hpp"
#include "dsmoe/dsmoe.hpp"
#include "dsmoe/ffn.hpp"
#include "dsmoe/matrix.hpp"
#include "dsmoe/rmsnorm.hpp"
#include "dsmoe/rng.hpp"

namespace dsmoe {

struct ModelConfig {
    int vocab_size = 256;
    int hidden_dim = 64;    // d
    int inter_dim = 256;    // FFN expansion width
    int layer_count = 4;
    int head_count = 4;
    int max_seq_len = 128;

    void validate() const;
};

// Pre-norm residual block: h += attn(norm(h)); h += ffn(norm(h)).
// The FFN is either the original dense SwiGLU or its partitioned gated form.
struct TransformerLayer {
    Matrix attn_norm;  // [1,d]
    AttentionBlock attn;
    Matrix ffn_norm;   // [1,d]
    std::variant<DenseFFN, DSMoELayer> ffn;

    bool is_dsmoe() const { return std::holds_alternative<DSMoELayer>(ffn); }
};

// Decoder-only byte LM. No norm after the last layer: a layer whose sublayers
// output zero passes the embedding stream through untouched.
struct Model {
    ModelConfig config;
    Matrix tok_emb;   // [vocab,d]
    Matrix pos_emb;   // [max_seq,d]
    std::vector<TransformerLayer> layers;
    Matrix out_proj;  // [d,vocab]

    bool is_dsmoe() const { return !layers.empty() && layers[0].is_dsmoe(); }
    void validate() const;
};

struct LayerCache {
    RmsNormCache attn_norm;
    AttnCache attn;
    RmsNormCache ffn_norm;
    bool dsmoe = false;
    FFNCache ffn_dense;
    DSMoECache ffn_dsmoe;
};

struct ModelCache {
    std::vector<int> tokens;
    std::vector<LayerCache> layers;
    Matrix final_hidden;  // [T,d], input to out_proj
};

struct LayerGrads {
    Matrix attn_norm;
    AttnGrads attn;
    Matrix ffn_norm;
    bool dsmoe = false;
    FFNGrads ffn_dense;
    DSMoEGrads ffn_dsmoe;
};

struct ModelGrads {
    Matrix tok_emb;
    Matrix pos_emb;
    std::vector<LayerGrads> layers;
    Matrix out_proj;

    void ensure_shape(const Model& model);
    void zero();
};

Model init_dense_model(const ModelConfig& config, RngState& rng, double std_dev);

// Replaces every dense FFN with its n-expert partition and a fresh gate.
void convert_to_dsmoe(Model& model, int n, RngState& rng, double gate_std, double tau);

Matrix model_forward(const Model& model, std::span<const int> tokens, const DSMoEForwardFlags& flags,
                     ModelCache* cache);

// d_logits is ∂loss/∂logits. extra_gate_logit_grads, when given, holds one
// [T,n] matrix per layer added to that layer's gate-logit gradient (the
// sparsity-loss path). Parameter gradients accumulate into `grads`.
void model_backward(const Model& model, const ModelCache& cache, const Matrix& d_logits,
                    ModelGrads& grads, const std::vector<Matrix>* extra_gate_logit_grads = nullptr);

// Mean over positions of −log softmax(logits_t)[target_t].
double lm_loss(const Matrix& logits, std::span<const int> targets);
double lm_loss_with_grad(const Matrix& logits, std::span<const int> targets, Matrix& d_logits);

// Canonical parameter walk; fixed order defines checkpoint and optimizer
// layouts. Fn: (const std::string& name, Matrix& tensor) — or const Matrix&
// when the model is const.
template <typename ModelT, typename Fn>
void visit_params(ModelT& model, Fn&& fn) {
    fn(std::string("tok_emb"), model.tok_emb);
    fn(std::string("pos_emb"), model.pos_emb);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto& layer = model.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "attn_norm", layer.attn_norm);
        fn(p + "attn.wq", layer.attn.wq);
        fn(p + "attn.wk", layer.attn.wk);
        fn(p + "attn.wv", layer.attn.wv);
        fn(p + "attn.wo", layer.attn.wo);
        fn(p + "ffn_norm", layer.ffn_norm);
        if (layer.is_dsmoe()) {
            auto& moe = std::get<DSMoELayer>(layer.ffn);
            for (std::size_t i = 0; i < moe.experts.size(); ++i) {
                const std::string e = p + "ffn.experts." + std::to_string(i) + ".";
                fn(e + "w", moe.experts[i].w);
                fn(e + "u", moe.experts[i].u);
                fn(e + "v", moe.experts[i].v);
            }
            fn(p + "ffn.gate_y", moe.gate_y);
        } else {
            auto& ffn = std::get<DenseFFN>(layer.ffn);
            fn(p + "ffn.w_gate", ffn.w_gate);
            fn(p + "ffn.u_up", ffn.u_up);
            fn(p + "ffn.v_down", ffn.v_down);
        }
    }
    fn(std::string("out_proj"), model.out_proj);
}

// Same walk over a gradient mirror; order matches visit_params exactly.
template <typename GradsT, typename Fn>
void visit_grads(GradsT& grads, Fn&& fn) {
    fn(grads.tok_emb);
    fn(grads.pos_emb);
    for (auto& layer : grads.layers) {
        fn(layer.attn_norm);
        fn(layer.attn.wq);
        fn(layer.attn.wk);
        fn(layer.attn.wv);
        fn(layer.attn.wo);
        fn(layer.ffn_norm);
        if (layer.dsmoe) {
            for (auto& e : layer.ffn_dsmoe.experts) {
                fn(e.w_gate);
                fn(e.u_up);
                fn(e.v_down);
            }
            fn(layer.ffn_dsmoe.gate_y);
        } else {
            fn(layer.ffn_dense.w_gate);
            fn(layer.ffn_dense.u_up);
            fn(layer.ffn_dense.v_down);
        }
    }
    fn(grads.out_proj);
}

std::int64_t param_count(const Model& model);
// Expert w/u/v parameters of one layer's FFN (gates excluded: they run for
// every token and count as always-active).
std::int64_t ffn_param_count_per_layer(const Model& model);

}  // namespace dsmoe
