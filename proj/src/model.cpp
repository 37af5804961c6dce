#include "dsmoe/model.hpp"

#include <cmath>
#include <string>

#include "dsmoe/activations.hpp"
#include "dsmoe/error.hpp"

namespace dsmoe {

void ModelConfig::validate() const {
    if (vocab_size < 1 || hidden_dim < 1 || inter_dim < 1 || layer_count < 1 || head_count < 1)
        throw ParamError("model config: all counts must be >= 1");
    if (max_seq_len < 2) throw ParamError("model config: max_seq_len must be >= 2");
    if (hidden_dim % head_count != 0)
        throw ParamError("model config: head_count " + std::to_string(head_count) +
                         " does not divide hidden_dim " + std::to_string(hidden_dim));
}

void Model::validate() const {
    config.validate();
    if (static_cast<int>(layers.size()) != config.layer_count)
        throw ShapeError("model: layer count mismatch");
    if (tok_emb.rows() != config.vocab_size || tok_emb.cols() != config.hidden_dim)
        throw ShapeError("model: token embedding is " + shape_str(tok_emb));
    if (pos_emb.rows() != config.max_seq_len || pos_emb.cols() != config.hidden_dim)
        throw ShapeError("model: position embedding is " + shape_str(pos_emb));
    if (out_proj.rows() != config.hidden_dim || out_proj.cols() != config.vocab_size)
        throw ShapeError("model: output projection is " + shape_str(out_proj));
    for (const TransformerLayer& layer : layers) {
        layer.attn.validate();
        if (layer.attn_norm.rows() != 1 || layer.attn_norm.cols() != config.hidden_dim ||
            layer.ffn_norm.rows() != 1 || layer.ffn_norm.cols() != config.hidden_dim)
            throw ShapeError("model: norm weight shape mismatch");
        if (layer.is_dsmoe())
            std::get<DSMoELayer>(layer.ffn).validate();
        else
            std::get<DenseFFN>(layer.ffn).validate();
    }
}

void ModelGrads::ensure_shape(const Model& model) {
    const int d = model.config.hidden_dim;
    tok_emb = Matrix(model.config.vocab_size, d);
    pos_emb = Matrix(model.config.max_seq_len, d);
    out_proj = Matrix(d, model.config.vocab_size);
    layers.assign(model.layers.size(), LayerGrads{});
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const TransformerLayer& src = model.layers[l];
        LayerGrads& g = layers[l];
        g.attn_norm = Matrix(1, d);
        g.attn.ensure_shape(src.attn);
        g.ffn_norm = Matrix(1, d);
        g.dsmoe = src.is_dsmoe();
        if (g.dsmoe)
            g.ffn_dsmoe.ensure_shape(std::get<DSMoELayer>(src.ffn));
        else
            g.ffn_dense.ensure_shape(std::get<DenseFFN>(src.ffn));
    }
}

void ModelGrads::zero() {
    visit_grads(*this, [](Matrix& m) { m.zero(); });
}

Model init_dense_model(const ModelConfig& config, RngState& rng, double std_dev) {
    config.validate();
    const int d = config.hidden_dim;
    Model model;
    model.config = config;
    model.tok_emb = gaussian_init(rng, config.vocab_size, d, std_dev);
    model.pos_emb = gaussian_init(rng, config.max_seq_len, d, std_dev);
    model.layers.reserve(config.layer_count);
    for (int l = 0; l < config.layer_count; ++l) {
        TransformerLayer layer;
        layer.attn_norm = Matrix(1, d, 1.0);
        layer.attn.wq = gaussian_init(rng, d, d, std_dev);
        layer.attn.wk = gaussian_init(rng, d, d, std_dev);
        layer.attn.wv = gaussian_init(rng, d, d, std_dev);
        layer.attn.wo = gaussian_init(rng, d, d, std_dev);
        layer.attn.head_count = config.head_count;
        layer.ffn_norm = Matrix(1, d, 1.0);
        DenseFFN ffn;
        ffn.w_gate = gaussian_init(rng, d, config.inter_dim, std_dev);
        ffn.u_up = gaussian_init(rng, d, config.inter_dim, std_dev);
        ffn.v_down = gaussian_init(rng, config.inter_dim, d, std_dev);
        layer.ffn = std::move(ffn);
        model.layers.push_back(std::move(layer));
    }
    model.out_proj = gaussian_init(rng, d, config.vocab_size, std_dev);
    return model;
}

void convert_to_dsmoe(Model& model, int n, RngState& rng, double gate_std, double tau) {
    model.validate();
    if (model.is_dsmoe()) throw ParamError("convert: model is already partitioned");
    if (!(tau > 0.0 && tau < 1.0))
        throw ParamError("convert: tau must lie in (0,1), got " + std::to_string(tau));
    for (TransformerLayer& layer : model.layers) {
        DSMoELayer moe = partition_ffn(std::get<DenseFFN>(layer.ffn), n);
        moe.tau = tau;
        init_gate(moe, rng, gate_std);
        layer.ffn = std::move(moe);
    }
}

Matrix model_forward(const Model& model, std::span<const int> tokens, const DSMoEForwardFlags& flags,
                     ModelCache* cache) {
    const int T = static_cast<int>(tokens.size());
    const int d = model.config.hidden_dim;
    if (T < 1) throw InputError("model forward: empty token sequence");
    if (T > model.config.max_seq_len)
        throw InputError("model forward: sequence length " + std::to_string(T) + " exceeds max " +
                         std::to_string(model.config.max_seq_len));
    for (int t = 0; t < T; ++t)
        if (tokens[t] < 0 || tokens[t] >= model.config.vocab_size)
            throw InputError("model forward: token id " + std::to_string(tokens[t]) +
                             " out of range at position " + std::to_string(t));

    Matrix h(T, d);
    for (int t = 0; t < T; ++t) {
        const double* te = model.tok_emb.row(tokens[t]);
        const double* pe = model.pos_emb.row(t);
        double* dst = h.row(t);
        for (int c = 0; c < d; ++c) dst[c] = te[c] + pe[c];
    }

    if (cache) {
        cache->tokens.assign(tokens.begin(), tokens.end());
        cache->layers.assign(model.layers.size(), LayerCache{});
    }
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const TransformerLayer& layer = model.layers[l];
        LayerCache* lc = cache ? &cache->layers[l] : nullptr;
        try {
            Matrix normed = rmsnorm_forward(h, layer.attn_norm, lc ? &lc->attn_norm : nullptr);
            add_into(h, attn_forward(layer.attn, normed, lc ? &lc->attn : nullptr));
            normed = rmsnorm_forward(h, layer.ffn_norm, lc ? &lc->ffn_norm : nullptr);
            if (layer.is_dsmoe()) {
                if (lc) lc->dsmoe = true;
                add_into(h, dsmoe_forward(std::get<DSMoELayer>(layer.ffn), normed, flags,
                                          lc ? &lc->ffn_dsmoe : nullptr));
            } else {
                add_into(h, ffn_forward(std::get<DenseFFN>(layer.ffn), normed,
                                        lc ? &lc->ffn_dense : nullptr));
            }
        } catch (const NumericalError& e) {
            throw NumericalError("layer " + std::to_string(l) + ": " + e.what());
        }
    }
    if (cache) cache->final_hidden = h;
    return matmul(h, model.out_proj);
}

void model_backward(const Model& model, const ModelCache& cache, const Matrix& d_logits,
                    ModelGrads& grads, const std::vector<Matrix>* extra_gate_logit_grads) {
    const int T = static_cast<int>(cache.tokens.size());
    const int d = model.config.hidden_dim;
    if (cache.layers.size() != model.layers.size())
        throw ContractError("model backward: cache does not match model");
    if (d_logits.rows() != T || d_logits.cols() != model.config.vocab_size)
        throw ShapeError("model backward: d_logits is " + shape_str(d_logits));
    if (extra_gate_logit_grads && extra_gate_logit_grads->size() != model.layers.size())
        throw ShapeError("model backward: extra gate gradient count mismatch");
    grads.ensure_shape(model);

    matmul_tn_into(grads.out_proj, cache.final_hidden, d_logits, /*accumulate=*/true);
    Matrix d_h = matmul(d_logits, transposed(model.out_proj));

    for (int l = static_cast<int>(model.layers.size()) - 1; l >= 0; --l) {
        const TransformerLayer& layer = model.layers[l];
        const LayerCache& lc = cache.layers[l];
        LayerGrads& lg = grads.layers[l];
        // h_out = h_in + f(norm(h_in)): gradient into the sublayer is d_h, and
        // the residual passes d_h through unchanged.
        Matrix d_sub;
        if (layer.is_dsmoe()) {
            d_sub = dsmoe_backward(lc.ffn_dsmoe, d_h, lg.ffn_dsmoe,
                                   extra_gate_logit_grads ? &(*extra_gate_logit_grads)[l] : nullptr);
        } else {
            d_sub = ffn_backward(lc.ffn_dense, d_h, lg.ffn_dense);
        }
        add_into(d_h, rmsnorm_backward(lc.ffn_norm, layer.ffn_norm, d_sub, lg.ffn_norm));
        d_sub = attn_backward(lc.attn, d_h, lg.attn);
        add_into(d_h, rmsnorm_backward(lc.attn_norm, layer.attn_norm, d_sub, lg.attn_norm));
    }

    for (int t = 0; t < T; ++t) {
        const double* src = d_h.row(t);
        double* te = grads.tok_emb.row(cache.tokens[t]);
        double* pe = grads.pos_emb.row(t);
        for (int c = 0; c < d; ++c) {
            te[c] += src[c];
            pe[c] += src[c];
        }
    }
}

double lm_loss(const Matrix& logits, std::span<const int> targets) {
    const int T = logits.rows();
    if (static_cast<int>(targets.size()) != T)
        throw ShapeError("lm_loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(T) + " positions");
    const int V = logits.cols();
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
        const int y = targets[t];
        if (y < 0 || y >= V) throw InputError("lm_loss: target id " + std::to_string(y) + " out of range");
        const double* row = logits.row(t);
        double mx = row[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < V; ++c) sum += std::exp(row[c] - mx);
        total += std::log(sum) - (row[y] - mx);
    }
    const double loss = total / T;
    if (!std::isfinite(loss)) throw NumericalError("lm_loss: non-finite loss");
    return loss;
}

double lm_loss_with_grad(const Matrix& logits, std::span<const int> targets, Matrix& d_logits) {
    const int T = logits.rows();
    const int V = logits.cols();
    const double loss = lm_loss(logits, targets);
    d_logits = Matrix(T, V);
    const double inv_t = 1.0 / T;
    for (int t = 0; t < T; ++t) {
        const double* row = logits.row(t);
        double* g = d_logits.row(t);
        double mx = row[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < V; ++c) sum += std::exp(row[c] - mx);
        const double inv_sum = 1.0 / sum;
        for (int c = 0; c < V; ++c) g[c] = std::exp(row[c] - mx) * inv_sum * inv_t;
        g[targets[t]] -= inv_t;
    }
    return loss;
}

std::int64_t param_count(const Model& model) {
    std::int64_t total = 0;
    visit_params(model, [&](const std::string&, const Matrix& m) { total += m.size(); });
    return total;
}

std::int64_t ffn_param_count_per_layer(const Model& model) {
    if (model.layers.empty()) return 0;
    const TransformerLayer& layer = model.layers[0];
    if (layer.is_dsmoe()) {
        const DSMoELayer& moe = std::get<DSMoELayer>(layer.ffn);
        std::int64_t total = 0;
        for (const ExpertFFN& e : moe.experts) total += e.w.size() + e.u.size() + e.v.size();
        return total;
    }
    const DenseFFN& ffn = std::get<DenseFFN>(layer.ffn);
    return ffn.w_gate.size() + ffn.u_up.size() + ffn.v_down.size();
}

}  // namespace dsmoe
