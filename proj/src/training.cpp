#include "dsmoe/training.hpp"

#include <cmath>
#include <cstddef>

#include <nlohmann/json.hpp>

#include "dsmoe/checkpoint.hpp"
#include "dsmoe/error.hpp"
#include "dsmoe/log.hpp"

namespace dsmoe {

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::dense: return "dense";
        case TrainMode::dsmoe_full: return "dsmoe_full";
        case TrainMode::dsmoe_no_ste: return "dsmoe_no_ste";
        case TrainMode::dsmoe_no_g: return "dsmoe_no_g";
    }
    throw ParamError("train mode: invalid enum value");
}

TrainMode parse_train_mode(const std::string& s) {
    if (s == "dense") return TrainMode::dense;
    if (s == "dsmoe_full") return TrainMode::dsmoe_full;
    if (s == "dsmoe_no_ste") return TrainMode::dsmoe_no_ste;
    if (s == "dsmoe_no_g") return TrainMode::dsmoe_no_g;
    throw ParamError("train mode: unknown mode '" + s +
                     "' (expected dense, dsmoe_full, dsmoe_no_ste, or dsmoe_no_g)");
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ParamError("train config: learning_rate must be > 0");
    if (batch_size < 1) throw ParamError("train config: batch_size must be >= 1");
    if (seq_len < 1) throw ParamError("train config: seq_len must be >= 1");
    if (steps < 1) throw ParamError("train config: steps must be >= 1");
    if (!(tau > 0.0 && tau < 1.0))
        throw ParamError("train config: tau must lie in (0,1), got " + std::to_string(tau));
    if (!(sparsity_weight >= 0.0)) throw ParamError("train config: sparsity_weight must be >= 0");
    if (checkpoint_interval < 0) throw ParamError("train config: checkpoint_interval must be >= 0");
}

void OptimizerState::ensure_shape(const Model& model) {
    std::vector<const Matrix*> params;
    visit_params(model, [&](const std::string&, const Matrix& p) { params.push_back(&p); });
    bool matches = m.size() == params.size() && v.size() == params.size();
    for (std::size_t i = 0; matches && i < params.size(); ++i)
        matches = m[i].same_shape(*params[i]) && v[i].same_shape(*params[i]);
    if (matches) return;
    step = 0;
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Matrix* p : params) {
        m.emplace_back(p->rows(), p->cols());
        v.emplace_back(p->rows(), p->cols());
    }
}

void adam_step(Model& model, const ModelGrads& grads, OptimizerState& state, double lr) {
    if (!(lr > 0.0)) throw ParamError("adam: learning rate must be > 0");
    std::vector<Matrix*> params;
    visit_params(model, [&](const std::string&, Matrix& p) { params.push_back(&p); });
    std::vector<const Matrix*> grad_list;
    visit_grads(const_cast<ModelGrads&>(grads), [&](Matrix& g) { grad_list.push_back(&g); });
    if (params.size() != grad_list.size())
        throw ContractError("adam: " + std::to_string(grad_list.size()) + " gradients for " +
                            std::to_string(params.size()) + " parameters");
    state.ensure_shape(model);

    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& p = *params[k];
        const Matrix& g = *grad_list[k];
        if (!p.same_shape(g))
            throw ShapeError("adam: gradient " + shape_str(g) + " for parameter " + shape_str(p));
        double* pm = state.m[k].data();
        double* pv = state.v[k].data();
        double* pp = p.data();
        const double* pg = g.data();
        for (int i = 0; i < p.size(); ++i) {
            pm[i] = state.beta1 * pm[i] + (1.0 - state.beta1) * pg[i];
            pv[i] = state.beta2 * pv[i] + (1.0 - state.beta2) * pg[i] * pg[i];
            pp[i] -= lr * (pm[i] / bc1) / (std::sqrt(pv[i] / bc2) + state.eps);
        }
        p.check_finite("adam-updated parameter");
    }
}

double sparsity_loss(const std::vector<const Matrix*>& gate_values, double tau, bool use_g) {
    if (gate_values.empty()) throw ShapeError("sparsity loss: no gate layers");
    const int T = gate_values[0]->rows();
    const int n = gate_values[0]->cols();
    for (const Matrix* g : gate_values)
        if (g->rows() != T || g->cols() != n)
            throw ShapeError("sparsity loss: layer gate shapes inconsistent (" + shape_str(*g) + " vs " +
                             std::to_string(T) + "x" + std::to_string(n) + ")");
    const std::size_t L = gate_values.size();
    double total = 0.0;
    for (const Matrix* gm : gate_values) {
        const double* p = gm->data();
        for (int i = 0; i < gm->size(); ++i) {
            const double g = p[i];
            total += use_g ? g_piecewise(g, tau) : g;
        }
    }
    return total / (static_cast<double>(T) * static_cast<double>(L) * static_cast<double>(n));
}

std::vector<Matrix> sparsity_gate_logit_grads(const std::vector<const Matrix*>& gate_values, double tau,
                                              bool use_g, double lambda) {
    if (gate_values.empty()) throw ShapeError("sparsity loss: no gate layers");
    const int T = gate_values[0]->rows();
    const int n = gate_values[0]->cols();
    const double coef =
        lambda / (static_cast<double>(T) * static_cast<double>(gate_values.size()) * static_cast<double>(n));
    std::vector<Matrix> out;
    out.reserve(gate_values.size());
    for (const Matrix* gm : gate_values) {
        Matrix dz(gm->rows(), gm->cols());
        const double* p = gm->data();
        double* q = dz.data();
        for (int i = 0; i < gm->size(); ++i) {
            const double g = p[i];
            const double df = use_g ? (g > tau ? 1.0 : 0.0) : 1.0;
            q[i] = coef * df * g * (1.0 - g);
        }
        out.push_back(std::move(dz));
    }
    return out;
}

double total_loss(double lm, double sparse, double lambda) {
    const double t = lm + lambda * sparse;
    if (!std::isfinite(t)) throw NumericalError("total loss: non-finite value");
    return t;
}

namespace {

DSMoEForwardFlags flags_for_mode(TrainMode mode, const Model& model) {
    DSMoEForwardFlags flags;
    switch (mode) {
        case TrainMode::dense:
            if (model.is_dsmoe()) throw ParamError("train: dense mode on a partitioned model");
            break;
        case TrainMode::dsmoe_full:
            if (!model.is_dsmoe()) throw ParamError("train: dsmoe mode on a dense model");
            flags.ste = true;
            flags.use_g = true;
            break;
        case TrainMode::dsmoe_no_ste:
            if (!model.is_dsmoe()) throw ParamError("train: dsmoe mode on a dense model");
            flags.ste = false;
            flags.use_g = true;
            break;
        case TrainMode::dsmoe_no_g:
            if (!model.is_dsmoe()) throw ParamError("train: dsmoe mode on a dense model");
            flags.ste = false;
            flags.use_g = false;
            break;
    }
    return flags;
}

}  // namespace

StepStats train_step(Model& model, const std::vector<std::vector<int>>& batch, const TrainConfig& config,
                     OptimizerState& state) {
    config.validate();
    const int B = static_cast<int>(batch.size());
    if (B < 1) throw InputError("train step: empty batch");
    for (const std::vector<int>& row : batch)
        if (static_cast<int>(row.size()) != config.seq_len + 1)
            throw ShapeError("train step: batch row has " + std::to_string(row.size()) +
                             " tokens, expected seq_len+1 = " + std::to_string(config.seq_len + 1));
    const DSMoEForwardFlags flags = flags_for_mode(config.mode, model);
    const bool dsmoe = model.is_dsmoe();
    const bool loss_uses_hard_gate = config.mode != TrainMode::dsmoe_no_g;
    const double tau = dsmoe ? std::get<DSMoELayer>(model.layers[0].ffn).tau : config.tau;
    const double lambda = config.sparsity_weight;
    const std::size_t L = model.layers.size();

    ModelGrads grads;
    grads.ensure_shape(model);
    StepStats stats;
    double active_events = 0.0;
    for (int b = 0; b < B; ++b) {
        const std::vector<int>& window = batch[b];
        std::span<const int> inputs(window.data(), static_cast<std::size_t>(config.seq_len));
        std::span<const int> targets(window.data() + 1, static_cast<std::size_t>(config.seq_len));
        ModelCache cache;
        Matrix logits = model_forward(model, inputs, flags, &cache);
        Matrix d_logits;
        stats.lm_loss += lm_loss_with_grad(logits, targets, d_logits);
        scale_inplace(d_logits, 1.0 / B);
        if (dsmoe) {
            std::vector<const Matrix*> gates;
            gates.reserve(L);
            for (const LayerCache& lc : cache.layers) gates.push_back(&lc.ffn_dsmoe.gates.gate_values);
            stats.sparsity_loss += sparsity_loss(gates, tau, loss_uses_hard_gate);
            for (const LayerCache& lc : cache.layers)
                for (int count : lc.ffn_dsmoe.gates.active_count) active_events += count;
            if (lambda > 0.0) {
                std::vector<Matrix> zgrads =
                    sparsity_gate_logit_grads(gates, tau, loss_uses_hard_gate, lambda / B);
                model_backward(model, cache, d_logits, grads, &zgrads);
            } else {
                model_backward(model, cache, d_logits, grads);
            }
        } else {
            model_backward(model, cache, d_logits, grads);
        }
    }
    stats.lm_loss /= B;
    stats.sparsity_loss /= B;
    if (dsmoe) {
        const DSMoELayer& moe = std::get<DSMoELayer>(model.layers[0].ffn);
        stats.active_fraction =
            active_events / (static_cast<double>(B) * config.seq_len * static_cast<double>(L) * moe.n);
    }
    stats.tokens_seen = static_cast<std::int64_t>(B) * config.seq_len;
    adam_step(model, grads, state, config.learning_rate);
    return stats;
}

TrainLoopResult train_loop(Model& model, const Corpus& corpus, const TrainConfig& config,
                           std::ostream* log, const std::string& checkpoint_dir) {
    config.validate();
    model.validate();
    const std::size_t needed = static_cast<std::size_t>(config.seq_len) + 1;
    if (corpus.train_count < needed)
        throw InputError("train loop: training split has " + std::to_string(corpus.train_count) +
                         " tokens, need at least " + std::to_string(needed));
    if (model.is_dsmoe())
        for (TransformerLayer& layer : model.layers) std::get<DSMoELayer>(layer.ffn).tau = config.tau;

    RngState schedule{config.seed};
    const std::uint64_t span = static_cast<std::uint64_t>(corpus.train_count - config.seq_len);
    TrainLoopResult result;
    result.steps.reserve(config.steps);
    OptimizerState state;
    std::int64_t tokens_seen = 0;
    for (int step = 1; step <= config.steps; ++step) {
        std::vector<std::vector<int>> batch(config.batch_size);
        for (int b = 0; b < config.batch_size; ++b) {
            const std::size_t start = static_cast<std::size_t>(schedule.next_u64() % span);
            batch[b].assign(corpus.tokens.begin() + start,
                            corpus.tokens.begin() + start + config.seq_len + 1);
        }
        StepStats stats = train_step(model, batch, config, state);
        tokens_seen += stats.tokens_seen;
        stats.step = step;
        stats.tokens_seen = tokens_seen;
        if (log) {
            nlohmann::json line = {{"step", stats.step},
                                   {"lm_loss", stats.lm_loss},
                                   {"sparsity_loss", stats.sparsity_loss},
                                   {"active_fraction", stats.active_fraction},
                                   {"tokens_seen", stats.tokens_seen}};
            (*log) << line.dump() << "\n";
        }
        if (config.checkpoint_interval > 0 && !checkpoint_dir.empty() &&
            step % config.checkpoint_interval == 0 && step != config.steps)
            save_checkpoint(model, checkpoint_dir + "/step_" + std::to_string(step));
        if (step == config.steps || step % 50 == 0)
            logging::info("train: step %d lm_loss %.4f sparsity %.4f active %.3f", step, stats.lm_loss,
                          stats.sparsity_loss, stats.active_fraction);
        result.steps.push_back(stats);
    }
    if (!checkpoint_dir.empty()) save_checkpoint(model, checkpoint_dir);
    return result;
}

}  // namespace dsmoe
