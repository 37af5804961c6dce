#include "dsmoe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dsmoe/error.hpp"
#include "dsmoe/log.hpp"

namespace dsmoe {

namespace {

constexpr const char* kActivatedParamsFormula =
    "(always_active_params + sum_over_layers(mean_active_fraction_l * ffn_expert_params_l)) / total_params";

void ensure_parent_dir(const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path parent = fs::path(path).parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
}

}  // namespace

EvalResult eval_model(const Model& model, std::span<const int> tokens, int seq_len,
                      std::optional<double> tau_override) {
    model.validate();
    if (seq_len < 1) throw ParamError("evaluation: seq_len must be >= 1");
    const std::size_t len = tokens.size();
    if (len < 2)
        throw InputError("evaluation: corpus has " + std::to_string(len) +
                         " tokens, need at least 2 for one prediction");

    const bool dsmoe = model.is_dsmoe();
    DSMoEForwardFlags flags;
    flags.ste = false;
    flags.use_g = true;
    flags.tau_override = tau_override;

    const std::size_t L = model.layers.size();
    const int n = dsmoe ? std::get<DSMoELayer>(model.layers[0].ffn).n : 0;
    std::vector<std::vector<std::int64_t>> active_counts(L, std::vector<std::int64_t>(std::max(n, 1), 0));
    std::int64_t zero_events = 0;
    std::int64_t stat_tokens = 0;

    double total_nll = 0.0;
    std::int64_t predictions = 0;
    std::size_t pos = 0;
    while (pos + 1 < len) {
        const std::size_t window = std::min<std::size_t>(static_cast<std::size_t>(seq_len) + 1, len - pos);
        std::span<const int> inputs = tokens.subspan(pos, window - 1);
        std::span<const int> targets = tokens.subspan(pos + 1, window - 1);
        ModelCache cache;
        Matrix logits = model_forward(model, inputs, flags, dsmoe ? &cache : nullptr);
        const double mean_nll = lm_loss(logits, targets);
        total_nll += mean_nll * static_cast<double>(window - 1);
        predictions += static_cast<std::int64_t>(window - 1);
        if (dsmoe) {
            const int T = static_cast<int>(window - 1);
            stat_tokens += T;
            for (std::size_t l = 0; l < L; ++l) {
                const GateDecision& gates = cache.layers[l].ffn_dsmoe.gates;
                for (int t = 0; t < T; ++t) {
                    if (gates.active_count[t] == 0) ++zero_events;
                    for (int i = 0; i < n; ++i)
                        if (gates.is_active(t, i, n)) ++active_counts[l][i];
                }
            }
        }
        pos += window - 1;
    }

    EvalResult result;
    result.token_count = predictions;
    result.mean_loss = total_nll / static_cast<double>(predictions);
    result.ppl = std::exp(result.mean_loss);
    if (!std::isfinite(result.ppl)) throw NumericalError("evaluation: non-finite perplexity");

    if (dsmoe) {
        ActivationStats stats;
        stats.per_layer_expert_freq = Matrix(static_cast<int>(L), n);
        stats.mean_active_per_layer.assign(L, 0.0);
        double freq_sum = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
            double layer_sum = 0.0;
            for (int i = 0; i < n; ++i) {
                const double f = static_cast<double>(active_counts[l][i]) / static_cast<double>(stat_tokens);
                stats.per_layer_expert_freq(static_cast<int>(l), i) = f;
                layer_sum += f;
            }
            stats.mean_active_per_layer[l] = layer_sum;  // = n * mean of the row
            freq_sum += layer_sum;
        }
        stats.overall_active_fraction = freq_sum / (static_cast<double>(L) * n);
        stats.zero_active_token_rate =
            static_cast<double>(zero_events) / (static_cast<double>(stat_tokens) * static_cast<double>(L));
        const std::int64_t total = param_count(model);
        const std::int64_t ffn_per_layer = ffn_param_count_per_layer(model);
        const std::int64_t always = total - ffn_per_layer * static_cast<std::int64_t>(L);
        double active_params = static_cast<double>(always);
        for (std::size_t l = 0; l < L; ++l)
            active_params += stats.mean_active_per_layer[l] / n * static_cast<double>(ffn_per_layer);
        stats.activated_param_fraction = active_params / static_cast<double>(total);
        result.stats = std::move(stats);
    }
    return result;
}

double perplexity(const Model& model, std::span<const int> tokens, int seq_len,
                  std::optional<double> tau_override) {
    return eval_model(model, tokens, seq_len, tau_override).ppl;
}

ActivationStats collect_activation_stats(const Model& model, std::span<const int> tokens, int seq_len,
                                         std::optional<double> tau_override) {
    if (!model.is_dsmoe())
        throw ParamError("activation stats: model has no gated layers (dense mode)");
    return *eval_model(model, tokens, seq_len, tau_override).stats;
}

std::vector<SweepRow> tau_sweep(const Model& model, std::span<const int> tokens, int seq_len,
                                const std::vector<double>& taus) {
    if (!model.is_dsmoe()) throw ParamError("tau sweep: model has no gated layers (dense mode)");
    if (taus.empty()) throw ParamError("tau sweep: no thresholds given");
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (!(taus[i] > 0.0 && taus[i] < 1.0))
            throw ParamError("tau sweep: threshold " + std::to_string(taus[i]) + " outside (0,1)");
        if (i > 0 && !(taus[i] > taus[i - 1]))
            throw ParamError("tau sweep: thresholds must be strictly increasing");
    }
    const int n = std::get<DSMoELayer>(model.layers[0].ffn).n;
    std::vector<SweepRow> rows;
    rows.reserve(taus.size());
    for (double tau : taus) {
        EvalResult r = eval_model(model, tokens, seq_len, tau);
        SweepRow row;
        row.tau = tau;
        row.ppl = r.ppl;
        row.mean_active_experts = r.stats->overall_active_fraction * n;
        row.activated_param_fraction = r.stats->activated_param_fraction;
        rows.push_back(row);
    }
    return rows;
}

void export_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("sweep csv: cannot write '" + path + "'");
    out << "tau,ppl,mean_active_experts,activated_param_fraction\n";
    char buf[256];
    for (const SweepRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g\n", r.tau, r.ppl, r.mean_active_experts,
                      r.activated_param_fraction);
        out << buf;
    }
    if (!out) throw IoError("sweep csv: write failed for '" + path + "'");
}

std::vector<SweepRow> parse_sweep_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("sweep csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "tau,ppl,mean_active_experts,activated_param_fraction")
        throw InputError("sweep csv: unexpected header in '" + path + "'");
    std::vector<SweepRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        SweepRow r;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf", &r.tau, &r.ppl, &r.mean_active_experts,
                        &r.activated_param_fraction) != 4)
            throw InputError("sweep csv: malformed row '" + line + "' in '" + path + "'");
        rows.push_back(r);
    }
    return rows;
}

void export_heatmap(const ActivationStats& stats, const std::string& path) {
    const Matrix& f = stats.per_layer_expert_freq;
    if (f.rows() < 1 || f.cols() < 1) throw ParamError("heatmap: empty frequency matrix");
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("heatmap: cannot write '" + path + "'");
    out << "layer";
    for (int i = 0; i < f.cols(); ++i) out << ",e" << i;
    out << "\n";
    char buf[32];
    for (int l = 0; l < f.rows(); ++l) {
        out << l;
        for (int i = 0; i < f.cols(); ++i) {
            std::snprintf(buf, sizeof buf, ",%.6f", f(l, i));
            out << buf;
        }
        out << "\n";
    }
    if (!out) throw IoError("heatmap: write failed for '" + path + "'");
}

Matrix parse_heatmap_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("heatmap: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line.rfind("layer,e0", 0) != 0)
        throw InputError("heatmap: unexpected header in '" + path + "'");
    const int n = static_cast<int>(std::count(line.begin(), line.end(), ','));
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            if (first) {
                first = false;
                continue;
            }
            row.push_back(std::stod(cell));
        }
        if (static_cast<int>(row.size()) != n)
            throw InputError("heatmap: malformed row '" + line + "' in '" + path + "'");
        rows.push_back(std::move(row));
    }
    Matrix m(static_cast<int>(rows.size()), n);
    for (int l = 0; l < m.rows(); ++l)
        for (int i = 0; i < n; ++i) m(l, i) = rows[l][i];
    return m;
}

const AblationArm* AblationReport::find(const std::string& name) const {
    for (const AblationArm& arm : arms)
        if (arm.name == name) return &arm;
    return nullptr;
}

nlohmann::json AblationReport::to_json() const {
    nlohmann::json arms_json;
    for (const AblationArm& arm : arms) {
        nlohmann::json a = {{"failed", arm.failed}};
        if (arm.failed) {
            a["error"] = arm.error;
        } else {
            a["ppl"] = arm.final_ppl;
            a["lm_loss"] = arm.final_lm_loss;
            a["mean_active_experts"] = arm.mean_active_experts;
            a["active_fraction"] = arm.active_fraction;
            a["activated_param_fraction"] = arm.activated_param_fraction;
            if (arm.matched) {
                a["matched"] = {{"tau", arm.matched->tau},
                                {"ppl", arm.matched->ppl},
                                {"mean_active_experts", arm.matched->mean_active_experts},
                                {"activated_param_fraction", arm.matched->activated_param_fraction}};
            }
        }
        arms_json[arm.name] = std::move(a);
    }
    return nlohmann::json{{"activated_param_fraction_formula", kActivatedParamsFormula},
                          {"arms", std::move(arms_json)}};
}

AblationReport run_ablation_suite(const Model& converted, const Corpus& corpus, const TrainConfig& base,
                                  std::vector<Model>* trained_out) {
    converted.validate();
    if (!converted.is_dsmoe()) throw ParamError("ablation: model must be partitioned first");
    base.validate();

    struct ArmSetup {
        const char* name;
        TrainMode mode;
        double lambda;
    };
    const ArmSetup setups[] = {
        {"dsmoe_full", TrainMode::dsmoe_full, base.sparsity_weight},
        {"dsmoe_no_ste", TrainMode::dsmoe_no_ste, base.sparsity_weight},
        {"dsmoe_no_g", TrainMode::dsmoe_no_g, base.sparsity_weight},
        {"lambda0", TrainMode::dsmoe_full, 0.0},
    };

    AblationReport report;
    std::vector<Model> trained;
    trained.reserve(4);
    for (const ArmSetup& setup : setups) {
        AblationArm arm;
        arm.name = setup.name;
        Model model = converted;  // identical starting point for every arm
        TrainConfig cfg = base;
        cfg.mode = setup.mode;
        cfg.sparsity_weight = setup.lambda;
        try {
            logging::info("ablation: training arm %s", setup.name);
            TrainLoopResult run = train_loop(model, corpus, cfg, nullptr);
            EvalResult eval = eval_model(model, corpus.val(), cfg.seq_len);
            arm.final_ppl = eval.ppl;
            arm.final_lm_loss = eval.mean_loss;
            arm.mean_active_experts =
                eval.stats->overall_active_fraction * std::get<DSMoELayer>(model.layers[0].ffn).n;
            arm.active_fraction = eval.stats->overall_active_fraction;
            arm.activated_param_fraction = eval.stats->activated_param_fraction;
            (void)run;
        } catch (const NumericalError& e) {
            arm.failed = true;
            arm.error = e.what();
            logging::info("ablation: arm %s failed numerically: %s", setup.name, e.what());
        }
        report.arms.push_back(std::move(arm));
        trained.push_back(std::move(model));
    }

    // Compare the smooth-mixture arm against the full recipe at the threshold
    // whose activation level lands nearest the full arm's.
    AblationArm* full = nullptr;
    AblationArm* no_g = nullptr;
    for (AblationArm& arm : report.arms) {
        if (arm.name == "dsmoe_full") full = &arm;
        if (arm.name == "dsmoe_no_g") no_g = &arm;
    }
    if (full && no_g && !full->failed && !no_g->failed) {
        std::vector<double> taus;
        for (int i = 1; i <= 19; ++i) taus.push_back(0.05 * i);
        const std::vector<SweepRow> sweep = tau_sweep(trained[2], corpus.val(), base.seq_len, taus);
        const SweepRow* best = nullptr;
        for (const SweepRow& row : sweep) {
            if (!best || std::abs(row.mean_active_experts - full->mean_active_experts) <
                             std::abs(best->mean_active_experts - full->mean_active_experts))
                best = &row;
        }
        if (best) no_g->matched = *best;
    }
    if (trained_out) *trained_out = std::move(trained);
    return report;
}

}  // namespace dsmoe
