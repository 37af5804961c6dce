#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmoe/corpus.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/training.hpp"

namespace dsmoe {

struct ActivationStats {
    Matrix per_layer_expert_freq;               // [L,n], activation frequency in [0,1]
    std::vector<double> mean_active_per_layer;  // length L
    double overall_active_fraction = 0.0;
    double activated_param_fraction = 0.0;
    double zero_active_token_rate = 0.0;  // (token,layer) events with no active expert
};

struct EvalResult {
    double ppl = 0.0;
    double mean_loss = 0.0;
    std::int64_t token_count = 0;
    std::optional<ActivationStats> stats;  // present for partitioned models
};

// Teacher-forced evaluation over consecutive non-overlapping windows of up to
// seq_len+1 tokens; PPL = exp(token-weighted mean cross-entropy). A gated
// model always runs with the hard gate applied; tau_override substitutes the
// stored threshold for this evaluation only.
EvalResult eval_model(const Model& model, std::span<const int> tokens, int seq_len,
                      std::optional<double> tau_override = std::nullopt);

double perplexity(const Model& model, std::span<const int> tokens, int seq_len,
                  std::optional<double> tau_override = std::nullopt);

ActivationStats collect_activation_stats(const Model& model, std::span<const int> tokens, int seq_len,
                                         std::optional<double> tau_override = std::nullopt);

struct SweepRow {
    double tau = 0.0;
    double ppl = 0.0;
    double mean_active_experts = 0.0;
    double activated_param_fraction = 0.0;
};

// One evaluation per threshold; model weights untouched. taus must be
// strictly increasing, each inside (0,1).
std::vector<SweepRow> tau_sweep(const Model& model, std::span<const int> tokens, int seq_len,
                                const std::vector<double>& taus);

void export_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path);
std::vector<SweepRow> parse_sweep_csv(const std::string& path);

// CSV with header "layer,e0,...,e(n-1)", one row per layer, 6 decimals.
void export_heatmap(const ActivationStats& stats, const std::string& path);
Matrix parse_heatmap_csv(const std::string& path);

struct AblationArm {
    std::string name;
    bool failed = false;
    std::string error;
    double final_ppl = 0.0;
    double final_lm_loss = 0.0;
    double mean_active_experts = 0.0;
    double active_fraction = 0.0;
    double activated_param_fraction = 0.0;
    // dsmoe_no_g only: sweep row whose activation level sits nearest the
    // dsmoe_full arm's, with the hard gate applied at inference.
    std::optional<SweepRow> matched;
};

struct AblationReport {
    std::vector<AblationArm> arms;
    const AblationArm* find(const std::string& name) const;
    nlohmann::json to_json() const;
};

// Trains four arms from the same converted model under identical seeds and
// data order: dsmoe_full, dsmoe_no_ste, dsmoe_no_g, and a lambda0 control
// (dsmoe_full with sparsity weight 0). An arm that aborts numerically is
// marked failed; the others proceed. When trained_out is given it receives
// the four post-training models in arm order.
AblationReport run_ablation_suite(const Model& converted, const Corpus& corpus, const TrainConfig& base,
                                  std::vector<Model>* trained_out = nullptr);

}  // namespace dsmoe
