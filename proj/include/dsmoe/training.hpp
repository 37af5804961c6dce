#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dsmoe/corpus.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/rng.hpp"

namespace dsmoe {

enum class TrainMode { dense, dsmoe_full, dsmoe_no_ste, dsmoe_no_g };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& s);

struct TrainConfig {
    double learning_rate = 1e-3;
    int batch_size = 16;
    int seq_len = 128;
    int steps = 100;
    double tau = 0.5;
    double sparsity_weight = 1.0;  // λ scaling the gate-sparsity term
    TrainMode mode = TrainMode::dense;
    std::uint64_t seed = 0;
    int checkpoint_interval = 0;  // 0: final checkpoint only

    void validate() const;
};

// Adam moments in canonical parameter order, plus the shared step counter.
struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<Matrix> m;
    std::vector<Matrix> v;

    void ensure_shape(const Model& model);
};

void adam_step(Model& model, const ModelGrads& grads, OptimizerState& state, double lr);

// Mean over tokens of (1/(L·n))·Σ_l Σ_i f(g): f is the hard gate when use_g
// (values at or below tau contribute zero), the raw gate value otherwise.
double sparsity_loss(const std::vector<const Matrix*>& gate_values, double tau, bool use_g);

// ∂(λ·sparsity_loss)/∂(gate logits), one [T,n] matrix per layer. The hard
// gate's subgradient is 0 at or below tau and 1 above it.
std::vector<Matrix> sparsity_gate_logit_grads(const std::vector<const Matrix*>& gate_values, double tau,
                                              bool use_g, double lambda);

double total_loss(double lm, double sparse, double lambda);

struct StepStats {
    std::int64_t step = 0;
    double lm_loss = 0.0;
    double sparsity_loss = 0.0;
    double active_fraction = 0.0;  // mean over layers/tokens of active_count/n
    std::int64_t tokens_seen = 0;
};

// One forward/backward/Adam update over a batch of (input, target) windows.
// batch holds batch_size rows of seq_len+1 token ids each.
StepStats train_step(Model& model, const std::vector<std::vector<int>>& batch, const TrainConfig& config,
                     OptimizerState& state);

struct TrainLoopResult {
    std::vector<StepStats> steps;
};

// Deterministic batch schedule from config.seed; per-step NDJSON records to
// `log` when given; checkpoints to checkpoint_dir at checkpoint_interval and
// at the end when a directory is given.
TrainLoopResult train_loop(Model& model, const Corpus& corpus, const TrainConfig& config,
                           std::ostream* log, const std::string& checkpoint_dir = "");

}  // namespace dsmoe
