#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmoe/model.hpp"
#include "dsmoe/training.hpp"

namespace dsmoe {

// Full run description: strict JSON (unknown keys rejected with their path),
// every field optional with desk-scale defaults.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    struct Convert {
        int n_experts = 8;
        double gate_std = 0.02;
        double tau = 0.5;
    } convert;

    struct Data {
        std::string corpus;
        double val_fraction = 0.05;
    } data;

    struct Paths {
        std::string checkpoint_in;
        std::string checkpoint_out;
        std::string report_dir;
    } paths;

    struct Eval {
        std::optional<double> tau_override;
        std::vector<double> taus;  // default 0.05..0.95, step 0.05
    } eval;

    double init_std = 0.02;

    void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace dsmoe
