#include "dsmoe/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dsmoe/checkpoint.hpp"
#include "dsmoe/corpus.hpp"
#include "dsmoe/error.hpp"
#include "dsmoe/evaluation.hpp"
#include "dsmoe/log.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/runconfig.hpp"
#include "dsmoe/training.hpp"

namespace dsmoe {

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON run configuration")->required();
    cmd->add_option("--seed", args.seed, "Override train.seed from the config");
    cmd->add_option("--out-dir", args.out_dir,
                    "Directory for outputs; overrides paths.checkpoint_out and paths.report_dir");
}

// CLI flags win over config paths; --out-dir fans out to both output paths.
RunConfig load_effective_config(const CommonArgs& args) {
    RunConfig cfg = load_run_config(args.config_path);
    if (args.seed) cfg.train.seed = *args.seed;
    if (!args.out_dir.empty()) {
        cfg.paths.checkpoint_out = args.out_dir + "/checkpoint";
        cfg.paths.report_dir = args.out_dir;
    }
    return cfg;
}

std::string require_path(const std::string& value, const char* what) {
    if (value.empty())
        throw ConfigError(std::string("config: ") + what + " is required for this command");
    return value;
}

std::string report_path(const RunConfig& cfg, const std::string& file) {
    return require_path(cfg.paths.report_dir, "paths.report_dir (or --out-dir)") + "/" + file;
}

std::ofstream open_report(const std::string& path) {
    namespace fs = std::filesystem;
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) {
        std::error_code ec;
        fs::create_directories(parent, ec);
        if (ec) throw IoError("cannot create directory '" + parent.string() + "': " + ec.message());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    return out;
}

nlohmann::json stats_to_json(const ActivationStats& stats) {
    nlohmann::json freq = nlohmann::json::array();
    for (int l = 0; l < stats.per_layer_expert_freq.rows(); ++l) {
        nlohmann::json row = nlohmann::json::array();
        for (int i = 0; i < stats.per_layer_expert_freq.cols(); ++i)
            row.push_back(stats.per_layer_expert_freq(l, i));
        freq.push_back(std::move(row));
    }
    return {{"per_layer_expert_freq", std::move(freq)},
            {"mean_active_per_layer", stats.mean_active_per_layer},
            {"overall_active_fraction", stats.overall_active_fraction},
            {"activated_param_fraction", stats.activated_param_fraction},
            {"zero_active_token_rate", stats.zero_active_token_rate},
            {"activated_param_fraction_formula",
             "(always_active_params + sum_over_layers(mean_active_fraction_l * ffn_expert_params_l)) / "
             "total_params"}};
}

void cmd_train_dense(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    cfg.train.mode = TrainMode::dense;
    const Corpus corpus =
        load_corpus(require_path(cfg.data.corpus, "data.corpus"), cfg.data.val_fraction, cfg.train.seq_len);
    RngState rng{cfg.train.seed};
    Model model = init_dense_model(cfg.model, rng, cfg.init_std);
    std::ofstream log = open_report(report_path(cfg, "train_dense_log.ndjson"));
    train_loop(model, corpus, cfg.train, &log,
               require_path(cfg.paths.checkpoint_out, "paths.checkpoint_out (or --out-dir)"));
    const double ppl = perplexity(model, corpus.val(), cfg.train.seq_len);
    std::cout << "train-dense: final validation ppl " << ppl << "\n";
}

void cmd_convert(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    Model model = load_checkpoint(require_path(cfg.paths.checkpoint_in, "paths.checkpoint_in"));
    RngState rng{cfg.train.seed};
    convert_to_dsmoe(model, cfg.convert.n_experts, rng, cfg.convert.gate_std, cfg.convert.tau);
    save_checkpoint(model, require_path(cfg.paths.checkpoint_out, "paths.checkpoint_out (or --out-dir)"));
    std::cout << "convert: partitioned into " << cfg.convert.n_experts << " experts per layer\n";
}

void cmd_train_dsmoe(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    if (cfg.train.mode == TrainMode::dense)
        throw ConfigError("config: train.mode must be dsmoe_full, dsmoe_no_ste, or dsmoe_no_g");
    const Corpus corpus =
        load_corpus(require_path(cfg.data.corpus, "data.corpus"), cfg.data.val_fraction, cfg.train.seq_len);
    Model model = load_checkpoint(require_path(cfg.paths.checkpoint_in, "paths.checkpoint_in"));
    if (!model.is_dsmoe())
        throw ParamError("train-dsmoe: checkpoint is dense; run convert first");
    std::ofstream log = open_report(report_path(cfg, "train_dsmoe_log.ndjson"));
    train_loop(model, corpus, cfg.train, &log,
               require_path(cfg.paths.checkpoint_out, "paths.checkpoint_out (or --out-dir)"));
    const double ppl = perplexity(model, corpus.val(), cfg.train.seq_len);
    std::cout << "train-dsmoe: final validation ppl " << ppl << "\n";
}

void cmd_eval(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    const Corpus corpus =
        load_corpus(require_path(cfg.data.corpus, "data.corpus"), cfg.data.val_fraction, cfg.train.seq_len);
    const Model model = load_checkpoint(require_path(cfg.paths.checkpoint_in, "paths.checkpoint_in"));
    const EvalResult result = eval_model(model, corpus.val(), cfg.train.seq_len, cfg.eval.tau_override);
    nlohmann::json report = {{"ppl", result.ppl},
                             {"mean_loss", result.mean_loss},
                             {"token_count", result.token_count},
                             {"mode", model.is_dsmoe() ? "dsmoe" : "dense"}};
    if (cfg.eval.tau_override) report["tau_override"] = *cfg.eval.tau_override;
    if (result.stats) report["activation_stats"] = stats_to_json(*result.stats);
    std::ofstream out = open_report(report_path(cfg, "eval.json"));
    out << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
}

void cmd_sweep_tau(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    const Corpus corpus =
        load_corpus(require_path(cfg.data.corpus, "data.corpus"), cfg.data.val_fraction, cfg.train.seq_len);
    const Model model = load_checkpoint(require_path(cfg.paths.checkpoint_in, "paths.checkpoint_in"));
    const std::vector<SweepRow> rows = tau_sweep(model, corpus.val(), cfg.train.seq_len, cfg.eval.taus);
    const std::string path = report_path(cfg, "sweep.csv");
    export_sweep_csv(rows, path);
    std::cout << "sweep-tau: wrote " << rows.size() << " rows to " << path << "\n";
    for (const SweepRow& r : rows)
        std::cout << "  tau " << r.tau << ": ppl " << r.ppl << ", mean active " << r.mean_active_experts
                  << "\n";
}

void cmd_ablate(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    const Corpus corpus =
        load_corpus(require_path(cfg.data.corpus, "data.corpus"), cfg.data.val_fraction, cfg.train.seq_len);
    const Model model = load_checkpoint(require_path(cfg.paths.checkpoint_in, "paths.checkpoint_in"));
    const AblationReport report = run_ablation_suite(model, corpus, cfg.train);
    const std::string path = report_path(cfg, "ablation.json");
    std::ofstream out = open_report(path);
    out << report.to_json().dump(2) << "\n";
    std::cout << report.to_json().dump(2) << "\n";
}

void cmd_heatmap(const CommonArgs& args) {
    RunConfig cfg = load_effective_config(args);
    const Corpus corpus =
        load_corpus(require_path(cfg.data.corpus, "data.corpus"), cfg.data.val_fraction, cfg.train.seq_len);
    const Model model = load_checkpoint(require_path(cfg.paths.checkpoint_in, "paths.checkpoint_in"));
    const ActivationStats stats =
        collect_activation_stats(model, corpus.val(), cfg.train.seq_len, cfg.eval.tau_override);
    const std::string path = report_path(cfg, "heatmap.csv");
    export_heatmap(stats, path);
    std::cout << "heatmap: wrote " << stats.per_layer_expert_freq.rows() << " layers x "
              << stats.per_layer_expert_freq.cols() << " experts to " << path << "\n";
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
    CLI::App app{"Dynamically sparse mixture-of-experts toolkit for SwiGLU transformers"};
    app.require_subcommand(1);

    CommonArgs train_dense_args, convert_args, train_dsmoe_args, eval_args, sweep_args, ablate_args,
        heatmap_args;
    CLI::App* train_dense = app.add_subcommand("train-dense", "Pre-train the dense byte LM");
    add_common(train_dense, train_dense_args);
    CLI::App* convert = app.add_subcommand("convert", "Partition a dense checkpoint into gated experts");
    add_common(convert, convert_args);
    CLI::App* train_dsmoe = app.add_subcommand("train-dsmoe", "Continue training a partitioned checkpoint");
    add_common(train_dsmoe, train_dsmoe_args);
    CLI::App* eval = app.add_subcommand("eval", "Perplexity and activation statistics");
    add_common(eval, eval_args);
    CLI::App* sweep = app.add_subcommand("sweep-tau", "Evaluate across a threshold grid");
    add_common(sweep, sweep_args);
    CLI::App* ablate = app.add_subcommand("ablate", "Train and compare the four training regimes");
    add_common(ablate, ablate_args);
    CLI::App* heatmap = app.add_subcommand("heatmap", "Per-layer expert activation frequencies as CSV");
    add_common(heatmap, heatmap_args);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (app.got_subcommand(train_dense)) cmd_train_dense(train_dense_args);
        else if (app.got_subcommand(convert)) cmd_convert(convert_args);
        else if (app.got_subcommand(train_dsmoe)) cmd_train_dsmoe(train_dsmoe_args);
        else if (app.got_subcommand(eval)) cmd_eval(eval_args);
        else if (app.got_subcommand(sweep)) cmd_sweep_tau(sweep_args);
        else if (app.got_subcommand(ablate)) cmd_ablate(ablate_args);
        else if (app.got_subcommand(heatmap)) cmd_heatmap(heatmap_args);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ParamError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dsmoe
