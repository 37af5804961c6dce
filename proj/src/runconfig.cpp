#include "dsmoe/runconfig.hpp"

#include <fstream>
#include <initializer_list>
#include <string>

#include "dsmoe/error.hpp"

namespace dsmoe {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& prefix, std::initializer_list<const char*> allowed) {
    if (!obj.is_object())
        throw ConfigError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) +
                          "' must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (const char* key : allowed)
            if (it.key() == key) {
                known = true;
                break;
            }
        if (!known)
            throw ConfigError("config: unknown key '" + (prefix.empty() ? "" : prefix + ".") + it.key() +
                              "'");
    }
}

template <typename T>
void read_field(const json& obj, const std::string& prefix, const char* key, T& out) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value type for '" + (prefix.empty() ? "" : prefix + ".") + key +
                          "'");
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
    if (convert.n_experts < 2) throw ConfigError("config: convert.n_experts must be >= 2");
    if (!(convert.gate_std > 0.0)) throw ConfigError("config: convert.gate_std must be > 0");
    if (!(convert.tau > 0.0 && convert.tau < 1.0)) throw ConfigError("config: convert.tau must lie in (0,1)");
    if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0))
        throw ConfigError("config: data.val_fraction must lie in [0,1)");
    if (!(init_std > 0.0)) throw ConfigError("config: init_std must be > 0");
    for (std::size_t i = 0; i < eval.taus.size(); ++i) {
        if (!(eval.taus[i] > 0.0 && eval.taus[i] < 1.0))
            throw ConfigError("config: eval.taus entries must lie in (0,1)");
        if (i > 0 && !(eval.taus[i] > eval.taus[i - 1]))
            throw ConfigError("config: eval.taus must be strictly increasing");
    }
    if (eval.tau_override && !(*eval.tau_override > 0.0 && *eval.tau_override < 1.0))
        throw ConfigError("config: eval.tau_override must lie in (0,1)");
}

RunConfig parse_run_config(const json& j) {
    RunConfig cfg;
    for (int i = 1; i <= 19; ++i) cfg.eval.taus.push_back(0.05 * i);

    check_keys(j, "", {"model", "train", "convert", "data", "paths", "eval", "init_std"});
    read_field(j, "", "init_std", cfg.init_std);

    if (auto it = j.find("model"); it != j.end()) {
        const json& m = *it;
        check_keys(m, "model",
                   {"vocab_size", "hidden_dim", "inter_dim", "layer_count", "head_count", "max_seq_len"});
        read_field(m, "model", "vocab_size", cfg.model.vocab_size);
        read_field(m, "model", "hidden_dim", cfg.model.hidden_dim);
        read_field(m, "model", "inter_dim", cfg.model.inter_dim);
        read_field(m, "model", "layer_count", cfg.model.layer_count);
        read_field(m, "model", "head_count", cfg.model.head_count);
        read_field(m, "model", "max_seq_len", cfg.model.max_seq_len);
    }
    if (auto it = j.find("train"); it != j.end()) {
        const json& t = *it;
        check_keys(t, "train",
                   {"learning_rate", "batch_size", "seq_len", "steps", "tau", "sparsity_weight", "mode",
                    "seed", "checkpoint_interval"});
        read_field(t, "train", "learning_rate", cfg.train.learning_rate);
        read_field(t, "train", "batch_size", cfg.train.batch_size);
        read_field(t, "train", "seq_len", cfg.train.seq_len);
        read_field(t, "train", "steps", cfg.train.steps);
        read_field(t, "train", "tau", cfg.train.tau);
        read_field(t, "train", "sparsity_weight", cfg.train.sparsity_weight);
        read_field(t, "train", "seed", cfg.train.seed);
        read_field(t, "train", "checkpoint_interval", cfg.train.checkpoint_interval);
        if (auto mit = t.find("mode"); mit != t.end()) {
            std::string mode;
            read_field(t, "train", "mode", mode);
            try {
                cfg.train.mode = parse_train_mode(mode);
            } catch (const ParamError& e) {
                throw ConfigError(std::string("config: train.mode: ") + e.what());
            }
        }
    }
    if (auto it = j.find("convert"); it != j.end()) {
        const json& c = *it;
        check_keys(c, "convert", {"n_experts", "gate_std", "tau"});
        read_field(c, "convert", "n_experts", cfg.convert.n_experts);
        read_field(c, "convert", "gate_std", cfg.convert.gate_std);
        read_field(c, "convert", "tau", cfg.convert.tau);
    }
    if (auto it = j.find("data"); it != j.end()) {
        const json& d = *it;
        check_keys(d, "data", {"corpus", "val_fraction"});
        read_field(d, "data", "corpus", cfg.data.corpus);
        read_field(d, "data", "val_fraction", cfg.data.val_fraction);
    }
    if (auto it = j.find("paths"); it != j.end()) {
        const json& p = *it;
        check_keys(p, "paths", {"checkpoint_in", "checkpoint_out", "report_dir"});
        read_field(p, "paths", "checkpoint_in", cfg.paths.checkpoint_in);
        read_field(p, "paths", "checkpoint_out", cfg.paths.checkpoint_out);
        read_field(p, "paths", "report_dir", cfg.paths.report_dir);
    }
    if (auto it = j.find("eval"); it != j.end()) {
        const json& e = *it;
        check_keys(e, "eval", {"tau_override", "taus"});
        if (auto tit = e.find("tau_override"); tit != e.end()) {
            double v = 0.0;
            read_field(e, "eval", "tau_override", v);
            cfg.eval.tau_override = v;
        }
        if (e.contains("taus")) {
            cfg.eval.taus.clear();
            read_field(e, "eval", "taus", cfg.eval.taus);
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config: parse failure in '" + path + "': " + e.what());
    }
    return parse_run_config(j);
}

}  // namespace dsmoe
