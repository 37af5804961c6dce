#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dsmoe/checkpoint.hpp"
#include "dsmoe/cli.hpp"
#include "dsmoe/corpus.hpp"
#include "dsmoe/error.hpp"
#include "dsmoe/evaluation.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/runconfig.hpp"
#include "oracles.hpp"

using namespace dsmoe;
using namespace testutil;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const char* name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 32;
    c.hidden_dim = 8;
    c.inter_dim = 16;
    c.layer_count = 4;
    c.head_count = 2;
    c.max_seq_len = 8;
    return c;
}

bool models_bit_equal(const Model& a, const Model& b) {
    std::vector<const Matrix*> pa, pb;
    visit_params(a, [&](const std::string&, const Matrix& t) { pa.push_back(&t); });
    visit_params(b, [&](const std::string&, const Matrix& t) { pb.push_back(&t); });
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!bit_equal(*pa[i], *pb[i])) return false;
    return true;
}

}  // namespace

TEST_CASE("corpus loads bytes and splits deterministically") {
    TempDir tmp("dsmoe_test_corpus");
    std::string data(1000, 'x');
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<char>(i % 251);
    write_file(tmp.file("c.txt"), data);

    const Corpus c = load_corpus(tmp.file("c.txt"), 0.05, 10);
    CHECK(c.tokens.size() == 1000);
    CHECK(c.train_count == 950);
    CHECK(c.val().size() == 50);
    for (int i = 0; i < 1000; ++i)
        CHECK(c.tokens[static_cast<std::size_t>(i)] == static_cast<int>(static_cast<unsigned char>(data[static_cast<std::size_t>(i)])));

    const Corpus again = load_corpus(tmp.file("c.txt"), 0.05, 10);
    CHECK(again.tokens == c.tokens);
    CHECK(again.train_count == c.train_count);
}

TEST_CASE("corpus validates arguments and size") {
    TempDir tmp("dsmoe_test_corpus2");
    write_file(tmp.file("small.txt"), std::string(99, 'a'));
    CHECK_THROWS_AS(load_corpus(tmp.file("small.txt"), 0.05, 10), InputError);
    try {
        load_corpus(tmp.file("small.txt"), 0.05, 10);
    } catch (const InputError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("need at least 100") != std::string::npos);
    }
    write_file(tmp.file("ok.txt"), std::string(200, 'a'));
    CHECK_THROWS_AS(load_corpus(tmp.file("ok.txt"), 1.0, 10), ParamError);
    CHECK_THROWS_AS(load_corpus(tmp.file("ok.txt"), -0.1, 10), ParamError);
    CHECK_THROWS_AS(load_corpus(tmp.file("ok.txt"), 0.05, 0), ParamError);
    CHECK_THROWS_AS(load_corpus(tmp.file("missing.txt"), 0.05, 10), IoError);
}

TEST_CASE("run config defaults and strict key checking") {
    const RunConfig d = parse_run_config(nlohmann::json::object());
    CHECK(d.model.vocab_size == 256);
    CHECK(d.model.hidden_dim == 64);
    CHECK(d.train.mode == TrainMode::dense);
    CHECK(d.convert.n_experts == 8);
    CHECK(d.data.val_fraction == 0.05);
    CHECK(d.eval.taus.size() == 19);
    CHECK(d.eval.taus.front() == doctest::Approx(0.05));
    CHECK(d.eval.taus.back() == doctest::Approx(0.95));
    CHECK(!d.eval.tau_override.has_value());

    const auto j = nlohmann::json::parse(R"({"model": {"hidden_dim": 16}, "train": {"mode": "dsmoe_full"}})");
    const RunConfig c = parse_run_config(j);
    CHECK(c.model.hidden_dim == 16);
    CHECK(c.train.mode == TrainMode::dsmoe_full);

    CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"modle": {}})")), ConfigError);
    try {
        parse_run_config(nlohmann::json::parse(R"({"model": {"hiden_dim": 4}})"));
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("model.hiden_dim") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"model": {"hidden_dim": "big"}})")), ConfigError);
    CHECK_THROWS_AS(parse_run_config(nlohmann::json::parse(R"({"train": {"mode": "bogus"}})")), ConfigError);
}

TEST_CASE("load_run_config maps file errors") {
    TempDir tmp("dsmoe_test_cfg");
    CHECK_THROWS_AS(load_run_config(tmp.file("missing.json")), IoError);
    write_file(tmp.file("broken.json"), "{not json");
    CHECK_THROWS_AS(load_run_config(tmp.file("broken.json")), ConfigError);
    write_file(tmp.file("ok.json"), R"({"train": {"steps": 3}})");
    CHECK(load_run_config(tmp.file("ok.json")).train.steps == 3);
}

TEST_CASE("checkpoint round trip is bit-exact and byte-stable") {
    TempDir tmp("dsmoe_test_ckpt_rt");
    RngState rng{130};
    const Model m = init_dense_model(tiny_config(), rng, 0.1);
    const std::string dir1 = tmp.file("a");
    save_checkpoint(m, dir1);

    const auto manifest = nlohmann::json::parse(read_file(dir1 + "/manifest.json"));
    CHECK(manifest.at("format_version").get<int>() == 1);
    CHECK(manifest.at("mode").get<std::string>() == "dense");
    CHECK(manifest.at("tensors").size() == 4 * 9 + 3);  // 39 tensors for four dense layers
    CHECK(manifest.contains("checksum_fnv1a64"));

    const Model back = load_checkpoint(dir1);
    CHECK(models_bit_equal(m, back));

    const std::string dir2 = tmp.file("b");
    save_checkpoint(back, dir2);
    CHECK(read_file(dir1 + "/manifest.json") == read_file(dir2 + "/manifest.json"));
    CHECK(read_file(dir1 + "/weights.bin") == read_file(dir2 + "/weights.bin"));
}

TEST_CASE("partitioned checkpoints preserve gating structure") {
    TempDir tmp("dsmoe_test_ckpt_moe");
    RngState rng{131};
    Model m = init_dense_model(tiny_config(), rng, 0.1);
    convert_to_dsmoe(m, 4, rng, 0.05, 0.42);
    const std::string dir = tmp.file("moe");
    save_checkpoint(m, dir);

    const auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    CHECK(manifest.at("mode").get<std::string>() == "dsmoe");
    CHECK(manifest.at("dsmoe").at("n").get<int>() == 4);
    CHECK(manifest.at("dsmoe").at("tau").get<double>() == 0.42);

    const Model back = load_checkpoint(dir);
    CHECK(back.is_dsmoe());
    CHECK(models_bit_equal(m, back));
    CHECK(std::get<DSMoELayer>(back.layers[0].ffn).tau == 0.42);
}

TEST_CASE("corrupted checkpoints are rejected") {
    TempDir tmp("dsmoe_test_ckpt_bad");
    RngState rng{132};
    const Model m = init_dense_model(tiny_config(), rng, 0.1);
    const std::string dir = tmp.file("c");
    save_checkpoint(m, dir);

    // Flip one byte in the middle of the blob.
    std::string blob = read_file(dir + "/weights.bin");
    blob[blob.size() / 2] = static_cast<char>(blob[blob.size() / 2] ^ 0x40);
    write_file(dir + "/weights.bin", blob);
    CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);

    // Truncation.
    save_checkpoint(m, dir);
    blob = read_file(dir + "/weights.bin");
    write_file(dir + "/weights.bin", blob.substr(0, blob.size() - 8));
    CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);

    // Version bump.
    save_checkpoint(m, dir);
    auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    manifest["format_version"] = 2;
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
    CHECK_THROWS_AS(load_checkpoint(dir), VersionError);

    // Missing files.
    save_checkpoint(m, dir);
    fs::remove(dir + "/weights.bin");
    CHECK_THROWS_AS(load_checkpoint(dir), IoError);
    CHECK_THROWS_AS(load_checkpoint(tmp.file("nowhere")), IoError);

    // Manifest that is not JSON.
    save_checkpoint(m, dir);
    write_file(dir + "/manifest.json", "garbage");
    CHECK_THROWS_AS(load_checkpoint(dir), IntegrityError);
}

TEST_CASE("cli reports usage errors with exit code 1") {
    CHECK(cli_dispatch({"--help"}) == 0);
    CHECK(cli_dispatch({}) == 1);
    CHECK(cli_dispatch({"frobnicate"}) == 1);
    CHECK(cli_dispatch({"train-dense"}) == 1);  // --config required
}

TEST_CASE("cli maps data errors to exit code 2") {
    CHECK(cli_dispatch({"train-dense", "--config", "/nonexistent/cfg.json"}) == 2);
    TempDir tmp("dsmoe_test_cli_cfg");
    write_file(tmp.file("bad.json"), R"({"unknown_section": {}})");
    CHECK(cli_dispatch({"train-dense", "--config", tmp.file("bad.json")}) == 1);
}

TEST_CASE("cli pipeline: train, convert, retrain, evaluate, sweep, heatmap") {
    TempDir tmp("dsmoe_test_cli_pipe");

    // 4 KB byte corpus with mild structure.
    std::string corpus;
    corpus.reserve(4096);
    while (corpus.size() < 4096) corpus += "the quick onyx goblin jumps over the lazy dwarf. ";
    write_file(tmp.file("corpus.txt"), corpus);

    nlohmann::json cfg = {
        {"model", {{"vocab_size", 256}, {"hidden_dim", 8}, {"inter_dim", 16}, {"layer_count", 2}, {"head_count", 2}, {"max_seq_len", 16}}},
        {"train", {{"steps", 4}, {"batch_size", 2}, {"seq_len", 16}, {"seed", 7}, {"mode", "dense"}}},
        {"convert", {{"n_experts", 4}, {"tau", 0.45}}},
        {"data", {{"corpus", tmp.file("corpus.txt")}, {"val_fraction", 0.1}}},
        {"paths", nlohmann::json::object()},
    };
    write_file(tmp.file("dense.json"), cfg.dump(2));

    const std::string run1 = (tmp.path / "run1").string();
    REQUIRE(cli_dispatch({"train-dense", "--config", tmp.file("dense.json"), "--out-dir", run1}) == 0);
    CHECK(fs::exists(run1 + "/checkpoint/manifest.json"));
    CHECK(fs::exists(run1 + "/train_dense_log.ndjson"));
    {
        std::istringstream log(read_file(run1 + "/train_dense_log.ndjson"));
        std::string line;
        int lines = 0;
        while (std::getline(log, line)) {
            CHECK_NOTHROW(nlohmann::json::parse(line));
            ++lines;
        }
        CHECK(lines == 4);
    }

    // Convert requires a source checkpoint.
    cfg["paths"]["checkpoint_in"] = run1 + "/checkpoint";
    cfg["train"]["mode"] = "dsmoe_full";
    write_file(tmp.file("moe.json"), cfg.dump(2));
    const std::string conv = (tmp.path / "conv").string();
    REQUIRE(cli_dispatch({"convert", "--config", tmp.file("moe.json"), "--out-dir", conv}) == 0);
    const Model converted = load_checkpoint(conv + "/checkpoint");
    CHECK(converted.is_dsmoe());

    // Training a gated model straight from the dense checkpoint is refused.
    CHECK(cli_dispatch({"train-dsmoe", "--config", tmp.file("moe.json"), "--out-dir", (tmp.path / "wrong").string()}) == 1);

    cfg["paths"]["checkpoint_in"] = conv + "/checkpoint";
    write_file(tmp.file("moe2.json"), cfg.dump(2));
    const std::string run2 = (tmp.path / "run2").string();
    REQUIRE(cli_dispatch({"train-dsmoe", "--config", tmp.file("moe2.json"), "--out-dir", run2}) == 0);
    CHECK(fs::exists(run2 + "/checkpoint/manifest.json"));
    CHECK(fs::exists(run2 + "/train_dsmoe_log.ndjson"));

    // Evaluate the gated checkpoint.
    cfg["paths"]["checkpoint_in"] = run2 + "/checkpoint";
    write_file(tmp.file("eval.json"), cfg.dump(2));
    const std::string evaldir = (tmp.path / "eval").string();
    REQUIRE(cli_dispatch({"eval", "--config", tmp.file("eval.json"), "--out-dir", evaldir}) == 0);
    const auto report = nlohmann::json::parse(read_file(evaldir + "/eval.json"));
    CHECK(report.contains("ppl"));
    CHECK(report.contains("activation_stats"));
    CHECK(report.at("activation_stats").contains("activated_param_fraction"));

    // Deterministic artifacts: a second eval writes identical bytes.
    const std::string evaldir2 = (tmp.path / "eval2").string();
    REQUIRE(cli_dispatch({"eval", "--config", tmp.file("eval.json"), "--out-dir", evaldir2}) == 0);
    CHECK(read_file(evaldir + "/eval.json") == read_file(evaldir2 + "/eval.json"));

    // Sweep with explicit thresholds.
    cfg["eval"]["taus"] = {0.3, 0.5, 0.7};
    write_file(tmp.file("sweep.json"), cfg.dump(2));
    const std::string sweepdir = (tmp.path / "sweep").string();
    REQUIRE(cli_dispatch({"sweep-tau", "--config", tmp.file("sweep.json"), "--out-dir", sweepdir}) == 0);
    const auto rows = parse_sweep_csv(sweepdir + "/sweep.csv");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].tau == 0.3);
    CHECK(rows[1].mean_active_experts <= rows[0].mean_active_experts + 1e-15);

    const std::string heatdir = (tmp.path / "heat").string();
    REQUIRE(cli_dispatch({"heatmap", "--config", tmp.file("eval.json"), "--out-dir", heatdir}) == 0);
    const Matrix freq = parse_heatmap_csv(heatdir + "/heatmap.csv");
    CHECK(freq.rows() == 2);
    CHECK(freq.cols() == 4);

    // Sweep on a dense checkpoint is a usage error.
    cfg["paths"]["checkpoint_in"] = run1 + "/checkpoint";
    write_file(tmp.file("badsweep.json"), cfg.dump(2));
    CHECK(cli_dispatch({"sweep-tau", "--config", tmp.file("badsweep.json"), "--out-dir", (tmp.path / "x").string()}) == 1);
}

TEST_CASE("cli seed override changes the run, same seed reproduces it") {
    TempDir tmp("dsmoe_test_cli_seed");
    std::string corpus;
    while (corpus.size() < 2048) corpus += "abcdefgh ";
    write_file(tmp.file("corpus.txt"), corpus);
    nlohmann::json cfg = {
        {"model", {{"hidden_dim", 8}, {"inter_dim", 16}, {"layer_count", 1}, {"head_count", 2}, {"max_seq_len", 8}}},
        {"train", {{"steps", 3}, {"batch_size", 2}, {"seq_len", 8}, {"seed", 1}, {"mode", "dense"}}},
        {"data", {{"corpus", tmp.file("corpus.txt")}, {"val_fraction", 0.1}}},
    };
    write_file(tmp.file("cfg.json"), cfg.dump());

    const std::string a = (tmp.path / "a").string();
    const std::string b = (tmp.path / "b").string();
    const std::string c = (tmp.path / "c").string();
    REQUIRE(cli_dispatch({"train-dense", "--config", tmp.file("cfg.json"), "--out-dir", a}) == 0);
    REQUIRE(cli_dispatch({"train-dense", "--config", tmp.file("cfg.json"), "--out-dir", b}) == 0);
    REQUIRE(cli_dispatch({"train-dense", "--config", tmp.file("cfg.json"), "--seed", "99", "--out-dir", c}) == 0);
    CHECK(read_file(a + "/checkpoint/weights.bin") == read_file(b + "/checkpoint/weights.bin"));
    CHECK(read_file(a + "/checkpoint/weights.bin") != read_file(c + "/checkpoint/weights.bin"));
}
