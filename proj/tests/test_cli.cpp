#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "narslu/cli.hpp"

#include <filesystem>
#include <fstream>

using namespace narslu;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("narslu_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

RunConfig small_synth_config(const std::string& out_dir, std::uint64_t seed) {
    RunConfig cfg;
    cfg.out_dir = out_dir;
    cfg.seed = seed;
    cfg.synth.n_train = 24;
    cfg.synth.n_dev = 8;
    cfg.synth.n_test = 8;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("config file parsing: sections, comments, errors") {
    std::istringstream is(R"(# comment
[run]
seed = 42
[train]
epochs = 7   # trailing comment
)");
    KeyValues kv = parse_config_text(is, "test");
    CHECK(kv.at("run.seed") == "42");
    CHECK(kv.at("train.epochs") == "7");

    std::istringstream bad("[run\nseed = 1\n");
    CHECK_THROWS_AS(parse_config_text(bad, "test"), ConfigError);
    std::istringstream no_eq("[run]\njust a line\n");
    CHECK_THROWS_AS(parse_config_text(no_eq, "test"), ConfigError);
}

TEST_CASE("config resolution: preset < file < flags") {
    KeyValues file{{"train.epochs", "11"}, {"train.lr", "0.005"}};
    KeyValues flags{{"train.epochs", "13"}};
    RunConfig cfg = resolve_config(file, flags);
    CHECK(cfg.epochs == 13);        // flag beats file
    CHECK(cfg.lr == 0.005);         // file beats preset default
    CHECK(cfg.batch_size == 32);    // preset default survives

    // preset expands per model kind
    RunConfig sc = resolve_config({{"model.kind", "sc-mask-ctc"}}, {});
    CHECK(sc.decode.tap_thresholds == std::vector<double>{0.9});
    RunConfig paper =
        resolve_config({{"model.kind", "sc-mask-ctc"}, {"model.preset", "paper-slurp"}}, {});
    CHECK(paper.decode.tap_thresholds == std::vector<double>{0.9, 0.99, 0.999});
    CHECK(paper.epochs == 400);
    CHECK(paper.batch_size == 64);

    CHECK_THROWS_AS(resolve_config({{"model.kind", "bogus"}}, {}), ConfigError);
    CHECK_THROWS_AS(resolve_config({{"no.such_key", "1"}}, {}), ConfigError);
}

TEST_CASE("serialized config round-trips through the parser") {
    RunConfig cfg;
    cfg.seed = 9;
    cfg.epochs = 17;
    cfg.decode.p_thresh = 0.5;
    cfg.synth.noise = 0.25;
    std::istringstream is(serialize_config(cfg));
    KeyValues kv = parse_config_text(is, "roundtrip");
    RunConfig back = resolve_config(kv, {});
    CHECK(back.seed == 9);
    CHECK(back.epochs == 17);
    CHECK(back.decode.p_thresh == 0.5);
    CHECK(back.synth.noise == 0.25);
}

TEST_CASE("exit-code mapping: usage 1, io 2, numeric 3") {
    CHECK(cli::guarded([] { throw ConfigError("x"); return 0; }) == 1);
    CHECK(cli::guarded([] { throw UnknownTokenError("x"); return 0; }) == 1);
    CHECK(cli::guarded([] { throw IoError("x"); return 0; }) == 2);
    CHECK(cli::guarded([] { throw NumericError("x"); return 0; }) == 3);
    CHECK(cli::guarded([] { return 0; }) == 0);
}

TEST_CASE("synth-data command: artifacts, determinism, validation") {
    const std::string d1 = fresh_dir("synth_a");
    const std::string d2 = fresh_dir("synth_b");
    RunConfig cfg1 = small_synth_config(d1, 5);
    RunConfig cfg2 = small_synth_config(d2, 5);
    CHECK(cli::run_synth_data(cfg1) == 0);
    CHECK(cli::run_synth_data(cfg2) == 0);
    for (const char* f : {"vocab.json", "train.jsonl", "dev.jsonl", "test.jsonl",
                          "manifest.json", "run_config.cfg"}) {
        CHECK(fs::exists(fs::path(d1) / f));
    }
    // identical seeds give identical artifacts (same checksums, same bytes)
    CHECK(slurp(fs::path(d1) / "train.jsonl") == slurp(fs::path(d2) / "train.jsonl"));
    auto m1 = nlohmann::json::parse(slurp(fs::path(d1) / "manifest.json"));
    auto m2 = nlohmann::json::parse(slurp(fs::path(d2) / "manifest.json"));
    CHECK(m1["checksums"] == m2["checksums"]);
    CHECK(m1["utterances"] == m2["utterances"]);

    RunConfig bad = small_synth_config(fresh_dir("synth_bad"), 1);
    bad.synth.n_train = 0;
    CHECK_THROWS_AS(cli::run_synth_data(bad), ConfigError);
    RunConfig nodir = small_synth_config("", 1);
    CHECK_THROWS_AS(cli::run_synth_data(nodir), ConfigError);
}

TEST_CASE("train command: logs, checkpoints, resume continues the epoch counter") {
    const std::string data_dir = fresh_dir("traindata");
    RunConfig synth = small_synth_config(data_dir, 3);
    cli::run_synth_data(synth);

    const std::string run_dir = fresh_dir("trainrun");
    RunConfig tcfg;
    tcfg.data_dir = data_dir;
    tcfg.out_dir = run_dir;
    tcfg.kind = "mask-ctc";
    tcfg.epochs = 2;
    tcfg.batch_size = 8;
    tcfg.seed = 1;
    CHECK(cli::run_train(tcfg) == 0);
    CHECK(fs::exists(fs::path(run_dir) / "best.ckpt"));
    CHECK(fs::exists(fs::path(run_dir) / "final.ckpt"));
    CHECK(fs::exists(fs::path(run_dir) / "train_state.ckpt"));

    // log has one json object per epoch
    std::ifstream log(fs::path(run_dir) / "train_log.jsonl");
    std::string line;
    std::vector<int> epochs;
    while (std::getline(log, line)) {
        if (!line.empty()) epochs.push_back(nlohmann::json::parse(line).at("epoch").get<int>());
    }
    CHECK(epochs == std::vector<int>{1, 2});

    RunConfig rcfg = tcfg;
    rcfg.epochs = 4;
    rcfg.resume = (fs::path(run_dir) / "train_state.ckpt").string();
    CHECK(cli::run_train(rcfg) == 0);
    std::ifstream log2(fs::path(run_dir) / "train_log.jsonl");
    epochs.clear();
    while (std::getline(log2, line)) {
        if (!line.empty()) epochs.push_back(nlohmann::json::parse(line).at("epoch").get<int>());
    }
    CHECK(epochs == std::vector<int>{1, 2, 3, 4});
}

TEST_CASE("decode + eval commands: format contract and the identity evaluation") {
    const std::string data_dir = fresh_dir("decdata");
    RunConfig synth = small_synth_config(data_dir, 11);
    cli::run_synth_data(synth);
    const std::string run_dir = fresh_dir("decrun");
    RunConfig tcfg;
    tcfg.data_dir = data_dir;
    tcfg.out_dir = run_dir;
    tcfg.epochs = 1;
    tcfg.batch_size = 8;
    tcfg.dev_every = 0;
    CHECK(cli::run_train(tcfg) == 0);

    const std::string dec_dir = fresh_dir("decout");
    RunConfig dcfg;
    dcfg.data_dir = data_dir;
    dcfg.out_dir = dec_dir;
    dcfg.checkpoint = (fs::path(run_dir) / "best.ckpt").string();
    dcfg.split = "test";
    CHECK(cli::run_decode(dcfg) == 0);
    // each line carries the documented fields
    std::ifstream ds(fs::path(dec_dir) / "decodes.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(ds, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        for (const char* k :
             {"id", "transcript", "intent", "slot_tags", "iterations_used", "wall_time_s"}) {
            CHECK(j.contains(k));
        }
        ++lines;
    }
    CHECK(lines == 8);

    // evaluating the references themselves scores perfectly
    JointVocabulary vocab = cli::load_vocab(data_dir);
    auto refs = cli::load_split(data_dir, "test", vocab, false);
    const std::string self_path = (fs::path(dec_dir) / "self.jsonl").string();
    {
        std::ofstream os(self_path);
        for (const Utterance& u : refs) {
            DecodeOutput d;
            d.transcript = u.transcript;
            d.intent = u.intent;
            d.slot_tags = u.slot_tags;
            Utterance with_feats = u;
            os << cli::decode_line(with_feats, d, vocab, 0.01) << "\n";
        }
    }
    EvalReport r = cli::evaluate_files(self_path, data_dir, "test");
    CHECK(r.wer_percent == 0.0);
    CHECK(r.ic_acc == 100.0);
    CHECK(r.slu_f1 == 100.0);

    // a missing utterance id is reported by name
    const std::string short_path = (fs::path(dec_dir) / "short.jsonl").string();
    {
        std::ifstream in(self_path);
        std::ofstream os(short_path);
        std::string l;
        bool skipped = false;
        while (std::getline(in, l)) {
            if (!skipped) {
                skipped = true;
                continue;
            }
            os << l << "\n";
        }
    }
    try {
        cli::evaluate_files(short_path, data_dir, "test");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find(refs.front().id) != std::string::npos);
    }
}

TEST_CASE("posterior matrices from the binary format drive standalone decoding") {
    // ctc-core external interface: a NARF matrix as posteriors
    Matrix<float> post(4, 3);
    post << 0.1f, 0.6f, 0.3f,
            0.05f, 0.9f, 0.05f,
            0.8f, 0.1f, 0.1f,
            0.2f, 0.1f, 0.7f;
    const std::string path = (fs::temp_directory_path() / "narslu_post.narf").string();
    write_feature_matrix(path, post);
    MatrixF loaded = read_feature_matrix(path);
    fs::remove(path);
    CtcDecodeResult res = greedy_collapse(loaded, 0);
    CHECK(res.tokens == std::vector<int>{1, 2});
    CHECK(res.positions == std::vector<int>{1, 3});
}

TEST_CASE("bench rejects mismatched encoder scales") {
    const std::string data_dir = fresh_dir("benchdata");
    RunConfig synth = small_synth_config(data_dir, 13);
    cli::run_synth_data(synth);

    auto train_one = [&](const std::string& kind, const std::string& preset_override,
                         const std::string& dir) {
        RunConfig t;
        t.data_dir = data_dir;
        t.out_dir = dir;
        t.kind = kind;
        t.epochs = 1;
        t.batch_size = 8;
        t.dev_every = 0;
        if (!preset_override.empty()) t.preset = preset_override;
        cli::run_train(t);
        return (fs::path(dir) / "best.ckpt").string();
    };
    const std::string ar_ck = train_one("ar", "", fresh_dir("bench_ar"));
    const std::string nar_ck = train_one("mask-ctc", "", fresh_dir("bench_nar"));

    RunConfig b;
    b.data_dir = data_dir;
    b.ar_checkpoint = ar_ck;
    b.nar_checkpoint = nar_ck;
    b.split = "test";
    CHECK(cli::run_bench(b) == 0);

    RunConfig swapped = b;
    std::swap(swapped.ar_checkpoint, swapped.nar_checkpoint);
    CHECK_THROWS_AS(cli::run_bench(swapped), ConfigError);
}
