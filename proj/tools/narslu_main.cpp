// narslu: non-autoregressive joint speech recognition and understanding at
// desk scale. Subcommands: synth-data, train, decode, eval, bench. Every flag
// has a config-file equivalent; the config file wins over preset defaults and
// explicit flags win over the config file.

#include "narslu/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>

namespace {

using narslu::KeyValues;

// Flags are collected as "section.key" strings so they run through the same
// resolution pipeline as the config file.
struct FlagCollector {
    KeyValues kv;

    void add(CLI::App* app, const std::string& flag, const std::string& key,
             const std::string& help) {
        auto holder = std::make_shared<std::string>();
        app->add_option_function<std::string>(
               flag, [this, key](const std::string& v) { kv[key] = v; }, help)
            ->type_name("VALUE");
        (void)holder;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"non-autoregressive joint ASR and SLU (desk scale)"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "key=value config file")->type_name("FILE");

    FlagCollector flags;
    auto add_common = [&](CLI::App* sub) {
        flags.add(sub, "--seed", "run.seed", "rng seed");
        flags.add(sub, "--out-dir", "run.out_dir", "output directory");
        flags.add(sub, "--data-dir", "run.data_dir", "dataset directory");
    };

    CLI::App* synth = app.add_subcommand("synth-data", "generate the synthetic dataset");
    add_common(synth);
    flags.add(synth, "--intents", "synth.intents", "number of intents");
    flags.add(synth, "--slot-types", "synth.slot_types", "number of slot types");
    flags.add(synth, "--slot-value-words", "synth.slot_value_words", "value words per type");
    flags.add(synth, "--total-words", "synth.total_words", "total word inventory");
    flags.add(synth, "--min-len", "synth.min_len", "minimum utterance length");
    flags.add(synth, "--max-len", "synth.max_len", "maximum utterance length");
    flags.add(synth, "--min-frames", "synth.min_frames", "min raw frames per token");
    flags.add(synth, "--max-frames", "synth.max_frames", "max raw frames per token");
    flags.add(synth, "--feature-dim", "synth.feature_dim", "feature dimension");
    flags.add(synth, "--noise", "synth.noise", "feature noise level");
    flags.add(synth, "--train", "synth.train", "training utterances");
    flags.add(synth, "--dev", "synth.dev", "dev utterances");
    flags.add(synth, "--test", "synth.test", "test utterances");

    CLI::App* train = app.add_subcommand("train", "train a model");
    add_common(train);
    flags.add(train, "--model", "model.kind", "mask-ctc | sc-mask-ctc | ar");
    flags.add(train, "--preset", "model.preset", "desk | paper-slurp");
    flags.add(train, "--epochs", "train.epochs", "training epochs");
    flags.add(train, "--batch-size", "train.batch_size", "mini-batch size");
    flags.add(train, "--lr", "train.lr", "adam learning rate");
    flags.add(train, "--lr-final-frac", "train.lr_final_frac",
              "linear lr decay target as a fraction of lr (1 = constant)");
    flags.add(train, "--lambda", "train.lambda", "mask-ctc mixing weight");
    flags.add(train, "--eta", "train.eta", "sc-ctc mixing weight");
    flags.add(train, "--gamma", "train.gamma", "asr/slu mixing weight");
    flags.add(train, "--mu", "train.mu", "sc-mask-ctc mixing weight");
    flags.add(train, "--ar-ctc-weight", "train.ar_ctc_weight", "ctc weight of the ar system");
    flags.add(train, "--dev-every", "train.dev_every", "dev-decode cadence (0 disables)");
    flags.add(train, "--resume", "train.resume", "resume from a train-state checkpoint");
    flags.add(train, "--p-thresh", "decode.p_thresh", "dev decode masking threshold");
    flags.add(train, "--tap-thresholds", "decode.tap_thresholds",
              "comma-separated per-tap thresholds");
    flags.add(train, "--max-iters", "decode.max_iters", "dev decode refinement cap");

    CLI::App* decode = app.add_subcommand("decode", "decode a split with a checkpoint");
    add_common(decode);
    flags.add(decode, "--checkpoint", "decode.checkpoint", "model checkpoint");
    flags.add(decode, "--split", "decode.split", "train | dev | test");
    flags.add(decode, "--p-thresh", "decode.p_thresh", "masking threshold");
    flags.add(decode, "--tap-thresholds", "decode.tap_thresholds",
              "comma-separated per-tap thresholds");
    flags.add(decode, "--max-iters", "decode.max_iters", "refinement iteration cap");
    flags.add(decode, "--beam", "decode.beam", "ar beam width");
    flags.add(decode, "--workers", "decode.workers", "parallel decode workers (opt-in)");

    CLI::App* eval = app.add_subcommand("eval", "score decodes against references");
    add_common(eval);
    flags.add(eval, "--decodes", "eval.decodes", "decode jsonl file");
    flags.add(eval, "--split", "decode.split", "reference split");
    flags.add(eval, "--report", "eval.report", "report json path");

    CLI::App* bench = app.add_subcommand("bench", "compare AR and NAR decoding speed");
    add_common(bench);
    flags.add(bench, "--ar-checkpoint", "bench.ar_checkpoint", "ar model checkpoint");
    flags.add(bench, "--nar-checkpoint", "bench.nar_checkpoint", "nar model checkpoint");
    flags.add(bench, "--split", "decode.split", "split to decode");
    flags.add(bench, "--beam", "decode.beam", "ar beam width");
    flags.add(bench, "--tap-thresholds", "decode.tap_thresholds",
              "comma-separated per-tap thresholds");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage problems exit 1
    }

    return narslu::cli::guarded([&]() -> int {
        KeyValues file_kv;
        if (!config_path.empty()) file_kv = narslu::parse_config_file(config_path);
        narslu::RunConfig cfg = narslu::resolve_config(file_kv, flags.kv);
        if (synth->parsed()) return narslu::cli::run_synth_data(cfg);
        if (train->parsed()) return narslu::cli::run_train(cfg);
        if (decode->parsed()) return narslu::cli::run_decode(cfg);
        if (eval->parsed()) return narslu::cli::run_eval(cfg);
        if (bench->parsed()) return narslu::cli::run_bench(cfg);
        return 1;
    });
}
