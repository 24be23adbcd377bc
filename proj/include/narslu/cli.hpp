#pragma once

#include "narslu/config.hpp"
#include "narslu/metrics.hpp"
#include "narslu/train.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

namespace narslu::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Small helpers: checksums, vocab (de)serialization, dataset layout
// ---------------------------------------------------------------------------

inline std::string fnv1a64_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checksum: cannot open " + path);
    std::uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
        if (!is) break;
    }
    char out[32];
    std::snprintf(out, sizeof(out), "fnv:%016llx", static_cast<unsigned long long>(h));
    return out;
}

inline json vocab_to_json(const JointVocabulary& v) {
    json merges = json::array();
    for (const auto& [a, b] : v.bpe().merges) merges.push_back(json::array({a, b}));
    return json{{"asr_units", v.asr_units()},
                {"intents", v.intents()},
                {"slot_types", v.slot_types()},
                {"policy", token_policy_name(v.policy())},
                {"bpe_merges", merges}};
}

inline JointVocabulary vocab_from_json(const json& j) {
    BpeModel bpe;
    for (const auto& m : j.value("bpe_merges", json::array())) {
        bpe.merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    }
    return JointVocabulary(j.at("asr_units").get<std::vector<std::string>>(),
                           j.at("intents").get<std::vector<std::string>>(),
                           j.at("slot_types").get<std::vector<std::string>>(),
                           token_policy_from(j.at("policy").get<std::string>()),
                           std::move(bpe));
}

inline JointVocabulary load_vocab(const std::string& data_dir) {
    std::ifstream is(fs::path(data_dir) / "vocab.json");
    if (!is) throw IoError("dataset: cannot open " + data_dir + "/vocab.json");
    return vocab_from_json(json::parse(is));
}

// Split annotations with features attached from the per-utterance files.
inline std::vector<Utterance> load_split(const std::string& data_dir, const std::string& split,
                                         const JointVocabulary& vocab,
                                         bool with_features = true) {
    const fs::path ann = fs::path(data_dir) / (split + ".jsonl");
    LoadResult res = load_slurp_jsonl(ann.string(), vocab);
    if (!res.rejected.empty()) {
        std::string msg = "dataset: " + std::to_string(res.rejected.size()) +
                          " rejected records in " + ann.string();
        for (const auto& d : res.rejected) msg += "\n  " + d;
        throw IoError(msg);
    }
    if (with_features) {
        for (Utterance& u : res.utterances) {
            u.features =
                read_feature_matrix((fs::path(data_dir) / "features" / (u.id + ".narf")).string());
        }
    }
    return res.utterances;
}

// Model checkpoints carry their architecture and vocabulary in the metadata,
// so a checkpoint file is self-describing.
inline json model_meta(const RunConfig& cfg, const ModelConfig& mc,
                       const JointVocabulary& vocab) {
    return json{{"kind", model_kind_name(mc.kind)},
                {"preset", cfg.preset},
                {"seed", cfg.seed},
                {"encoder",
                 {{"layers", mc.encoder.layers},
                  {"d_model", mc.encoder.d_model},
                  {"heads", mc.encoder.heads},
                  {"ffn_dim", mc.encoder.ffn_dim},
                  {"conv_kernel", mc.encoder.conv_kernel},
                  {"taps", mc.encoder.taps},
                  {"vocab_size", mc.encoder.vocab_size},
                  {"feature_dim", mc.encoder.feature_dim},
                  {"max_positions", mc.encoder.max_positions}}},
                {"decoder",
                 {{"layers", mc.decoder.layers},
                  {"d_model", mc.decoder.d_model},
                  {"heads", mc.decoder.heads},
                  {"ffn_dim", mc.decoder.ffn_dim},
                  {"vocab_size", mc.decoder.vocab_size},
                  {"max_positions", mc.decoder.max_positions}}},
                {"vocab", vocab_to_json(vocab)}};
}

inline ModelConfig model_config_from_meta(const json& meta) {
    ModelConfig mc;
    mc.kind = model_kind_from(meta.at("kind").get<std::string>());
    const json& e = meta.at("encoder");
    mc.encoder = EncoderConfig{e.at("layers"),     e.at("d_model"),
                               e.at("heads"),      e.at("ffn_dim"),
                               e.at("conv_kernel"), e.at("taps").get<std::vector<int>>(),
                               e.at("vocab_size"), e.at("feature_dim"),
                               e.at("max_positions")};
    const json& d = meta.at("decoder");
    mc.decoder = DecoderConfig{d.at("layers"),     d.at("d_model"),      d.at("heads"),
                               d.at("ffn_dim"),    d.at("vocab_size"),   d.at("max_positions")};
    return mc;
}

struct LoadedModel {
    ModelParams<float> params;
    ModelConfig config;
    JointVocabulary vocab;
    json meta;
};

inline LoadedModel load_model(const std::string& path) {
    LoadedCheckpoint<float> ck = load_checkpoint<float>(path);
    LoadedModel m;
    m.meta = json::parse(ck.meta);
    m.params = std::move(ck.params);
    m.config = model_config_from_meta(m.meta);
    m.vocab = vocab_from_json(m.meta.at("vocab"));
    return m;
}

// Down-to-top threshold ramp ending just below the final-stage threshold.
inline std::vector<double> default_tap_thresholds(std::size_t taps) {
    static const double ramp[] = {0.9, 0.99, 0.999};
    std::vector<double> out;
    for (std::size_t i = 0; i < taps; ++i) {
        out.push_back(ramp[std::min<std::size_t>(i, 2)]);
    }
    return out;
}

// Decode-time tap thresholds: explicit settings win, otherwise the ramp
// sized to the loaded model's taps.
inline RefinementConfig refinement_for(const RunConfig& cfg, const ModelConfig& mc) {
    RefinementConfig rc = cfg.decode;
    if (mc.kind == ModelKind::sc_mask_ctc && rc.tap_thresholds.empty()) {
        rc.tap_thresholds = default_tap_thresholds(mc.encoder.taps.size());
    }
    if (mc.kind == ModelKind::sc_mask_ctc &&
        rc.tap_thresholds.size() != mc.encoder.taps.size()) {
        throw ConfigError("decode: " + std::to_string(rc.tap_thresholds.size()) +
                          " tap thresholds for " + std::to_string(mc.encoder.taps.size()) +
                          " encoder taps");
    }
    return rc;
}

// ---------------------------------------------------------------------------
// synth-data: dataset files plus a manifest with checksums
// ---------------------------------------------------------------------------

inline int run_synth_data(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("synth-data: --out-dir is required");
    cfg.synth.validate();
    std::error_code ec;
    fs::create_directories(fs::path(cfg.out_dir) / "features", ec);
    if (ec) throw IoError("synth-data: cannot create " + cfg.out_dir + ": " + ec.message());

    SynthDataset ds = synth_generate(cfg.synth, cfg.seed);

    json manifest;
    manifest["seed"] = cfg.seed;
    manifest["utterances"] = json::object();
    auto write_split = [&](const std::string& name, const SynthSplit& split) {
        const fs::path ann_path = fs::path(cfg.out_dir) / (name + ".jsonl");
        std::ofstream os(ann_path);
        if (!os) throw IoError("synth-data: cannot write " + ann_path.string());
        for (const Utterance& u : split.utterances) {
            AnnotationRecord rec;
            rec.id = u.id;
            rec.transcript = detokenize(u.transcript, ds.vocab);
            rec.intent = ds.vocab.string_of(u.intent);
            rec.entities = extract_entities(u.transcript, u.slot_tags, ds.vocab);
            os << annotation_to_json(rec) << "\n";
            const std::string feat_rel = "features/" + u.id + ".narf";
            const std::string feat_path = (fs::path(cfg.out_dir) / feat_rel).string();
            write_feature_matrix(feat_path, u.features);
            manifest["utterances"][u.id] = {{"split", name},
                                            {"features", feat_rel},
                                            {"frames", u.features.rows()},
                                            {"checksum", fnv1a64_file(feat_path)}};
        }
        os.close();
        manifest["checksums"][name + ".jsonl"] = fnv1a64_file(ann_path.string());
    };

    {
        std::ofstream os(fs::path(cfg.out_dir) / "vocab.json");
        if (!os) throw IoError("synth-data: cannot write vocab.json");
        os << vocab_to_json(ds.vocab).dump(2) << "\n";
    }
    manifest["checksums"]["vocab.json"] =
        fnv1a64_file((fs::path(cfg.out_dir) / "vocab.json").string());
    write_split("train", ds.train);
    write_split("dev", ds.dev);
    write_split("test", ds.test);
    {
        std::ofstream os(fs::path(cfg.out_dir) / "manifest.json");
        os << manifest.dump(2) << "\n";
    }
    {
        std::ofstream os(fs::path(cfg.out_dir) / "run_config.cfg");
        os << serialize_config(cfg);
    }
    std::cout << "synth-data: wrote " << ds.train.utterances.size() << "/"
              << ds.dev.utterances.size() << "/" << ds.test.utterances.size()
              << " train/dev/test utterances, |V| = " << ds.vocab.size() << " to "
              << cfg.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int run_train(const RunConfig& cfg) {
    if (cfg.data_dir.empty()) throw ConfigError("train: --data-dir is required");
    if (cfg.out_dir.empty()) throw ConfigError("train: --out-dir is required");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("train: cannot create " + cfg.out_dir + ": " + ec.message());

    JointVocabulary vocab = load_vocab(cfg.data_dir);
    std::vector<Utterance> train_set = load_split(cfg.data_dir, "train", vocab);
    std::vector<Utterance> dev_set = load_split(cfg.data_dir, "dev", vocab);
    const int feature_dim = static_cast<int>(train_set.front().features.cols());
    ModelConfig mc = make_model_config(cfg, vocab.size(), feature_dim);

    TrainConfig<float> tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.adam.lr = static_cast<float>(cfg.lr);
    tc.lr_final_frac = cfg.lr_final_frac;
    tc.weights.lambda = static_cast<float>(cfg.weights.lambda);
    tc.weights.eta = static_cast<float>(cfg.weights.eta);
    tc.weights.gamma = static_cast<float>(cfg.weights.gamma);
    tc.weights.mu = static_cast<float>(cfg.weights.mu);
    tc.weights.ar_ctc = static_cast<float>(cfg.weights.ar_ctc);
    tc.decode = refinement_for(cfg, mc);
    tc.dev_every = cfg.dev_every;

    TrainState<float> state = cfg.resume.empty() ? init_train_state<float>(mc, cfg.seed)
                                                 : load_train_state<float>(cfg.resume);
    const json meta = model_meta(cfg, mc, vocab);

    std::ofstream log_os(fs::path(cfg.out_dir) / "train_log.jsonl",
                         cfg.resume.empty() ? std::ios::trunc : std::ios::app);
    auto on_epoch = [&](const EpochLog& log) {
        log_os << log.to_json().dump() << "\n";
        log_os.flush();
        std::cout << "epoch " << log.epoch << ": loss " << log.loss_total;
        if (log.has_dev) {
            std::cout << ", dev wer " << log.dev.wer << "%, ic " << log.dev.ic_acc
                      << "%, slu-f1 " << log.dev.f1 << "%";
        }
        std::cout << " (" << log.wall_seconds << "s)\n";
    };

    try {
        train(state, mc, vocab, train_set, dev_set, tc, on_epoch);
    } catch (const NumericError& e) {
        json diag{{"error", e.what()}, {"epoch", state.epoch}};
        std::ofstream os(fs::path(cfg.out_dir) / "abort_diagnostic.json");
        os << diag.dump(2) << "\n";
        save_train_state((fs::path(cfg.out_dir) / "abort_state.ckpt").string(), state,
                         json{{"model", meta}});
        throw;
    }

    save_checkpoint((fs::path(cfg.out_dir) / "best.ckpt").string(),
                    tc.dev_every > 0 ? state.best_params : state.params, meta.dump());
    save_checkpoint((fs::path(cfg.out_dir) / "final.ckpt").string(), state.params, meta.dump());
    save_train_state((fs::path(cfg.out_dir) / "train_state.ckpt").string(), state,
                     json{{"model", meta}});
    {
        std::ofstream os(fs::path(cfg.out_dir) / "run_config.cfg");
        os << serialize_config(cfg);
    }
    std::cout << "train: finished at epoch " << state.epoch << ", checkpoints in "
              << cfg.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// decode: single-worker timed decoding (parallelism opt-in), JSON-lines out
// ---------------------------------------------------------------------------

struct TimedDecodes {
    std::vector<DecodeOutput> outputs;
    std::vector<double> wall_seconds;
    double total_wall = 0;       // sum of per-utterance decode times
    double total_audio_s = 0;
};

inline TimedDecodes decode_split_timed(const ModelParams<float>& params, const ModelConfig& mc,
                                       const JointVocabulary& vocab,
                                       const std::vector<Utterance>& set,
                                       const RefinementConfig& rc, int workers) {
    TimedDecodes out;
    out.outputs.resize(set.size());
    out.wall_seconds.resize(set.size());
    workers = std::max(1, workers);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            out.outputs[i] = decode_utterance(params, mc, vocab, set[i].features, rc);
            out.wall_seconds[i] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
    };
    if (workers == 1) {
        work(0, set.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (set.size() + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const std::size_t b = std::min(set.size(), static_cast<std::size_t>(w) * chunk);
            const std::size_t e = std::min(set.size(), b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
        for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < set.size(); ++i) {
        out.total_wall += out.wall_seconds[i];
        out.total_audio_s += frames_to_seconds(set[i].features.rows());
    }
    return out;
}

inline json decode_line(const Utterance& u, const DecodeOutput& d,
                        const JointVocabulary& vocab, double wall_s) {
    json tags = json::array();
    for (int t : d.slot_tags) tags.push_back(vocab.string_of(t));
    return json{{"id", u.id},
                {"transcript", detokenize(d.transcript, vocab)},
                {"intent", d.intent >= 0 ? vocab.string_of(d.intent) : ""},
                {"slot_tags", tags},
                {"iterations_used", d.iterations_used},
                {"wall_time_s", wall_s}};
}

inline int run_decode(const RunConfig& cfg) {
    if (cfg.checkpoint.empty()) throw ConfigError("decode: --checkpoint is required");
    if (cfg.data_dir.empty()) throw ConfigError("decode: --data-dir is required");
    if (cfg.out_dir.empty()) throw ConfigError("decode: --out-dir is required");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("decode: cannot create " + cfg.out_dir + ": " + ec.message());

    LoadedModel model = load_model(cfg.checkpoint);
    std::vector<Utterance> set = load_split(cfg.data_dir, cfg.split, model.vocab);
    RefinementConfig rc = refinement_for(cfg, model.config);
    TimedDecodes timed =
        decode_split_timed(model.params, model.config, model.vocab, set, rc, cfg.workers);

    const fs::path out_path = fs::path(cfg.out_dir) / "decodes.jsonl";
    std::ofstream os(out_path);
    if (!os) throw IoError("decode: cannot write " + out_path.string());
    double iters = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
        os << decode_line(set[i], timed.outputs[i], model.vocab, timed.wall_seconds[i]) << "\n";
        iters += timed.outputs[i].iterations_used;
    }
    json summary{{"utterances", set.size()},
                 {"split", cfg.split},
                 {"model_kind", model_kind_name(model.config.kind)},
                 {"total_wall_s", timed.total_wall},
                 {"total_audio_s", timed.total_audio_s},
                 {"rtf", rtf(timed.total_wall, timed.total_audio_s)},
                 {"avg_iterations", set.empty() ? 0.0 : iters / static_cast<double>(set.size())},
                 {"workers", cfg.workers}};
    {
        std::ofstream sos(fs::path(cfg.out_dir) / "decode_summary.json");
        sos << summary.dump(2) << "\n";
    }
    std::cout << "decode: " << set.size() << " utterances, rtf " << summary["rtf"]
              << ", avg iterations " << summary["avg_iterations"] << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct DecodedLine {
    std::string id, transcript, intent;
    std::vector<std::string> slot_tags;
    int iterations_used = 0;
    double wall_time_s = 0;
};

inline std::vector<DecodedLine> read_decodes(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("eval: cannot open " + path);
    std::vector<DecodedLine> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        DecodedLine d;
        d.id = j.at("id").get<std::string>();
        d.transcript = j.at("transcript").get<std::string>();
        d.intent = j.at("intent").get<std::string>();
        d.slot_tags = j.at("slot_tags").get<std::vector<std::string>>();
        d.iterations_used = j.at("iterations_used").get<int>();
        d.wall_time_s = j.at("wall_time_s").get<double>();
        out.push_back(std::move(d));
    }
    return out;
}

inline EvalReport evaluate_files(const std::string& decodes_path, const std::string& data_dir,
                                 const std::string& split) {
    JointVocabulary vocab = load_vocab(data_dir);
    // references straight from the annotation records (entities authoritative)
    const fs::path ann = fs::path(data_dir) / (split + ".jsonl");
    std::ifstream is(ann);
    if (!is) throw IoError("eval: cannot open " + ann.string());
    std::map<std::string, AnnotationRecord> refs;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        AnnotationRecord rec = parse_annotation_line(line);
        refs[rec.id] = rec;
    }
    std::vector<DecodedLine> decodes = read_decodes(decodes_path);

    std::set<std::string> ref_ids, dec_ids;
    for (const auto& [id, rec] : refs) ref_ids.insert(id);
    for (const auto& d : decodes) dec_ids.insert(d.id);
    if (ref_ids != dec_ids) {
        std::string msg = "eval: utterance ids do not align;";
        for (const auto& id : ref_ids) {
            if (!dec_ids.count(id)) msg += " missing-decode:" + id;
        }
        for (const auto& id : dec_ids) {
            if (!ref_ids.count(id)) msg += " missing-reference:" + id;
        }
        throw IoError(msg);
    }

    // frames per utterance from the manifest, for the audio duration
    json manifest;
    {
        std::ifstream ms(fs::path(data_dir) / "manifest.json");
        if (!ms) throw IoError("eval: cannot open " + data_dir + "/manifest.json");
        manifest = json::parse(ms);
    }

    EvalReport report;
    std::vector<std::pair<int, int>> intents;
    std::vector<EntityList> gold_entities, pred_entities;
    double total_wall = 0, total_audio = 0, iters = 0;
    for (const DecodedLine& d : decodes) {
        const AnnotationRecord& ref = refs.at(d.id);
        const std::vector<int> ref_tokens = tokenize(normalize_text(ref.transcript), vocab);
        const std::vector<int> hyp_tokens = tokenize(normalize_text(d.transcript), vocab);
        report.wer_counts += wer(ref_tokens, hyp_tokens);
        intents.emplace_back(vocab.id_of(ref.intent),
                             d.intent.empty() ? -1 : vocab.id_of(d.intent));
        gold_entities.push_back(ref.entities);
        std::vector<int> tag_ids;
        for (const std::string& t : d.slot_tags) tag_ids.push_back(vocab.id_of(t));
        pred_entities.push_back(extract_entities(hyp_tokens, tag_ids, vocab));
        total_wall += d.wall_time_s;
        total_audio += frames_to_seconds(
            manifest.at("utterances").at(d.id).at("frames").get<long>());
        iters += d.iterations_used;
    }
    report.utterances = static_cast<long>(decodes.size());
    report.wer_percent = report.wer_counts.percent();
    report.ic_acc = ic_accuracy(intents);
    SluF1Result f1 = slu_f1(gold_entities, pred_entities);
    report.slu_f1 = f1.slu_f1;
    report.word_f1 = f1.word_f1;
    report.char_f1 = f1.char_f1;
    report.f1_counts = f1.counts;
    report.rtf_value = rtf(total_wall, total_audio);
    report.avg_iterations =
        decodes.empty() ? 0.0 : iters / static_cast<double>(decodes.size());
    return report;
}

inline int run_eval(const RunConfig& cfg) {
    if (cfg.decodes.empty()) throw ConfigError("eval: --decodes is required");
    if (cfg.data_dir.empty()) throw ConfigError("eval: --data-dir is required");
    EvalReport report = evaluate_files(cfg.decodes, cfg.data_dir, cfg.split);
    std::cout << report.table();
    const std::string report_path =
        cfg.report.empty()
            ? (cfg.out_dir.empty() ? "eval_report.json"
                                   : (fs::path(cfg.out_dir) / "eval_report.json").string())
            : cfg.report;
    if (!cfg.out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(cfg.out_dir, ec);
    }
    std::ofstream os(report_path);
    if (!os) throw IoError("eval: cannot write " + report_path);
    os << report.to_json().dump(2) << "\n";
    std::cout << "eval: report written to " << report_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// bench: AR vs NAR real-time factors on one worker
// ---------------------------------------------------------------------------

inline int run_bench(const RunConfig& cfg) {
    if (cfg.ar_checkpoint.empty() || cfg.nar_checkpoint.empty()) {
        throw ConfigError("bench: --ar-checkpoint and --nar-checkpoint are required");
    }
    if (cfg.data_dir.empty()) throw ConfigError("bench: --data-dir is required");
    LoadedModel ar = load_model(cfg.ar_checkpoint);
    LoadedModel nar = load_model(cfg.nar_checkpoint);
    if (ar.config.kind != ModelKind::ar) {
        throw ConfigError("bench: --ar-checkpoint does not hold an ar model");
    }
    if (nar.config.kind == ModelKind::ar) {
        throw ConfigError("bench: --nar-checkpoint holds an ar model");
    }
    const EncoderConfig& a = ar.config.encoder;
    const EncoderConfig& n = nar.config.encoder;
    if (a.layers != n.layers || a.d_model != n.d_model || a.heads != n.heads ||
        a.ffn_dim != n.ffn_dim || a.conv_kernel != n.conv_kernel ||
        a.feature_dim != n.feature_dim || a.vocab_size != n.vocab_size) {
        throw ConfigError("bench: checkpoints are not at identical encoder scale");
    }

    std::vector<Utterance> set = load_split(cfg.data_dir, cfg.split, nar.vocab);
    RefinementConfig rc = refinement_for(cfg, nar.config);  // beam applies to the AR side
    // one worker for honest timing
    TimedDecodes ar_res = decode_split_timed(ar.params, ar.config, ar.vocab, set, rc, 1);
    TimedDecodes nar_res = decode_split_timed(nar.params, nar.config, nar.vocab, set, rc, 1);
    const double rtf_ar = rtf(ar_res.total_wall, ar_res.total_audio_s);
    const double rtf_nar = rtf(nar_res.total_wall, nar_res.total_audio_s);
    const double speedup = rtf_ar / rtf_nar;
    json out{{"utterances", set.size()},
             {"beam", rc.beam},
             {"rtf_ar", rtf_ar},
             {"rtf_nar", rtf_nar},
             {"speedup", speedup}};
    std::cout << "bench: rtf_ar " << rtf_ar << ", rtf_nar " << rtf_nar << ", speedup "
              << speedup << "x\n";
    if (!cfg.out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(cfg.out_dir, ec);
        std::ofstream os(fs::path(cfg.out_dir) / "bench.json");
        os << out.dump(2) << "\n";
    }
    return 0;
}

// Uncaught-exception mapping shared by the binary and the tests:
// 0 success, 1 usage, 2 i/o, 3 numeric failure.
template <typename Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace narslu::cli
