#pragma once

#include "narslu/common.hpp"
#include "narslu/data.hpp"
#include "narslu/infer.hpp"
#include "narslu/losses.hpp"
#include "narslu/models.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace narslu {

// Flat key=value configuration with [section] headers. Resolution order:
// preset defaults, then the config file, then explicit command-line flags.

using KeyValues = std::map<std::string, std::string>;  // "section.key" -> raw value

inline KeyValues parse_config_text(std::istream& is, const std::string& origin) {
    KeyValues kv;
    std::string line, section;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::string trimmed = normalize_text(line);
        if (trimmed.empty()) continue;
        if (trimmed.front() == '[') {
            if (trimmed.back() != ']') {
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": bad section header");
            }
            section = trimmed.substr(1, trimmed.size() - 2);
            continue;
        }
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
        }
        std::string key = normalize_text(trimmed.substr(0, eq));
        std::string value = normalize_text(trimmed.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
        }
        kv[section.empty() ? key : section + "." + key] = value;
    }
    return kv;
}

inline KeyValues parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    return parse_config_text(is, path);
}

// Everything a run needs; persisting this plus the seed reproduces the run.
struct RunConfig {
    // run
    std::uint64_t seed = 0;
    std::string out_dir;
    std::string data_dir;
    // model
    std::string kind = "mask-ctc";
    std::string preset = "desk";
    // data synthesis
    SynthConfig synth;
    // training
    int epochs = 40;
    int batch_size = 32;
    double lr = 1e-3;
    double lr_final_frac = 0.1;  // linear decay target as a fraction of lr
    LossWeights<double> weights;
    int dev_every = 1;
    // decoding
    RefinementConfig decode;
    int workers = 1;
    // file arguments
    std::string checkpoint;
    std::string resume;
    std::string split = "test";
    std::string decodes;
    std::string report;
    std::string ar_checkpoint;
    std::string nar_checkpoint;
};

namespace detail {

inline int to_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
    }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const std::uint64_t x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects an unsigned integer, got '" + v + "'");
    }
}

inline std::vector<double> to_double_list(const std::string& v, const std::string& key) {
    std::vector<double> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        item = normalize_text(item);
        if (!item.empty()) out.push_back(to_double(item, key));
    }
    return out;
}

}  // namespace detail

// Preset defaults by (preset, kind): "desk" is the scale the test suite runs
// at; "paper-slurp" carries the large-corpus operating point.
inline void apply_preset(RunConfig& cfg) {
    if (cfg.preset == "desk") {
        cfg.epochs = (cfg.kind == "ar") ? 30 : 40;
        cfg.batch_size = 32;
        cfg.lr = 1e-3;
        cfg.decode.p_thresh = 0.999;
        cfg.decode.tap_thresholds = (cfg.kind == "sc-mask-ctc") ? std::vector<double>{0.9}
                                                                : std::vector<double>{};
        cfg.decode.max_iters = 10;
        cfg.decode.beam = 5;
        cfg.decode.ar_ctc_weight = 0.3;
    } else if (cfg.preset == "paper-slurp") {
        cfg.epochs = (cfg.kind == "ar") ? 100 : 400;
        cfg.batch_size = 64;
        cfg.lr = 1e-3;
        cfg.decode.p_thresh = 0.999;
        cfg.decode.tap_thresholds = (cfg.kind == "sc-mask-ctc")
                                        ? std::vector<double>{0.9, 0.99, 0.999}
                                        : std::vector<double>{};
        cfg.decode.max_iters = 10;
        cfg.decode.beam = 5;
        cfg.decode.ar_ctc_weight = 0.3;
    } else {
        throw ConfigError("unknown preset: " + cfg.preset);
    }
}

// Applies one "section.key" assignment; unknown keys are configuration errors
// so typos surface immediately.
inline void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::to_double;
    using detail::to_double_list;
    using detail::to_int;
    using detail::to_u64;
    if (key == "run.seed") cfg.seed = to_u64(value, key);
    else if (key == "run.out_dir") cfg.out_dir = value;
    else if (key == "run.data_dir") cfg.data_dir = value;
    else if (key == "model.kind") cfg.kind = value;
    else if (key == "model.preset") cfg.preset = value;
    else if (key == "synth.intents") cfg.synth.n_intents = to_int(value, key);
    else if (key == "synth.slot_types") cfg.synth.n_slot_types = to_int(value, key);
    else if (key == "synth.slot_value_words") cfg.synth.slot_value_words = to_int(value, key);
    else if (key == "synth.total_words") cfg.synth.total_words = to_int(value, key);
    else if (key == "synth.min_len") cfg.synth.min_len = to_int(value, key);
    else if (key == "synth.max_len") cfg.synth.max_len = to_int(value, key);
    else if (key == "synth.min_frames") cfg.synth.min_frames = to_int(value, key);
    else if (key == "synth.max_frames") cfg.synth.max_frames = to_int(value, key);
    else if (key == "synth.feature_dim") cfg.synth.feature_dim = to_int(value, key);
    else if (key == "synth.noise") cfg.synth.noise = to_double(value, key);
    else if (key == "synth.train") cfg.synth.n_train = to_int(value, key);
    else if (key == "synth.dev") cfg.synth.n_dev = to_int(value, key);
    else if (key == "synth.test") cfg.synth.n_test = to_int(value, key);
    else if (key == "train.epochs") cfg.epochs = to_int(value, key);
    else if (key == "train.batch_size") cfg.batch_size = to_int(value, key);
    else if (key == "train.lr") cfg.lr = to_double(value, key);
    else if (key == "train.lr_final_frac") cfg.lr_final_frac = to_double(value, key);
    else if (key == "train.lambda") cfg.weights.lambda = to_double(value, key);
    else if (key == "train.eta") cfg.weights.eta = to_double(value, key);
    else if (key == "train.gamma") cfg.weights.gamma = to_double(value, key);
    else if (key == "train.mu") cfg.weights.mu = to_double(value, key);
    else if (key == "train.ar_ctc_weight") cfg.weights.ar_ctc = to_double(value, key);
    else if (key == "train.dev_every") cfg.dev_every = to_int(value, key);
    else if (key == "train.resume") cfg.resume = value;
    else if (key == "decode.p_thresh") cfg.decode.p_thresh = to_double(value, key);
    else if (key == "decode.tap_thresholds") cfg.decode.tap_thresholds = to_double_list(value, key);
    else if (key == "decode.max_iters") cfg.decode.max_iters = to_int(value, key);
    else if (key == "decode.beam") cfg.decode.beam = to_int(value, key);
    else if (key == "decode.workers") cfg.workers = to_int(value, key);
    else if (key == "decode.checkpoint") cfg.checkpoint = value;
    else if (key == "decode.split") cfg.split = value;
    else if (key == "eval.decodes") cfg.decodes = value;
    else if (key == "eval.report") cfg.report = value;
    else if (key == "bench.ar_checkpoint") cfg.ar_checkpoint = value;
    else if (key == "bench.nar_checkpoint") cfg.nar_checkpoint = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

// preset defaults <- config file <- flags; kind and preset are pinned first
// because the preset expands differently per model kind.
inline RunConfig resolve_config(const KeyValues& file, const KeyValues& flags) {
    RunConfig cfg;
    auto lookup = [&](const std::string& key) -> const std::string* {
        auto fit = flags.find(key);
        if (fit != flags.end()) return &fit->second;
        auto cit = file.find(key);
        if (cit != file.end()) return &cit->second;
        return nullptr;
    };
    if (const std::string* v = lookup("model.kind")) cfg.kind = *v;
    if (const std::string* v = lookup("model.preset")) cfg.preset = *v;
    model_kind_from(cfg.kind);  // validate early
    apply_preset(cfg);
    for (const auto& [key, value] : file) apply_key(cfg, key, value);
    for (const auto& [key, value] : flags) apply_key(cfg, key, value);
    cfg.weights.validate();
    return cfg;
}

// Serialized form: a config file that reproduces this run when fed back.
inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "[run]\n";
    os << "seed = " << cfg.seed << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    os << "data_dir = " << cfg.data_dir << "\n\n";
    os << "[model]\n";
    os << "kind = " << cfg.kind << "\n";
    os << "preset = " << cfg.preset << "\n\n";
    os << "[synth]\n";
    os << "intents = " << cfg.synth.n_intents << "\n";
    os << "slot_types = " << cfg.synth.n_slot_types << "\n";
    os << "slot_value_words = " << cfg.synth.slot_value_words << "\n";
    os << "total_words = " << cfg.synth.total_words << "\n";
    os << "min_len = " << cfg.synth.min_len << "\n";
    os << "max_len = " << cfg.synth.max_len << "\n";
    os << "min_frames = " << cfg.synth.min_frames << "\n";
    os << "max_frames = " << cfg.synth.max_frames << "\n";
    os << "feature_dim = " << cfg.synth.feature_dim << "\n";
    os << "noise = " << cfg.synth.noise << "\n";
    os << "train = " << cfg.synth.n_train << "\n";
    os << "dev = " << cfg.synth.n_dev << "\n";
    os << "test = " << cfg.synth.n_test << "\n\n";
    os << "[train]\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "lr = " << cfg.lr << "\n";
    os << "lr_final_frac = " << cfg.lr_final_frac << "\n";
    os << "lambda = " << cfg.weights.lambda << "\n";
    os << "eta = " << cfg.weights.eta << "\n";
    os << "gamma = " << cfg.weights.gamma << "\n";
    os << "mu = " << cfg.weights.mu << "\n";
    os << "ar_ctc_weight = " << cfg.weights.ar_ctc << "\n";
    os << "dev_every = " << cfg.dev_every << "\n\n";
    os << "[decode]\n";
    os << "p_thresh = " << cfg.decode.p_thresh << "\n";
    os << "tap_thresholds = ";
    for (std::size_t i = 0; i < cfg.decode.tap_thresholds.size(); ++i) {
        os << (i ? "," : "") << cfg.decode.tap_thresholds[i];
    }
    os << "\n";
    os << "max_iters = " << cfg.decode.max_iters << "\n";
    os << "beam = " << cfg.decode.beam << "\n";
    os << "workers = " << cfg.workers << "\n";
    return os.str();
}

// The model architecture for this run: preset dims specialized to the data.
inline ModelConfig make_model_config(const RunConfig& cfg, int vocab_size, int feature_dim) {
    ModelConfig mc = model_preset(cfg.preset, model_kind_from(cfg.kind), vocab_size, feature_dim);
    return mc;
}

}  // namespace narslu
