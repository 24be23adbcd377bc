#pragma once

#include "narslu/adam.hpp"
#include "narslu/checkpoint.hpp"
#include "narslu/infer.hpp"
#include "narslu/losses.hpp"
#include "narslu/metrics.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace narslu {

// Seeded, resumable training: every random draw (epoch shuffles, mask
// sampling) comes from the single rng carried in TrainState, so a state
// round-trip resumes bit-identically.

template <typename S>
struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    AdamConfig<S> adam;
    // linear decay of the learning rate to lr * lr_final_frac across the
    // scheduled epochs; 1.0 keeps it constant
    double lr_final_frac = 0.1;
    LossWeights<S> weights;
    RefinementConfig decode;  // dev decoding (taps thresholds also drive training feedback)
    int dev_every = 1;        // 0 disables dev decoding
};

template <typename S>
struct TrainState {
    ModelParams<S> params;
    ModelParams<S> best_params;
    AdamState<S> opt;
    Rng rng;
    int epoch = 0;
    double best_score = std::numeric_limits<double>::infinity();
};

template <typename S>
TrainState<S> init_train_state(const ModelConfig& cfg, std::uint64_t seed) {
    TrainState<S> st;
    st.rng = Rng(seed);
    st.params = init_model_params<S>(cfg, st.rng);
    st.best_params = st.params;
    return st;
}

struct DevMetrics {
    double wer = 0, ic_acc = 0, f1 = 0;
    double avg_iterations = 0;
    // the selection score: lower is better
    double score() const { return wer + (100.0 - ic_acc) + (100.0 - f1); }
};

struct EpochLog {
    int epoch = 0;
    double loss_total = 0, loss_ctc = 0, loss_inter_ctc = 0;
    double loss_cmlm_asr = 0, loss_cmlm_slu = 0, loss_ar_attn = 0;
    DevMetrics dev;
    bool has_dev = false;
    double wall_seconds = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch},
                         {"loss",
                          {{"total", loss_total},
                           {"ctc", loss_ctc},
                           {"inter_ctc", loss_inter_ctc},
                           {"cmlm_asr", loss_cmlm_asr},
                           {"cmlm_slu", loss_cmlm_slu},
                           {"ar_attn", loss_ar_attn}}},
                         {"wall_seconds", wall_seconds}};
        if (has_dev) {
            j["dev"] = {{"wer", dev.wer},
                        {"ic_acc", dev.ic_acc},
                        {"slu_f1", dev.f1},
                        {"avg_iterations", dev.avg_iterations}};
        }
        return j;
    }
};

// Corpus metrics of a decoded set against its references.
template <typename S>
DevMetrics evaluate_decodes(const std::vector<Utterance>& refs,
                            const std::vector<DecodeOutput>& decodes,
                            const JointVocabulary& vocab) {
    if (refs.size() != decodes.size()) throw ContractError("evaluate: size mismatch");
    WerCounts wc;
    std::vector<std::pair<int, int>> intents;
    std::vector<EntityList> gold_entities, pred_entities;
    double iters = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        wc += wer(refs[i].transcript, decodes[i].transcript);
        intents.emplace_back(refs[i].intent, decodes[i].intent);
        gold_entities.push_back(extract_entities(refs[i].transcript, refs[i].slot_tags, vocab));
        pred_entities.push_back(
            extract_entities(decodes[i].transcript, decodes[i].slot_tags, vocab));
        iters += decodes[i].iterations_used;
    }
    DevMetrics m;
    m.wer = wc.percent();
    m.ic_acc = ic_accuracy(intents);
    m.f1 = slu_f1(gold_entities, pred_entities).slu_f1;
    m.avg_iterations = refs.empty() ? 0 : iters / static_cast<double>(refs.size());
    return m;
}

template <typename S>
std::vector<DecodeOutput> decode_set(const ModelParams<S>& params, const ModelConfig& cfg,
                                     const JointVocabulary& vocab,
                                     const std::vector<Utterance>& set,
                                     const RefinementConfig& rc) {
    std::vector<DecodeOutput> out;
    out.reserve(set.size());
    for (const Utterance& u : set) {
        out.push_back(decode_utterance(params, cfg, vocab, u.features, rc));
    }
    return out;
}

// Runs epochs state.epoch+1 .. tc.epochs. Aborts with NumericError (and the
// offending epoch/batch in the message) if a loss goes non-finite.
template <typename S>
std::vector<EpochLog> train(TrainState<S>& state, const ModelConfig& cfg,
                            const JointVocabulary& vocab,
                            const std::vector<Utterance>& train_set,
                            const std::vector<Utterance>& dev_set, const TrainConfig<S>& tc,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
    cfg.validate();
    tc.weights.validate();
    if (tc.lr_final_frac <= 0.0 || tc.lr_final_frac > 1.0) {
        throw ConfigError("train: lr_final_frac must lie in (0, 1]");
    }
    std::vector<EpochLog> logs;
    for (int epoch = state.epoch + 1; epoch <= tc.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        AdamConfig<S> adam = tc.adam;
        if (tc.epochs > 1) {
            const double frac = static_cast<double>(epoch - 1) / static_cast<double>(tc.epochs - 1);
            adam.lr = static_cast<S>(tc.adam.lr * (1.0 - (1.0 - tc.lr_final_frac) * frac));
        }
        const std::uint64_t batch_seed = state.rng.next_u64();
        std::vector<Batch> batches = make_batches(train_set, vocab, tc.batch_size, batch_seed);

        EpochLog log;
        log.epoch = epoch;
        int batch_index = 0;
        for (const Batch& batch : batches) {
            Tape<S> tape;
            BoundParams<S> bound = bind_params(tape, state.params, true);
            LossBreakdown<S> bd;
            Var<S> loss{};
            switch (cfg.kind) {
                case ModelKind::mask_ctc: {
                    auto masks = sample_batch_masks(batch, vocab, state.rng);
                    loss = loss_mask_ctc_batch(tape, bound, cfg, batch, masks, vocab,
                                               tc.weights.lambda, tc.weights.gamma, &bd);
                    break;
                }
                case ModelKind::sc_mask_ctc: {
                    auto masks = sample_batch_masks(batch, vocab, state.rng);
                    FeedbackHook<S> hook = make_feedback_hook<S>(
                        bound, cfg.encoder, cfg.decoder, vocab, tc.decode.tap_thresholds);
                    loss = loss_sc_mask_ctc_batch(tape, bound, cfg, batch, masks, vocab,
                                                  tc.weights, hook, &bd);
                    break;
                }
                case ModelKind::ar: {
                    loss = loss_ar_batch(tape, bound, cfg, batch, vocab, tc.weights.ar_ctc,
                                         &bd);
                    break;
                }
            }
            if (!std::isfinite(static_cast<double>(bd.total))) {
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batch_index));
            }
            tape.backward(loss);
            auto grads = collect_grads(bound);
            adam_step(state.params, grads, state.opt, adam);
            log.loss_total += static_cast<double>(bd.total);
            log.loss_ctc += static_cast<double>(bd.ctc);
            log.loss_inter_ctc += static_cast<double>(bd.inter_ctc);
            log.loss_cmlm_asr += static_cast<double>(bd.cmlm_asr);
            log.loss_cmlm_slu += static_cast<double>(bd.cmlm_slu);
            log.loss_ar_attn += static_cast<double>(bd.ar_attn);
            ++batch_index;
        }
        const double nb = static_cast<double>(batches.size());
        log.loss_total /= nb;
        log.loss_ctc /= nb;
        log.loss_inter_ctc /= nb;
        log.loss_cmlm_asr /= nb;
        log.loss_cmlm_slu /= nb;
        log.loss_ar_attn /= nb;

        if (tc.dev_every > 0 && (epoch % tc.dev_every == 0 || epoch == tc.epochs)) {
            RefinementConfig dev_rc = tc.decode;
            if (cfg.kind == ModelKind::ar) dev_rc.beam = 1;  // greedy keeps epochs cheap
            auto decodes = decode_set(state.params, cfg, vocab, dev_set, dev_rc);
            log.dev = evaluate_decodes<S>(dev_set, decodes, vocab);
            log.has_dev = true;
            if (log.dev.score() < state.best_score) {
                state.best_score = log.dev.score();
                state.best_params = state.params;
            }
        }
        state.epoch = epoch;
        log.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (on_epoch) on_epoch(log);
        logs.push_back(std::move(log));
    }
    return logs;
}

// ---------------------------------------------------------------------------
// Train-state persistence: parameters, optimizer moments and the best
// snapshot ride in one checkpoint container under name prefixes; epoch,
// score and the rng stream live in the metadata JSON.
// ---------------------------------------------------------------------------

template <typename S>
void save_train_state(const std::string& path, const TrainState<S>& st,
                      const nlohmann::json& extra_meta = {}) {
    ModelParams<S> all;
    for (const auto& [name, m] : st.params.tensors()) all.add("param." + name, m.rows(), m.cols()) = m;
    for (const auto& [name, m] : st.best_params.tensors()) {
        all.add("best." + name, m.rows(), m.cols()) = m;
    }
    for (const auto& [name, m] : st.opt.m) all.add("adam.m." + name, m.rows(), m.cols()) = m;
    for (const auto& [name, m] : st.opt.v) all.add("adam.v." + name, m.rows(), m.cols()) = m;
    nlohmann::json meta = extra_meta;
    meta["epoch"] = st.epoch;
    // json has no infinity literal; an absent score means "no dev pass yet"
    if (std::isfinite(st.best_score)) meta["best_score"] = st.best_score;
    meta["adam_step"] = st.opt.step;
    meta["rng"] = st.rng.save_state();
    save_checkpoint(path, all, meta.dump());
}

template <typename S>
TrainState<S> load_train_state(const std::string& path, nlohmann::json* meta_out = nullptr) {
    LoadedCheckpoint<S> loaded = load_checkpoint<S>(path);
    nlohmann::json meta = nlohmann::json::parse(loaded.meta);
    TrainState<S> st;
    for (const auto& [name, m] : loaded.params.tensors()) {
        if (name.rfind("param.", 0) == 0) {
            st.params.add(name.substr(6), m.rows(), m.cols()) = m;
        } else if (name.rfind("best.", 0) == 0) {
            st.best_params.add(name.substr(5), m.rows(), m.cols()) = m;
        } else if (name.rfind("adam.m.", 0) == 0) {
            st.opt.m.emplace(name.substr(7), m);
        } else if (name.rfind("adam.v.", 0) == 0) {
            st.opt.v.emplace(name.substr(7), m);
        }
    }
    st.epoch = meta.at("epoch").get<int>();
    st.best_score = meta.contains("best_score") && meta["best_score"].is_number()
                        ? meta["best_score"].get<double>()
                        : std::numeric_limits<double>::infinity();
    st.opt.step = meta.at("adam_step").get<std::int64_t>();
    st.rng.load_state(meta.at("rng").get<std::string>());
    if (meta_out) *meta_out = meta;
    return st;
}

}  // namespace narslu
