#pragma once

#include "narslu/ctc.hpp"
#include "narslu/data.hpp"
#include "narslu/models.hpp"

#include <vector>

namespace narslu {

// Composite objectives. Reductions: CTC is the per-utterance sequence nll,
// the CMLM ASR term is the mean over masked positions, the SLU term the sum
// over intent + slot positions; every term is then averaged over the batch,
// so the mixing weights are independent of batch size.

template <typename S>
struct LossWeights {
    S lambda = S(0.4);  // CTC vs CMLM in mask-ctc
    S eta = S(0.5);     // final vs intermediate CTC in sc-ctc
    S gamma = S(0.5);   // ASR vs SLU inside the CMLM term
    S mu = S(0.4);      // sc-ctc vs joint CMLM in sc-mask-ctc
    S ar_ctc = S(0.3);  // CTC weight of the AR system

    void validate() const {
        for (S w : {lambda, eta, gamma, mu, ar_ctc}) {
            if (w < S(0) || w > S(1)) throw ConfigError("loss weights must lie in [0, 1]");
        }
    }
};

// Per-component values of the last composite evaluation (plain scalars for
// logging; the graph node carries the differentiable total).
template <typename S>
struct LossBreakdown {
    S total = 0;
    S ctc = 0;
    S inter_ctc = 0;
    S cmlm_asr = 0;
    S cmlm_slu = 0;
    S ar_attn = 0;
};

// Mean negative log-likelihood of the ground-truth ids at the masked
// transcript positions, read from the ASR head.
template <typename S>
Var<S> loss_cmlm(const CmlmResult<S>& cmlm, const std::vector<int>& masked_positions,
                 const std::vector<int>& transcript) {
    if (masked_positions.empty()) throw ContractError("loss_cmlm: no masked positions");
    if (cmlm.asr_logp.rows() != static_cast<Index>(transcript.size())) {
        throw ShapeError("loss_cmlm: head rows " + shape_str(cmlm.asr_logp.value()) +
                         " vs transcript length " + std::to_string(transcript.size()));
    }
    std::vector<std::pair<int, int>> picks;
    for (int p : masked_positions) {
        if (p < 0 || p >= static_cast<int>(transcript.size())) {
            throw ContractError("loss_cmlm: masked position " + std::to_string(p) +
                                " outside transcript");
        }
        picks.emplace_back(p, transcript[static_cast<std::size_t>(p)]);
    }
    return scale(mean_all(pick_entries(cmlm.asr_logp, picks)), S(-1));
}

// -log P(intent | h_0) - sum_n log P(slot_n | h_n) from the SLU head.
template <typename S>
Var<S> loss_slu(const CmlmResult<S>& cmlm, int intent_id, const std::vector<int>& slot_tags) {
    if (cmlm.slu_logp.rows() != static_cast<Index>(slot_tags.size()) + 1) {
        throw ShapeError("loss_slu: head rows " + shape_str(cmlm.slu_logp.value()) + " vs " +
                         std::to_string(slot_tags.size()) + " slot tags");
    }
    std::vector<std::pair<int, int>> picks{{0, intent_id}};
    for (std::size_t n = 0; n < slot_tags.size(); ++n) {
        picks.emplace_back(static_cast<int>(n) + 1, slot_tags[n]);
    }
    return scale(sum_all(pick_entries(cmlm.slu_logp, picks)), S(-1));
}

namespace detail {

template <typename S>
Var<S> batch_mean(Tape<S>& tape, std::vector<Var<S>>& terms) {
    Var<S> sum = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) sum = add(sum, terms[i]);
    return scale(sum, S(1) / static_cast<S>(terms.size()));
}

template <typename S>
Matrix<S> utterance_features(const Batch& batch, int u) {
    return batch.features_of(u).template cast<S>();
}

}  // namespace detail

// Mean final-layer CTC loss over a batch (the lambda=1 / eta=1 endpoint).
template <typename S>
Var<S> loss_ctc_batch(Tape<S>& tape, const BoundParams<S>& p, const EncoderConfig& enc,
                      const Batch& batch, const JointVocabulary& vocab,
                      const FeedbackHook<S>& hook = {}) {
    std::vector<Var<S>> terms;
    for (int u = 0; u < batch.size(); ++u) {
        Var<S> feats = tape.leaf(detail::utterance_features<S>(batch, u));
        EncoderResult<S> res = encode_features(p, enc, feats, hook);
        Var<S> logp = log_softmax_rows(ctc_head_logits(p, res.x));
        terms.push_back(ctc_loss(logp, batch.transcript_of(u), vocab.blank_id()));
    }
    return detail::batch_mean(tape, terms);
}

// Masked decoder inputs for every utterance of a batch, sampled up front so
// the loss is a deterministic function of (batch, masks).
inline std::vector<MaskedTarget> sample_batch_masks(const Batch& batch,
                                                    const JointVocabulary& vocab, Rng& rng) {
    std::vector<MaskedTarget> masks;
    masks.reserve(static_cast<std::size_t>(batch.size()));
    for (int u = 0; u < batch.size(); ++u) {
        masks.push_back(mask_targets(batch.transcript_of(u), vocab, rng));
    }
    return masks;
}

// lambda * L_ctc + (1-lambda) * (gamma * L_cmlm_asr + (1-gamma) * L_cmlm_slu)
template <typename S>
Var<S> loss_mask_ctc_batch(Tape<S>& tape, const BoundParams<S>& p, const ModelConfig& cfg,
                           const Batch& batch, const std::vector<MaskedTarget>& masks,
                           const JointVocabulary& vocab, S lambda, S gamma,
                           LossBreakdown<S>* breakdown = nullptr) {
    if (lambda < S(0) || lambda > S(1) || gamma < S(0) || gamma > S(1)) {
        throw ConfigError("loss_mask_ctc: weights must lie in [0, 1]");
    }
    if (static_cast<int>(masks.size()) != batch.size()) {
        throw ContractError("loss_mask_ctc: one mask sample per utterance required");
    }
    std::vector<Var<S>> ctc_terms, asr_terms, slu_terms;
    for (int u = 0; u < batch.size(); ++u) {
        Var<S> feats = tape.leaf(detail::utterance_features<S>(batch, u));
        EncoderResult<S> res = encode_features(p, cfg.encoder, feats);
        Var<S> logp = log_softmax_rows(ctc_head_logits(p, res.x));
        ctc_terms.push_back(ctc_loss(logp, batch.transcript_of(u), vocab.blank_id()));
        CmlmResult<S> cm =
            cmlm_forward(p, cfg.decoder, masks[static_cast<std::size_t>(u)].decoder_input, res.x);
        asr_terms.push_back(loss_cmlm(cm, masks[static_cast<std::size_t>(u)].masked_positions,
                                      batch.transcript_of(u)));
        slu_terms.push_back(loss_slu(cm, batch.intents[static_cast<std::size_t>(u)],
                                     batch.tags_of(u)));
    }
    Var<S> ctc = detail::batch_mean(tape, ctc_terms);
    Var<S> asr = detail::batch_mean(tape, asr_terms);
    Var<S> slu = detail::batch_mean(tape, slu_terms);
    Var<S> joint = add(scale(asr, gamma), scale(slu, S(1) - gamma));
    Var<S> total = add(scale(ctc, lambda), scale(joint, S(1) - lambda));
    if (breakdown) {
        breakdown->ctc = ctc.value()(0, 0);
        breakdown->cmlm_asr = asr.value()(0, 0);
        breakdown->cmlm_slu = slu.value()(0, 0);
        breakdown->total = total.value()(0, 0);
    }
    return total;
}

// eta * L_ctc(final) + (1-eta) * mean over taps of L_ctc(Z^l)
template <typename S>
Var<S> loss_sc_ctc_batch(Tape<S>& tape, const BoundParams<S>& p, const EncoderConfig& enc,
                         const Batch& batch, const JointVocabulary& vocab, S eta,
                         const FeedbackHook<S>& hook = {},
                         LossBreakdown<S>* breakdown = nullptr) {
    if (eta < S(0) || eta > S(1)) throw ConfigError("loss_sc_ctc: eta must lie in [0, 1]");
    if (enc.taps.empty() && eta < S(1)) {
        throw ConfigError("loss_sc_ctc: intermediate term requires at least one tap");
    }
    std::vector<Var<S>> final_terms, inter_terms;
    for (int u = 0; u < batch.size(); ++u) {
        Var<S> feats = tape.leaf(detail::utterance_features<S>(batch, u));
        EncoderResult<S> res = encode_features(p, enc, feats, hook);
        Var<S> logp = log_softmax_rows(ctc_head_logits(p, res.x));
        const std::vector<int> target = batch.transcript_of(u);
        final_terms.push_back(ctc_loss(logp, target, vocab.blank_id()));
        if (!enc.taps.empty()) {
            std::vector<Var<S>> taps;
            for (const auto& tap : res.taps) {
                taps.push_back(ctc_loss(tap.z_log, target, vocab.blank_id()));
            }
            inter_terms.push_back(detail::batch_mean(tape, taps));
        }
    }
    Var<S> final_ctc = detail::batch_mean(tape, final_terms);
    Var<S> total = final_ctc;
    Var<S> inter{};
    if (!inter_terms.empty()) {
        inter = detail::batch_mean(tape, inter_terms);
        total = add(scale(final_ctc, eta), scale(inter, S(1) - eta));
    }
    if (breakdown) {
        breakdown->ctc = final_ctc.value()(0, 0);
        breakdown->inter_ctc = inter_terms.empty() ? S(0) : inter.value()(0, 0);
        breakdown->total = total.value()(0, 0);
    }
    return total;
}

// mu * L_sc_ctc + (1-mu) * L_joint_cmlm. The hook (when supplied by the
// caller) runs the intermediate CMLM feedback passes; they shape the forward
// computation but contribute no loss terms, and the caller detaches their
// fed-back distributions.
template <typename S>
Var<S> loss_sc_mask_ctc_batch(Tape<S>& tape, const BoundParams<S>& p, const ModelConfig& cfg,
                              const Batch& batch, const std::vector<MaskedTarget>& masks,
                              const JointVocabulary& vocab, const LossWeights<S>& w,
                              const FeedbackHook<S>& hook = {},
                              LossBreakdown<S>* breakdown = nullptr) {
    w.validate();
    if (cfg.encoder.taps.empty()) {
        throw ConfigError("loss_sc_mask_ctc: model has no self-conditioning taps");
    }
    if (static_cast<int>(masks.size()) != batch.size()) {
        throw ContractError("loss_sc_mask_ctc: one mask sample per utterance required");
    }
    std::vector<Var<S>> final_terms, inter_terms, asr_terms, slu_terms;
    for (int u = 0; u < batch.size(); ++u) {
        Var<S> feats = tape.leaf(detail::utterance_features<S>(batch, u));
        EncoderResult<S> res = encode_features(p, cfg.encoder, feats, hook);
        const std::vector<int> target = batch.transcript_of(u);
        Var<S> logp = log_softmax_rows(ctc_head_logits(p, res.x));
        final_terms.push_back(ctc_loss(logp, target, vocab.blank_id()));
        std::vector<Var<S>> taps;
        for (const auto& tap : res.taps) {
            taps.push_back(ctc_loss(tap.z_log, target, vocab.blank_id()));
        }
        inter_terms.push_back(detail::batch_mean(tape, taps));
        CmlmResult<S> cm =
            cmlm_forward(p, cfg.decoder, masks[static_cast<std::size_t>(u)].decoder_input, res.x);
        asr_terms.push_back(loss_cmlm(cm, masks[static_cast<std::size_t>(u)].masked_positions,
                                      target));
        slu_terms.push_back(loss_slu(cm, batch.intents[static_cast<std::size_t>(u)],
                                     batch.tags_of(u)));
    }
    Var<S> final_ctc = detail::batch_mean(tape, final_terms);
    Var<S> inter = detail::batch_mean(tape, inter_terms);
    Var<S> sc = add(scale(final_ctc, w.eta), scale(inter, S(1) - w.eta));
    Var<S> asr = detail::batch_mean(tape, asr_terms);
    Var<S> slu = detail::batch_mean(tape, slu_terms);
    Var<S> joint = add(scale(asr, w.gamma), scale(slu, S(1) - w.gamma));
    Var<S> total = add(scale(sc, w.mu), scale(joint, S(1) - w.mu));
    if (breakdown) {
        breakdown->ctc = final_ctc.value()(0, 0);
        breakdown->inter_ctc = inter.value()(0, 0);
        breakdown->cmlm_asr = asr.value()(0, 0);
        breakdown->cmlm_slu = slu.value()(0, 0);
        breakdown->total = total.value()(0, 0);
    }
    return total;
}

// w * L_ctc + (1-w) * (teacher-forced ASR cross-entropy, EOS-terminated,
// plus SLU cross-entropy with the intent read at the EOS step).
template <typename S>
Var<S> loss_ar_batch(Tape<S>& tape, const BoundParams<S>& p, const ModelConfig& cfg,
                     const Batch& batch, const JointVocabulary& vocab, S ctc_weight,
                     LossBreakdown<S>* breakdown = nullptr) {
    if (ctc_weight < S(0) || ctc_weight > S(1)) {
        throw ConfigError("loss_ar: ctc weight must lie in [0, 1]");
    }
    std::vector<Var<S>> ctc_terms, attn_terms;
    for (int u = 0; u < batch.size(); ++u) {
        Var<S> feats = tape.leaf(detail::utterance_features<S>(batch, u));
        EncoderResult<S> res = encode_features(p, cfg.encoder, feats);
        const std::vector<int> target = batch.transcript_of(u);
        Var<S> logp = log_softmax_rows(ctc_head_logits(p, res.x));
        ctc_terms.push_back(ctc_loss(logp, target, vocab.blank_id()));

        std::vector<int> input{vocab.cls_id()};
        input.insert(input.end(), target.begin(), target.end());
        ArResult<S> ar = ar_parallel_forward(p, cfg.decoder, input, res.x);
        const std::vector<int> tags = batch.tags_of(u);
        std::vector<std::pair<int, int>> asr_picks, slu_picks;
        for (std::size_t j = 0; j < target.size(); ++j) {
            asr_picks.emplace_back(static_cast<int>(j), target[j]);
            slu_picks.emplace_back(static_cast<int>(j), tags[j]);
        }
        asr_picks.emplace_back(static_cast<int>(target.size()), vocab.eos_id());
        slu_picks.emplace_back(static_cast<int>(target.size()),
                               batch.intents[static_cast<std::size_t>(u)]);
        Var<S> ce = add(scale(sum_all(pick_entries(ar.asr_logp, asr_picks)), S(-1)),
                        scale(sum_all(pick_entries(ar.slu_logp, slu_picks)), S(-1)));
        attn_terms.push_back(ce);
    }
    Var<S> ctc = detail::batch_mean(tape, ctc_terms);
    Var<S> attn = detail::batch_mean(tape, attn_terms);
    Var<S> total = add(scale(ctc, ctc_weight), scale(attn, S(1) - ctc_weight));
    if (breakdown) {
        breakdown->ctc = ctc.value()(0, 0);
        breakdown->ar_attn = attn.value()(0, 0);
        breakdown->total = total.value()(0, 0);
    }
    return total;
}

}  // namespace narslu
