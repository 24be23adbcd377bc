#pragma once

#include "narslu/ctc.hpp"
#include "narslu/data.hpp"
#include "narslu/models.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace narslu {

// Decoding pipelines: Mask-CTC iterative refinement, SC-Mask-CTC layer-wise
// feedback decoding, and the joint CTC/attention beam search of the AR
// baseline. All of them are pure functions of (parameters, features, config).

struct RefinementConfig {
    double p_thresh = 0.999;             // final-stage masking threshold
    std::vector<double> tap_thresholds;  // one per tap, down-to-top order
    int max_iters = 10;
    int beam = 5;
    double ar_ctc_weight = 0.3;
    bool trace = false;

    void validate() const {
        if (p_thresh < 0.0 || p_thresh > 1.0) {
            throw ConfigError("refinement: p_thresh must lie in [0, 1]");
        }
        for (double t : tap_thresholds) {
            if (t < 0.0 || t > 1.0) throw ConfigError("refinement: tap threshold out of [0, 1]");
        }
        if (max_iters < 1) throw ConfigError("refinement: max_iters must be >= 1");
        if (beam < 1) throw ConfigError("refinement: beam must be >= 1");
    }
};

struct StageTrace {
    std::string stage;  // "ctc", "iter<i>", "tap<l>", "final"
    int masked_count = 0;
    std::vector<int> tokens;
};

struct DecodeOutput {
    std::vector<int> transcript;
    int intent = -1;
    std::vector<int> slot_tags;  // same length as transcript
    int iterations_used = 0;     // CMLM passes (NAR) or decode steps (AR)
    bool truncated = false;
    double score = 0.0;  // AR: length-normalized joint score
    std::vector<StageTrace> trace;
};

template <typename S>
struct CmlmValues {
    Matrix<S> asr_logp;  // [N x V]
    Matrix<S> slu_logp;  // [(N+1) x V]
};

namespace detail {

template <typename S>
int argmax_in_range(const Matrix<S>& m, Index row, int begin, int end) {
    int best = begin;
    for (int c = begin + 1; c < end; ++c) {
        if (m(row, c) > m(row, best)) best = c;
    }
    return best;
}

template <typename S>
CmlmValues<S> cmlm_values(const CmlmResult<S>& res) {
    return CmlmValues<S>{res.asr_logp.value(), res.slu_logp.value()};
}

// Intent from position 0 restricted to the intent block; slot tags from
// positions 1..N restricted to the slot block.
template <typename S>
void read_slu(const CmlmValues<S>& cm, const JointVocabulary& vocab, DecodeOutput* out) {
    out->intent = argmax_in_range(cm.slu_logp, 0, vocab.intent_begin(), vocab.intent_end());
    out->slot_tags.clear();
    for (Index n = 1; n < cm.slu_logp.rows(); ++n) {
        out->slot_tags.push_back(
            argmax_in_range(cm.slu_logp, n, vocab.slot_begin(), vocab.slot_end()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Eq-10 feedback: the CMLM outcome of a tap, added onto the tap posterior at
// the frames named by the collapse positions S.
//   - refined ASR distributions at the masked token indices
//   - slot-tag distributions at every token index
//   - the intent distribution broadcast onto every frame in S
// Frames outside S are untouched. Distributions enter in probability domain.
// ---------------------------------------------------------------------------

template <typename S>
Matrix<S> feedback_contributions(Index frames, Index vocab_size, const CmlmValues<S>& cmlm,
                                 const std::vector<int>& masked_indices,
                                 const std::vector<int>& positions) {
    const Index n = static_cast<Index>(positions.size());
    if (cmlm.asr_logp.rows() != n || cmlm.slu_logp.rows() != n + 1) {
        throw ShapeError("feedback: CMLM outputs sized " + shape_str(cmlm.asr_logp) + "/" +
                         shape_str(cmlm.slu_logp) + " do not match " + std::to_string(n) +
                         " collapse positions");
    }
    for (int p : positions) {
        if (p < 0 || p >= frames) {
            throw ContractError("feedback: position " + std::to_string(p) + " outside " +
                                std::to_string(frames) + " frames");
        }
    }
    // scalar std::exp per element: bit-reproducible regardless of how the
    // destination rows happen to be aligned for vectorization
    auto exp_row = [vocab_size](const Matrix<S>& m, Index row) {
        Matrix<S> r(1, vocab_size);
        for (Index c = 0; c < vocab_size; ++c) r(0, c) = std::exp(m(row, c));
        return r;
    };
    Matrix<S> out = Matrix<S>::Zero(frames, vocab_size);
    for (int idx : masked_indices) {
        if (idx < 0 || idx >= n) {
            throw ContractError("feedback: masked index " + std::to_string(idx) +
                                " outside the hypothesis");
        }
        out.row(positions[static_cast<std::size_t>(idx)]) += exp_row(cmlm.asr_logp, idx);
    }
    const Matrix<S> intent_dist = exp_row(cmlm.slu_logp, 0);
    for (Index i = 0; i < n; ++i) {
        const int frame = positions[static_cast<std::size_t>(i)];
        out.row(frame) += exp_row(cmlm.slu_logp, i + 1);
        out.row(frame) += intent_dist;
    }
    return out;
}

template <typename S>
Matrix<S> feedback_augment(const Matrix<S>& z, const CmlmValues<S>& cmlm,
                           const std::vector<int>& masked_indices,
                           const std::vector<int>& positions) {
    return z + feedback_contributions<S>(z.rows(), z.cols(), cmlm, masked_indices, positions);
}

// ---------------------------------------------------------------------------
// The per-tap hook shared by SC-Mask-CTC training and decoding: greedy-decode
// the tap posterior, mask by that tap's threshold, run the CMLM against the
// running representation (gradient-detached), and add the contributions onto
// Z so gradients keep flowing through the Z term alone. An empty hypothesis
// falls back to Z-only conditioning.
// ---------------------------------------------------------------------------

template <typename S>
FeedbackHook<S> make_feedback_hook(const BoundParams<S>& p, const EncoderConfig& enc_cfg,
                                   const DecoderConfig& dec_cfg, const JointVocabulary& vocab,
                                   const std::vector<double>& tap_thresholds,
                                   int* cmlm_invocations = nullptr,
                                   std::vector<StageTrace>* trace = nullptr) {
    if (tap_thresholds.size() != enc_cfg.taps.size()) {
        throw ConfigError("feedback hook: " + std::to_string(tap_thresholds.size()) +
                          " thresholds for " + std::to_string(enc_cfg.taps.size()) + " taps");
    }
    const std::vector<int> taps = enc_cfg.taps;
    return [&p, dec_cfg, &vocab, taps, tap_thresholds, cmlm_invocations,
            trace](int layer, Var<S> z, Var<S> x_out) -> Var<S> {
        const auto it = std::find(taps.begin(), taps.end(), layer);
        if (it == taps.end()) throw ContractError("feedback hook: unexpected tap layer");
        const double thresh = tap_thresholds[static_cast<std::size_t>(it - taps.begin())];

        const Matrix<S>& zv = z.value();
        CtcDecodeResult hyp = greedy_collapse(zv, vocab.blank_id());
        if (hyp.tokens.empty()) {
            if (trace) trace->push_back({"tap" + std::to_string(layer), 0, {}});
            return z;  // condition on the bare posterior
        }
        MaskedHypothesis masked = mask_by_confidence(hyp, thresh, vocab.mask_id());
        std::vector<int> input{vocab.cls_id()};
        input.insert(input.end(), masked.tokens.begin(), masked.tokens.end());

        CmlmValues<S> cm;
        {
            typename Tape<S>::NoGrad guard(*z.tape);
            cm = detail::cmlm_values(cmlm_forward(p, dec_cfg, input, x_out));
        }
        if (cmlm_invocations) ++(*cmlm_invocations);
        if (trace) {
            trace->push_back({"tap" + std::to_string(layer),
                              static_cast<int>(masked.masked_indices.size()), masked.tokens});
        }
        Matrix<S> contrib = feedback_contributions<S>(zv.rows(), zv.cols(), cm,
                                                      masked.masked_indices, hyp.positions);
        return add(z, z.tape->constant(std::move(contrib)));
    };
}

// ---------------------------------------------------------------------------
// Mask-CTC decoding: greedy CTC, then up to max_iters rounds of
// mask-by-confidence and CMLM refill. Refilled tokens take the CMLM posterior
// as their new confidence; untouched tokens keep their CTC confidence. The
// SLU outputs always come from the last CMLM pass (a dedicated pass runs when
// no refinement was needed).
// ---------------------------------------------------------------------------

template <typename S>
DecodeOutput mask_ctc_decode(const ModelParams<S>& params, const ModelConfig& cfg,
                             const JointVocabulary& vocab, const MatrixF& features,
                             const RefinementConfig& rc) {
    rc.validate();
    Tape<S> tape(false);
    BoundParams<S> p = bind_params(tape, params, false);
    Var<S> feats = tape.leaf(features.cast<S>());
    EncoderResult<S> enc = encode_features(p, cfg.encoder, feats);
    Matrix<S> posterior = softmax_rows(ctc_head_logits(p, enc.x)).value();
    CtcDecodeResult y0 = greedy_collapse(posterior, vocab.blank_id());

    DecodeOutput out;
    if (rc.trace) out.trace.push_back({"ctc", 0, y0.tokens});

    if (y0.tokens.empty()) {
        // no hypothesis to refine; read the SLU outputs from a CLS-only pass
        CmlmValues<S> cm = detail::cmlm_values(
            cmlm_forward(p, cfg.decoder, {vocab.cls_id()}, enc.x));
        detail::read_slu(cm, vocab, &out);
        return out;
    }

    std::vector<int> tokens = y0.tokens;
    std::vector<double> confidences = y0.confidences;
    bool have_cmlm = false;
    std::vector<int> last_input;
    for (int i = 1; i <= rc.max_iters; ++i) {
        CtcDecodeResult current;
        current.tokens = tokens;
        current.confidences = confidences;
        MaskedHypothesis masked = mask_by_confidence(current, rc.p_thresh, vocab.mask_id());
        if (masked.masked_indices.empty()) break;

        std::vector<int> input{vocab.cls_id()};
        input.insert(input.end(), masked.tokens.begin(), masked.tokens.end());
        // identical decoder input reproduces the previous pass exactly: the
        // loop has reached a fixpoint and further iterations cannot change Y
        if (input == last_input) break;
        last_input = input;
        CmlmValues<S> cm = detail::cmlm_values(cmlm_forward(p, cfg.decoder, input, enc.x));
        for (int idx : masked.masked_indices) {
            const int best =
                detail::argmax_in_range(cm.asr_logp, idx, vocab.asr_begin(), vocab.asr_end());
            tokens[static_cast<std::size_t>(idx)] = best;
            confidences[static_cast<std::size_t>(idx)] =
                std::exp(static_cast<double>(cm.asr_logp(idx, best)));
        }
        detail::read_slu(cm, vocab, &out);
        have_cmlm = true;
        out.iterations_used = i;
        if (rc.trace) {
            out.trace.push_back({"iter" + std::to_string(i),
                                 static_cast<int>(masked.masked_indices.size()), tokens});
        }
    }
    if (!have_cmlm) {
        // everything was confident: one pass over the unmasked hypothesis for SLU
        std::vector<int> input{vocab.cls_id()};
        input.insert(input.end(), tokens.begin(), tokens.end());
        CmlmValues<S> cm = detail::cmlm_values(cmlm_forward(p, cfg.decoder, input, enc.x));
        detail::read_slu(cm, vocab, &out);
    }
    out.transcript = tokens;
    return out;
}

// ---------------------------------------------------------------------------
// SC-Mask-CTC decoding: the encoder runs layer by layer with the feedback
// hook doing one CMLM pass per tap; the final layer gets a single CMLM
// iteration (mask by the final threshold, refill once) that yields the
// transcript and the SLU outputs.
// ---------------------------------------------------------------------------

template <typename S>
DecodeOutput sc_mask_ctc_decode(const ModelParams<S>& params, const ModelConfig& cfg,
                                const JointVocabulary& vocab, const MatrixF& features,
                                const RefinementConfig& rc) {
    rc.validate();
    Tape<S> tape(false);
    BoundParams<S> p = bind_params(tape, params, false);
    Var<S> feats = tape.leaf(features.cast<S>());

    DecodeOutput out;
    int invocations = 0;
    FeedbackHook<S> hook =
        make_feedback_hook<S>(p, cfg.encoder, cfg.decoder, vocab, rc.tap_thresholds,
                              &invocations, rc.trace ? &out.trace : nullptr);
    EncoderResult<S> enc = encode_features(p, cfg.encoder, feats, hook);

    Matrix<S> posterior = softmax_rows(ctc_head_logits(p, enc.x)).value();
    CtcDecodeResult hyp = greedy_collapse(posterior, vocab.blank_id());
    if (hyp.tokens.empty()) {
        CmlmValues<S> cm = detail::cmlm_values(
            cmlm_forward(p, cfg.decoder, {vocab.cls_id()}, enc.x));
        ++invocations;
        detail::read_slu(cm, vocab, &out);
        out.iterations_used = invocations;
        if (rc.trace) out.trace.push_back({"final", 0, {}});
        return out;
    }
    MaskedHypothesis masked = mask_by_confidence(hyp, rc.p_thresh, vocab.mask_id());
    std::vector<int> input{vocab.cls_id()};
    input.insert(input.end(), masked.tokens.begin(), masked.tokens.end());
    CmlmValues<S> cm = detail::cmlm_values(cmlm_forward(p, cfg.decoder, input, enc.x));
    ++invocations;
    std::vector<int> tokens = masked.tokens;
    for (int idx : masked.masked_indices) {
        tokens[static_cast<std::size_t>(idx)] =
            detail::argmax_in_range(cm.asr_logp, idx, vocab.asr_begin(), vocab.asr_end());
    }
    detail::read_slu(cm, vocab, &out);
    out.transcript = tokens;
    out.iterations_used = invocations;
    if (rc.trace) {
        out.trace.push_back({"final", static_cast<int>(masked.masked_indices.size()), tokens});
    }
    return out;
}

// ---------------------------------------------------------------------------
// AR joint CTC/attention beam search. Candidates are scored by
// (1-w) * attention log-prob + w * CTC prefix score (complete-sequence score
// at EOS); per step only the top-beam candidates survive, EOS candidates
// finalize. The per-step SLU argmax rides along: slot tags at token steps,
// the intent at the EOS step. Completed hypotheses compare by joint score
// normalized by token count (EOS included).
// ---------------------------------------------------------------------------

template <typename S>
DecodeOutput ar_beam_decode(const ModelParams<S>& params, const ModelConfig& cfg,
                            const JointVocabulary& vocab, const MatrixF& features,
                            const RefinementConfig& rc) {
    rc.validate();
    const double w = rc.ar_ctc_weight;
    if (w < 0.0 || w > 1.0) throw ConfigError("ar_beam_decode: ctc weight out of [0, 1]");
    Tape<S> tape(false);
    BoundParams<S> p = bind_params(tape, params, false);
    Var<S> feats = tape.leaf(features.cast<S>());
    EncoderResult<S> enc = encode_features(p, cfg.encoder, feats);
    const Matrix<S> ctc_logp = log_softmax_rows(ctc_head_logits(p, enc.x)).value();
    const int max_len = static_cast<int>(enc.x.rows());  // frame-count cap

    struct Hyp {
        std::vector<int> tokens;
        std::vector<int> slots;
        double attn_lp = 0.0;
        double joint = 0.0;
    };
    struct Done {
        std::vector<int> tokens;
        std::vector<int> slots;
        int intent = -1;
        double norm_score = 0.0;
        int steps = 0;
    };
    std::vector<Hyp> live{Hyp{}};
    std::vector<Done> completed;

    int steps_taken = 0;
    for (int step = 1; step <= max_len && !live.empty(); ++step) {
        steps_taken = step;
        struct Cand {
            int parent;
            int token;  // eos marks completion
            int slu;
            double attn_lp;
            double joint;
        };
        std::vector<Cand> cands;
        for (std::size_t h = 0; h < live.size(); ++h) {
            auto [asr_row, slu_row] =
                ar_decoder_step(p, cfg.decoder, vocab.cls_id(), live[h].tokens, enc.x);
            Matrix<S> slu_mat = slu_row;
            for (int c = vocab.asr_begin(); c < vocab.asr_end(); ++c) {
                std::vector<int> g = live[h].tokens;
                g.push_back(c);
                const double attn = live[h].attn_lp + static_cast<double>(asr_row(0, c));
                const double ctc =
                    static_cast<double>(ctc_prefix_score<S>(ctc_logp, g, vocab.blank_id()));
                const int slot =
                    detail::argmax_in_range(slu_mat, 0, vocab.slot_begin(), vocab.slot_end());
                cands.push_back(
                    {static_cast<int>(h), c, slot, attn, (1.0 - w) * attn + w * ctc});
            }
            // EOS candidate: complete-sequence CTC mass, intent-block SLU
            {
                const double attn =
                    live[h].attn_lp + static_cast<double>(asr_row(0, vocab.eos_id()));
                const double ctc = static_cast<double>(
                    ctc_complete_score<S>(ctc_logp, live[h].tokens, vocab.blank_id()));
                const int intent = detail::argmax_in_range(slu_mat, 0, vocab.intent_begin(),
                                                           vocab.intent_end());
                cands.push_back({static_cast<int>(h), vocab.eos_id(), intent, attn,
                                 (1.0 - w) * attn + w * ctc});
            }
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.joint > b.joint; });
        std::vector<Hyp> next;
        const std::size_t keep = std::min<std::size_t>(cands.size(),
                                                       static_cast<std::size_t>(rc.beam));
        for (std::size_t i = 0; i < keep; ++i) {
            const Cand& c = cands[i];
            const Hyp& parent = live[static_cast<std::size_t>(c.parent)];
            if (c.token == vocab.eos_id()) {
                Done d;
                d.tokens = parent.tokens;
                d.slots = parent.slots;
                d.intent = c.slu;
                // normalize by token count including the EOS step
                d.norm_score = c.joint / static_cast<double>(parent.tokens.size() + 1);
                d.steps = step;
                completed.push_back(std::move(d));
            } else {
                Hyp h = parent;
                h.tokens.push_back(c.token);
                h.slots.push_back(c.slu);
                h.attn_lp = c.attn_lp;
                h.joint = c.joint;
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
    }

    DecodeOutput out;
    out.iterations_used = steps_taken;
    if (!completed.empty()) {
        const Done* best = &completed.front();
        for (const Done& d : completed) {
            if (d.norm_score > best->norm_score) best = &d;
        }
        out.transcript = best->tokens;
        out.slot_tags = best->slots;
        out.intent = best->intent;
        out.score = best->norm_score;
        return out;
    }
    // length cap hit with no completion: best running hypothesis, intent read
    // from one final step as if EOS were forced
    out.truncated = true;
    const Hyp* best = &live.front();
    for (const Hyp& h : live) {
        if (h.joint > best->joint) best = &h;
    }
    out.transcript = best->tokens;
    out.slot_tags = best->slots;
    out.score = best->joint / std::max<double>(1.0, static_cast<double>(best->tokens.size()));
    auto [asr_row, slu_row] = ar_decoder_step(p, cfg.decoder, vocab.cls_id(), best->tokens, enc.x);
    Matrix<S> slu_mat = slu_row;
    out.intent = detail::argmax_in_range(slu_mat, 0, vocab.intent_begin(), vocab.intent_end());
    return out;
}

// Dispatch by model kind; the entry point the CLI and benchmarks use.
template <typename S>
DecodeOutput decode_utterance(const ModelParams<S>& params, const ModelConfig& cfg,
                              const JointVocabulary& vocab, const MatrixF& features,
                              const RefinementConfig& rc) {
    switch (cfg.kind) {
        case ModelKind::mask_ctc: return mask_ctc_decode(params, cfg, vocab, features, rc);
        case ModelKind::sc_mask_ctc: return sc_mask_ctc_decode(params, cfg, vocab, features, rc);
        case ModelKind::ar: return ar_beam_decode(params, cfg, vocab, features, rc);
    }
    throw ContractError("decode_utterance: bad model kind");
}

}  // namespace narslu
