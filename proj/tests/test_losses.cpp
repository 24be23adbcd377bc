#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "narslu/infer.hpp"
#include "narslu/losses.hpp"

#include "grad_check.hpp"

using namespace narslu;
using narslu::testing::model_fd_check;
using narslu::testing::random_matrix;

namespace {

// tiny synthetic world shared by the composite-loss tests
struct TinyWorld {
    SynthConfig synth;
    SynthDataset data;
    Batch batch;

    TinyWorld() {
        synth.n_intents = 2;
        synth.n_slot_types = 1;
        synth.slot_value_words = 2;
        synth.total_words = 7;
        synth.min_len = 2;
        synth.max_len = 4;
        synth.min_frames = 4;
        synth.max_frames = 5;
        synth.feature_dim = 5;
        synth.noise = 0.05;
        synth.n_train = 3;
        synth.n_dev = 1;
        synth.n_test = 1;
        data = synth_generate(synth, 21);
        batch = make_batches(data.train.utterances, data.vocab, 8, 5)[0];
    }

    ModelConfig model(ModelKind kind) const {
        ModelConfig cfg;
        cfg.kind = kind;
        cfg.encoder = EncoderConfig{2, 8, 2, 16, 3, {}, data.vocab.size(), 5, 64};
        cfg.decoder = DecoderConfig{1, 8, 2, 16, data.vocab.size(), 64};
        if (kind == ModelKind::sc_mask_ctc) cfg.encoder.taps = {1};
        return cfg;
    }
};

template <typename S>
CmlmResult<S> fake_cmlm(Tape<S>& tape, Matrix<S> asr_logp, Matrix<S> slu_logp) {
    CmlmResult<S> r;
    r.asr_logp = tape.leaf(std::move(asr_logp));
    r.slu_logp = tape.leaf(std::move(slu_logp));
    return r;
}

}  // namespace

TEST_CASE("loss_cmlm: perfect predictions give zero loss") {
    using S = double;
    Tape<S> tape;
    Matrix<S> asr = Matrix<S>::Constant(3, 6, -1e9);
    std::vector<int> transcript{2, 4, 1};
    for (int i = 0; i < 3; ++i) asr(i, transcript[static_cast<std::size_t>(i)]) = 0.0;
    auto cm = fake_cmlm<S>(tape, asr, Matrix<S>::Zero(4, 6));
    Var<S> loss = loss_cmlm(cm, {0, 2}, transcript);
    CHECK(loss.value()(0, 0) == 0.0);
}

TEST_CASE("loss_cmlm: uniform over a block of size B costs ln B") {
    using S = double;
    Tape<S> tape;
    const int block = 4;
    Matrix<S> asr = Matrix<S>::Constant(2, 10, -1e9);
    asr.block(0, 0, 2, block).setConstant(std::log(1.0 / block));
    std::vector<int> transcript{1, 3};  // ids inside the uniform block
    auto cm = fake_cmlm<S>(tape, asr, Matrix<S>::Zero(3, 10));
    Var<S> loss = loss_cmlm(cm, {0, 1}, transcript);
    CHECK(loss.value()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("loss_cmlm: unmasked positions do not contribute") {
    using S = double;
    Rng rng(3);
    Matrix<S> asr = random_matrix<S>(4, 6, rng);
    std::vector<int> transcript{0, 1, 2, 3};
    Tape<S> t1, t2;
    auto c1 = fake_cmlm<S>(t1, asr, Matrix<S>::Zero(5, 6));
    Matrix<S> perturbed = asr;
    perturbed.row(1).array() += 7.0;  // position 1 is not masked
    perturbed.row(3).array() -= 2.0;  // neither is 3
    auto c2 = fake_cmlm<S>(t2, perturbed, Matrix<S>::Zero(5, 6));
    CHECK(loss_cmlm(c1, {0, 2}, transcript).value()(0, 0) ==
          loss_cmlm(c2, {0, 2}, transcript).value()(0, 0));
    CHECK_THROWS_AS(loss_cmlm(c1, {}, transcript), ContractError);
}

TEST_CASE("loss_slu: perfect predictions give zero, blocks decompose additively") {
    using S = double;
    Tape<S> tape;
    Matrix<S> slu = Matrix<S>::Constant(3, 12, -1e9);
    slu(0, 5) = 0.0;   // intent id 5
    slu(1, 8) = 0.0;   // slot tags
    slu(2, 9) = 0.0;
    auto cm = fake_cmlm<S>(tape, Matrix<S>::Zero(2, 12), slu);
    CHECK(loss_slu(cm, 5, {8, 9}).value()(0, 0) == 0.0);
}

TEST_CASE("loss_slu: uniform blocks cost ln 70 + N ln 113") {
    using S = double;
    // SLURP-scale block sizes: 70 intents, 113 slot tags
    std::vector<std::string> units(500), intents(70), slots(56);
    for (int i = 0; i < 500; ++i) units[i] = "u" + std::to_string(i);
    for (int i = 0; i < 70; ++i) intents[i] = "i" + std::to_string(i);
    for (int i = 0; i < 56; ++i) slots[i] = "s" + std::to_string(i);
    JointVocabulary v(units, intents, slots);
    REQUIRE(v.size() == 688);
    const int n = 3;
    Tape<S> tape;
    Matrix<S> slu = Matrix<S>::Constant(n + 1, v.size(), -1e9);
    slu.block(0, v.intent_begin(), 1, 70).setConstant(std::log(1.0 / 70.0));
    slu.block(1, v.slot_begin(), n, 113).setConstant(std::log(1.0 / 113.0));
    auto cm = fake_cmlm<S>(tape, Matrix<S>::Zero(n, v.size()), slu);
    const int o_tag = v.id_of("O");
    Var<S> loss = loss_slu(cm, v.intent_begin() + 7, {o_tag, o_tag, o_tag});
    CHECK(loss.value()(0, 0) ==
          doctest::Approx(std::log(70.0) + n * std::log(113.0)).epsilon(1e-12));
}

TEST_CASE("loss_slu: intent term is independent of slot logits") {
    using S = double;
    Rng rng(5);
    Matrix<S> slu_a = random_matrix<S>(3, 8, rng);
    Matrix<S> slu_b = slu_a;
    slu_b.row(1).array() += 3.0;
    slu_b.row(2).array() -= 1.0;
    Tape<S> t1, t2;
    auto a = fake_cmlm<S>(t1, Matrix<S>::Zero(2, 8), slu_a);
    auto b = fake_cmlm<S>(t2, Matrix<S>::Zero(2, 8), slu_b);
    const double la = loss_slu(a, 4, {1, 2}).value()(0, 0);
    const double lb = loss_slu(b, 4, {1, 2}).value()(0, 0);
    // subtracting each version's own slot terms leaves the identical intent term
    const double slots_a = -(slu_a(1, 1) + slu_a(2, 2));
    const double slots_b = -(slu_b(1, 1) + slu_b(2, 2));
    CHECK(la - slots_a == doctest::Approx(lb - slots_b).epsilon(1e-12));
}

TEST_CASE("teacher-forced cross-entropy of perfect step predictions is zero") {
    using S = double;
    Tape<S> tape;
    Matrix<S> logp = Matrix<S>::Constant(3, 5, -1e9);
    std::vector<std::pair<int, int>> picks{{0, 2}, {1, 0}, {2, 4}};
    for (auto [r, c] : picks) logp(r, c) = 0.0;
    Var<S> ce = scale(sum_all(pick_entries(tape.leaf(logp), picks)), S(-1));
    CHECK(ce.value()(0, 0) == 0.0);
}

TEST_CASE("mask-ctc composite: endpoint and recomposition") {
    using S = double;
    TinyWorld w;
    ModelConfig cfg = w.model(ModelKind::mask_ctc);
    Rng rng(7);
    ModelParams<S> params = init_model_params<S>(cfg, rng);
    Rng mask_rng(9);
    auto masks = sample_batch_masks(w.batch, w.data.vocab, mask_rng);

    // lambda = 1 reduces to the pure CTC loss
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        Var<S> composite = loss_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                  w.data.vocab, S(1), S(0.5));
        Var<S> pure = loss_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab);
        CHECK(std::abs(composite.value()(0, 0) - pure.value()(0, 0)) <= 1e-6);
    }
    // hand recomposition from the breakdown components
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        LossBreakdown<S> bd;
        Var<S> composite = loss_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                  w.data.vocab, S(0.4), S(0.5), &bd);
        const double hand = 0.4 * bd.ctc + 0.6 * (0.5 * bd.cmlm_asr + 0.5 * bd.cmlm_slu);
        CHECK(std::abs(composite.value()(0, 0) - hand) <= 1e-6);
        // components recomputed independently agree
        Var<S> ctc_alone = loss_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab);
        CHECK(std::abs(bd.ctc - ctc_alone.value()(0, 0)) <= 1e-9);
    }
}

TEST_CASE("sc-ctc composite: endpoints, single-tap and two-tap identities") {
    using S = double;
    TinyWorld w;
    ModelConfig cfg = w.model(ModelKind::sc_mask_ctc);
    Rng rng(11);
    ModelParams<S> params = init_model_params<S>(cfg, rng);

    // eta = 1: final-layer CTC only
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        Var<S> sc =
            loss_sc_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab, S(1));
        Var<S> pure = loss_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab);
        CHECK(std::abs(sc.value()(0, 0) - pure.value()(0, 0)) <= 1e-6);
    }
    // zero taps with eta < 1 is a contract violation
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        EncoderConfig no_taps = cfg.encoder;
        no_taps.taps.clear();
        CHECK_THROWS_AS(
            loss_sc_ctc_batch<S>(tape, bound, no_taps, w.batch, w.data.vocab, S(0.5)),
            ConfigError);
    }
    // K = 1: the intermediate term is exactly that tap's CTC loss
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        LossBreakdown<S> bd;
        loss_sc_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab, S(0.5), {}, &bd);
        double hand = 0;
        for (int u = 0; u < w.batch.size(); ++u) {
            Var<S> feats = tape.leaf(w.batch.features_of(u).cast<S>());
            EncoderResult<S> res = encode_features(bound, cfg.encoder, feats);
            REQUIRE(res.taps.size() == 1);
            hand += ctc_loss(res.taps[0].z_log, w.batch.transcript_of(u),
                             w.data.vocab.blank_id())
                        .value()(0, 0);
        }
        hand /= w.batch.size();
        CHECK(std::abs(bd.inter_ctc - hand) <= 1e-9);
    }
    // K = 2: the intermediate term is the mean of the per-tap losses
    {
        ModelConfig two = cfg;
        two.encoder.layers = 3;
        two.encoder.taps = {1, 2};
        Rng rng2(13);
        ModelParams<S> params2 = init_model_params<S>(two, rng2);
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params2, false);
        LossBreakdown<S> bd;
        loss_sc_ctc_batch<S>(tape, bound, two.encoder, w.batch, w.data.vocab, S(0.3), {}, &bd);
        double hand = 0;
        for (int u = 0; u < w.batch.size(); ++u) {
            Var<S> feats = tape.leaf(w.batch.features_of(u).cast<S>());
            EncoderResult<S> res = encode_features(bound, two.encoder, feats);
            REQUIRE(res.taps.size() == 2);
            double per_utt = 0;
            for (const auto& tap : res.taps) {
                per_utt += ctc_loss(tap.z_log, w.batch.transcript_of(u),
                                    w.data.vocab.blank_id())
                               .value()(0, 0);
            }
            hand += per_utt / 2.0;
        }
        hand /= w.batch.size();
        CHECK(std::abs(bd.inter_ctc - hand) <= 1e-6);
    }
}

TEST_CASE("sc-mask-ctc composite: mu endpoint and hook-disabled recomposition") {
    using S = double;
    TinyWorld w;
    ModelConfig cfg = w.model(ModelKind::sc_mask_ctc);
    Rng rng(17);
    ModelParams<S> params = init_model_params<S>(cfg, rng);
    Rng mask_rng(19);
    auto masks = sample_batch_masks(w.batch, w.data.vocab, mask_rng);
    LossWeights<S> weights;  // defaults 0.4/0.5/0.5/0.4

    // mu = 1 equals loss_sc_ctc under the same (absent) hook
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        LossWeights<S> w1 = weights;
        w1.mu = S(1);
        Var<S> composite = loss_sc_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                     w.data.vocab, w1);
        Var<S> sc = loss_sc_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab,
                                         w1.eta);
        CHECK(std::abs(composite.value()(0, 0) - sc.value()(0, 0)) <= 1e-6);
    }
    // mu = 1 with the *feedback hook active* still equals sc-ctc on the same forward
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        FeedbackHook<S> hook = make_feedback_hook<S>(bound, cfg.encoder, cfg.decoder,
                                                     w.data.vocab, {0.9});
        LossWeights<S> w1 = weights;
        w1.mu = S(1);
        Var<S> composite = loss_sc_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                     w.data.vocab, w1, hook);
        Var<S> sc = loss_sc_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab,
                                         w1.eta, hook);
        CHECK(std::abs(composite.value()(0, 0) - sc.value()(0, 0)) <= 1e-6);
    }
    // hook disabled: composite == mu * sc_ctc + (1-mu) * (gamma*asr + (1-gamma)*slu)
    {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        LossBreakdown<S> bd;
        Var<S> composite = loss_sc_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                     w.data.vocab, weights, {}, &bd);
        Var<S> sc = loss_sc_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab,
                                         weights.eta);
        double joint = 0;
        for (int u = 0; u < w.batch.size(); ++u) {
            Var<S> feats = tape.leaf(w.batch.features_of(u).cast<S>());
            EncoderResult<S> res = encode_features(bound, cfg.encoder, feats);
            CmlmResult<S> cm = cmlm_forward(bound, cfg.decoder,
                                            masks[static_cast<std::size_t>(u)].decoder_input,
                                            res.x);
            const double asr =
                loss_cmlm(cm, masks[static_cast<std::size_t>(u)].masked_positions,
                          w.batch.transcript_of(u))
                    .value()(0, 0);
            const double slu = loss_slu(cm, w.batch.intents[static_cast<std::size_t>(u)],
                                        w.batch.tags_of(u))
                                   .value()(0, 0);
            joint += 0.5 * asr + 0.5 * slu;
        }
        joint /= w.batch.size();
        const double hand = 0.4 * sc.value()(0, 0) + 0.6 * joint;
        CHECK(std::abs(composite.value()(0, 0) - hand) <= 1e-6);
    }
}

TEST_CASE("ar composite: endpoint and recomposition") {
    using S = double;
    TinyWorld w;
    ModelConfig cfg = w.model(ModelKind::ar);
    Rng rng(23);
    ModelParams<S> params = init_model_params<S>(cfg, rng);

    Tape<S> tape;
    BoundParams<S> bound = bind_params(tape, params, false);
    Var<S> pure_at_1 =
        loss_ar_batch<S>(tape, bound, cfg, w.batch, w.data.vocab, S(1));
    Var<S> ctc = loss_ctc_batch<S>(tape, bound, cfg.encoder, w.batch, w.data.vocab);
    CHECK(std::abs(pure_at_1.value()(0, 0) - ctc.value()(0, 0)) <= 1e-6);

    LossBreakdown<S> bd;
    Var<S> mixed = loss_ar_batch<S>(tape, bound, cfg, w.batch, w.data.vocab, S(0.3), &bd);
    CHECK(std::abs(mixed.value()(0, 0) - (0.3 * bd.ctc + 0.7 * bd.ar_attn)) <= 1e-6);
    CHECK(std::abs(bd.ctc - ctc.value()(0, 0)) <= 1e-9);
}

TEST_CASE("composite losses pass finite-difference spot checks") {
    using S = long double;
    TinyWorld w;
    Rng mask_rng(29);
    auto masks = sample_batch_masks(w.batch, w.data.vocab, mask_rng);
    const S step = S(1e-4);

    SUBCASE("mask-ctc") {
        ModelConfig cfg = w.model(ModelKind::mask_ctc);
        Rng rng(31);
        ModelParams<S> params = init_model_params<S>(cfg, rng);
        auto report = model_fd_check<S>(
            params,
            [&](Tape<S>& tape, BoundParams<S>& bound) {
                return loss_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks, w.data.vocab,
                                              S(0.4), S(0.5));
            },
            25, rng, step);
        CHECK(report.coords_checked >= 20);
        CHECK(report.max_rel_err <= 1e-3L);
    }
    SUBCASE("sc-mask-ctc without feedback") {
        ModelConfig cfg = w.model(ModelKind::sc_mask_ctc);
        Rng rng(37);
        ModelParams<S> params = init_model_params<S>(cfg, rng);
        LossWeights<S> weights;
        auto report = model_fd_check<S>(
            params,
            [&](Tape<S>& tape, BoundParams<S>& bound) {
                return loss_sc_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                 w.data.vocab, weights);
            },
            25, rng, step);
        CHECK(report.max_rel_err <= 1e-3L);
    }
    SUBCASE("sc-mask-ctc with detached feedback") {
        // The fed-back CMLM distributions are stop-gradients: the training
        // gradient is the partial derivative holding them fixed. The finite-
        // difference oracle therefore replays the contributions recorded at
        // the unperturbed parameters instead of re-running the CMLM passes.
        ModelConfig cfg = w.model(ModelKind::sc_mask_ctc);
        Rng rng(41);
        ModelParams<S> params = init_model_params<S>(cfg, rng);
        LossWeights<S> weights;

        std::vector<Matrix<S>> recorded;
        {
            Tape<S> tape;
            BoundParams<S> bound = bind_params(tape, params, false);
            FeedbackHook<S> real = make_feedback_hook<S>(bound, cfg.encoder, cfg.decoder,
                                                         w.data.vocab, {0.9});
            FeedbackHook<S> recording = [&](int layer, Var<S> z, Var<S> x_out) {
                Var<S> out = real(layer, z, x_out);
                recorded.push_back(out.value() - z.value());
                return out;
            };
            loss_sc_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks, w.data.vocab,
                                      weights, recording);
        }
        REQUIRE(recorded.size() == static_cast<std::size_t>(w.batch.size()));

        auto report = model_fd_check<S>(
            params,
            [&](Tape<S>& tape, BoundParams<S>& bound) {
                auto next = std::make_shared<std::size_t>(0);
                FeedbackHook<S> replay = [&, next](int, Var<S> z, Var<S>) {
                    return add(z, z.tape->constant(recorded.at((*next)++)));
                };
                return loss_sc_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                 w.data.vocab, weights, replay);
            },
            25, rng, step);
        CHECK(report.max_rel_err <= 1e-3L);
    }
    SUBCASE("ar") {
        ModelConfig cfg = w.model(ModelKind::ar);
        Rng rng(43);
        ModelParams<S> params = init_model_params<S>(cfg, rng);
        auto report = model_fd_check<S>(
            params,
            [&](Tape<S>& tape, BoundParams<S>& bound) {
                return loss_ar_batch<S>(tape, bound, cfg, w.batch, w.data.vocab, S(0.3));
            },
            25, rng, step);
        CHECK(report.max_rel_err <= 1e-3L);
    }
}

TEST_CASE("padding neutrality: corrupting the pad region never changes the loss") {
    using S = double;
    TinyWorld w;
    ModelConfig cfg = w.model(ModelKind::mask_ctc);
    Rng rng(47);
    ModelParams<S> params = init_model_params<S>(cfg, rng);
    Rng mask_rng(49);
    auto masks = sample_batch_masks(w.batch, w.data.vocab, mask_rng);

    auto eval = [&](const Batch& b) {
        Tape<S> tape;
        BoundParams<S> bound = bind_params(tape, params, false);
        return loss_mask_ctc_batch<S>(tape, bound, cfg, b, masks, w.data.vocab, S(0.4),
                                      S(0.5))
            .value()(0, 0);
    };
    const double base = eval(w.batch);
    Batch corrupted = w.batch;
    for (int u = 0; u < corrupted.size(); ++u) {
        for (int t = corrupted.feat_len[static_cast<std::size_t>(u)]; t < corrupted.t_max; ++t) {
            corrupted.features.row(static_cast<Index>(u) * corrupted.t_max + t)
                .setConstant(1e6f);
        }
    }
    CHECK(eval(corrupted) == base);
}

TEST_CASE("masked-loss equality: padded batch equals per-utterance recomputation") {
    using S = double;
    TinyWorld w;
    ModelConfig cfg = w.model(ModelKind::mask_ctc);
    Rng rng(53);
    ModelParams<S> params = init_model_params<S>(cfg, rng);
    Rng mask_rng(59);
    auto masks = sample_batch_masks(w.batch, w.data.vocab, mask_rng);

    Tape<S> tape;
    BoundParams<S> bound = bind_params(tape, params, false);
    const double batch_loss = loss_mask_ctc_batch<S>(tape, bound, cfg, w.batch, masks,
                                                     w.data.vocab, S(0.4), S(0.5))
                                  .value()(0, 0);
    double sum = 0;
    for (int u = 0; u < w.batch.size(); ++u) {
        // single-utterance batch built from the unpadded utterance
        std::vector<Utterance> one{w.data.train.utterances[0]};
        // map the batch row back to the original utterance by id
        for (const Utterance& cand : w.data.train.utterances) {
            if (cand.id == w.batch.ids[static_cast<std::size_t>(u)]) one[0] = cand;
        }
        Batch b1 = make_batches(one, w.data.vocab, 1, 1)[0];
        std::vector<MaskedTarget> m1{masks[static_cast<std::size_t>(u)]};
        Tape<S> t1;
        BoundParams<S> b1p = bind_params(t1, params, false);
        sum += loss_mask_ctc_batch<S>(t1, b1p, cfg, b1, m1, w.data.vocab, S(0.4), S(0.5))
                   .value()(0, 0);
    }
    CHECK(std::abs(batch_loss - sum / w.batch.size()) <= 1e-5);
}
