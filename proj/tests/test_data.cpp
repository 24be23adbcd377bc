#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "narslu/data.hpp"
#include "narslu/vocab.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

using namespace narslu;

namespace {

std::vector<std::string> fake_units(int n, const std::string& prefix) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

std::string write_temp_jsonl(const std::vector<std::string>& lines) {
    static int counter = 0;
    std::string path = (std::filesystem::temp_directory_path() /
                        ("narslu_test_" + std::to_string(counter++) + ".jsonl"))
                           .string();
    std::ofstream os(path);
    for (const auto& l : lines) os << l << "\n";
    return path;
}

}  // namespace

TEST_CASE("vocabulary size derives from component counts") {
    // 500 pieces + 70 intents + (2*56+1) tags + 5 specials
    JointVocabulary big(fake_units(500, "piece"), fake_units(70, "intent"),
                        fake_units(56, "slot"));
    CHECK(big.size() == 500 + 70 + 113 + 5);

    JointVocabulary tiny({"word"}, {"intent"}, {"slot"});
    CHECK(tiny.size() == 1 + 1 + 3 + 5);
}

TEST_CASE("vocabulary blocks are disjoint, contiguous, and round-trip") {
    JointVocabulary v(fake_units(7, "w"), fake_units(3, "i"), fake_units(2, "s"));
    CHECK(v.asr_begin() == 0);
    CHECK(v.asr_end() == 7);
    CHECK(v.intent_begin() == 7);
    CHECK(v.intent_end() == 10);
    CHECK(v.slot_begin() == 10);
    CHECK(v.slot_end() == 15);  // B_s0, B_s1, I_s0, I_s1, O
    CHECK(v.size() == 20);
    CHECK(v.blank_id() == 15);
    CHECK(v.eos_id() == 19);
    for (int id = 0; id < v.size(); ++id) {
        CHECK(v.id_of(v.string_of(id)) == id);
        const int in_blocks = int(v.is_asr(id)) + int(v.is_intent(id)) + int(v.is_slot_tag(id));
        const bool special = id >= v.slot_end();
        CHECK(in_blocks == (special ? 0 : 1));
    }
}

TEST_CASE("vocabulary rejects duplicates and empty inventories") {
    CHECK_THROWS_AS(JointVocabulary({"a", "a"}, {"i"}, {"s"}), ConfigError);
    CHECK_THROWS_AS(JointVocabulary({}, {"i"}, {"s"}), ConfigError);
    // cross-block collision: a word spelled like a slot tag
    CHECK_THROWS_AS(JointVocabulary({"B_s"}, {"i"}, {"s"}), ConfigError);
}

TEST_CASE("word tokenizer: basic, empty, unknown, round-trip") {
    JointVocabulary v = build_vocab({"set lunch every day"}, {"i"}, {"s"}, TokenPolicy::word);
    CHECK(tokenize("set lunch", v) ==
          std::vector<int>{v.id_of("set"), v.id_of("lunch")});
    CHECK(tokenize("", v).empty());
    CHECK_THROWS_AS(tokenize("unknownword", v), UnknownTokenError);
    const std::string text = "every day set lunch";
    CHECK(detokenize(tokenize(text, v), v) == text);
}

TEST_CASE("normalize_text lower-cases and single-spaces") {
    CHECK(normalize_text("  Set   LUNCH\tnow ") == "set lunch now");
}

TEST_CASE("bpe training matches a hand-traced merge sequence") {
    // corpus: low, low, lower
    // pair counts: (l,o)=3 (o,w)=3 (w,</w>)=2 (w,e)=1 (e,r)=1 (r,</w>)=1
    // merge 1: tie at 3 broken lexicographically -> (l,o)
    // merge 2: (lo,w)=3
    // merge 3: (low,</w>)=2
    // then every remaining pair occurs once, so training stops
    BpeModel m = train_bpe({"low", "low", "lower"}, 10);
    REQUIRE(m.merges.size() == 3);
    CHECK(m.merges[0] == std::pair<std::string, std::string>("l", "o"));
    CHECK(m.merges[1] == std::pair<std::string, std::string>("lo", "w"));
    CHECK(m.merges[2] == std::pair<std::string, std::string>("low", "</w>"));
    CHECK(m.segment("low") == std::vector<std::string>{"low</w>"});
    CHECK(m.segment("lower") == std::vector<std::string>{"low", "e", "r", "</w>"});
    CHECK(m.segment("lot") == std::vector<std::string>{"lo", "t", "</w>"});
}

TEST_CASE("bpe vocabulary round-trips in-vocabulary text") {
    JointVocabulary v = build_vocab({"low lower low", "slow lower"}, {"i"}, {"s"},
                                    TokenPolicy::bpe, 8);
    const std::string text = "lower slow low";
    CHECK(detokenize(tokenize(text, v), v) == text);
}

TEST_CASE("slurp ingestion reproduces the worked tagging example") {
    JointVocabulary v = build_vocab({"set lunch every day at twelve thirty"},
                                    {"calendar_set", "alarm_set"},
                                    {"meal_type", "general_frequency", "time"},
                                    TokenPolicy::word);
    AnnotationRecord rec;
    rec.id = "u1";
    rec.transcript = "set lunch every day at twelve thirty";
    rec.intent = "calendar_set";
    rec.entities = {{"meal_type", "lunch"},
                    {"general_frequency", "every day"},
                    {"time", "twelve thirty"}};
    std::string path = write_temp_jsonl({annotation_to_json(rec)});
    LoadResult res = load_slurp_jsonl(path, v);
    std::remove(path.c_str());
    REQUIRE(res.utterances.size() == 1);
    CHECK(res.rejected.empty());
    const Utterance& u = res.utterances[0];
    CHECK(u.intent == v.id_of("calendar_set"));
    std::vector<std::string> tag_names;
    for (int t : u.slot_tags) tag_names.push_back(v.string_of(t));
    CHECK(tag_names == std::vector<std::string>{"O", "B_meal_type", "B_general_frequency",
                                                "I_general_frequency", "O", "B_time", "I_time"});
}

TEST_CASE("slurp ingestion: no entities means all-O tags") {
    JointVocabulary v = build_vocab({"hello there"}, {"greet"}, {"x"}, TokenPolicy::word);
    AnnotationRecord rec{"u1", "hello there", "greet", {}};
    std::string path = write_temp_jsonl({annotation_to_json(rec)});
    LoadResult res = load_slurp_jsonl(path, v);
    std::remove(path.c_str());
    REQUIRE(res.utterances.size() == 1);
    for (int t : res.utterances[0].slot_tags) CHECK(v.string_of(t) == "O");
}

TEST_CASE("slurp ingestion rejects bad spans with diagnostics") {
    JointVocabulary v = build_vocab({"set lunch every day"}, {"calendar_set"},
                                    {"meal_type", "time"}, TokenPolicy::word);
    AnnotationRecord missing{"u1", "set lunch every day", "calendar_set",
                             {{"time", "twelve"}}};
    AnnotationRecord overlapping{"u2", "set lunch every day", "calendar_set",
                                 {{"meal_type", "lunch every"}, {"time", "every day"}}};
    AnnotationRecord fine{"u3", "set lunch", "calendar_set", {{"meal_type", "lunch"}}};
    std::string path = write_temp_jsonl({annotation_to_json(missing),
                                         annotation_to_json(overlapping),
                                         annotation_to_json(fine)});
    LoadResult res = load_slurp_jsonl(path, v);
    std::remove(path.c_str());
    CHECK(res.utterances.size() == 1);
    CHECK(res.utterances[0].id == "u3");
    REQUIRE(res.rejected.size() == 2);
    CHECK(res.rejected[0].find("u1") != std::string::npos);
    CHECK(res.rejected[0].find("not found") != std::string::npos);
    CHECK(res.rejected[1].find("u2") != std::string::npos);
    CHECK(res.rejected[1].find("overlaps") != std::string::npos);
}

TEST_CASE("slurp ingestion: unknown intent or slot name is a hard error") {
    JointVocabulary v = build_vocab({"set lunch"}, {"calendar_set"}, {"meal_type"},
                                    TokenPolicy::word);
    AnnotationRecord bad_intent{"u1", "set lunch", "no_such_intent", {}};
    std::string p1 = write_temp_jsonl({annotation_to_json(bad_intent)});
    CHECK_THROWS_AS(load_slurp_jsonl(p1, v), UnknownTokenError);
    std::remove(p1.c_str());
    AnnotationRecord bad_slot{"u2", "set lunch", "calendar_set", {{"no_such_slot", "lunch"}}};
    std::string p2 = write_temp_jsonl({annotation_to_json(bad_slot)});
    CHECK_THROWS_AS(load_slurp_jsonl(p2, v), UnknownTokenError);
    std::remove(p2.c_str());
}

TEST_CASE("mask_targets: single-token transcript is fully masked") {
    JointVocabulary v({"w"}, {"i"}, {"s"});
    Rng rng(1);
    auto m = mask_targets({v.id_of("w")}, v, rng);
    CHECK(m.decoder_input == std::vector<int>{v.cls_id(), v.mask_id()});
    CHECK(m.masked_positions == std::vector<int>{0});
}

TEST_CASE("mask_targets: deterministic under a fixed seed") {
    JointVocabulary v(fake_units(6, "w"), {"i"}, {"s"});
    std::vector<int> transcript{0, 1, 2, 3, 4, 5};
    Rng a(99), b(99);
    for (int i = 0; i < 20; ++i) {
        auto ma = mask_targets(transcript, v, a);
        auto mb = mask_targets(transcript, v, b);
        CHECK(ma.decoder_input == mb.decoder_input);
        CHECK(ma.masked_positions == mb.masked_positions);
    }
}

TEST_CASE("mask_targets: masked-count histogram is uniform within 3 sigma") {
    JointVocabulary v(fake_units(4, "w"), {"i"}, {"s"});
    std::vector<int> transcript{0, 1, 2, 3};
    Rng rng(7);
    std::vector<int> hist(5, 0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto m = mask_targets(transcript, v, rng);
        hist[m.masked_positions.size()] += 1;
        // positions are distinct and sorted
        for (std::size_t k = 1; k < m.masked_positions.size(); ++k) {
            CHECK(m.masked_positions[k] > m.masked_positions[k - 1]);
        }
    }
    // each count 1..4 has p = 1/4: mean 2500, sigma = sqrt(n p (1-p)) ~ 43.3
    for (int c = 1; c <= 4; ++c) {
        CHECK(std::abs(hist[c] - 2500) <= 130);
    }
}

TEST_CASE("synth: zero noise with fixed frame count gives exact block repetitions") {
    SynthConfig cfg;
    cfg.noise = 0.0;
    cfg.min_frames = cfg.max_frames = 4;
    cfg.n_train = 5;
    cfg.n_dev = 1;
    cfg.n_test = 1;
    SynthDataset ds = synth_generate(cfg, 42);
    auto codes = synth_word_codes(cfg, 42, ds.vocab);
    for (std::size_t ui = 0; ui < ds.train.utterances.size(); ++ui) {
        const Utterance& u = ds.train.utterances[ui];
        int row = 0;
        for (std::size_t i = 0; i < u.transcript.size(); ++i) {
            for (int f = 0; f < 4; ++f, ++row) {
                CHECK((u.features.row(row) -
                       codes[static_cast<std::size_t>(u.transcript[i])].row(0))
                          .cwiseAbs()
                          .maxCoeff() == 0.0f);
            }
        }
    }
}

TEST_CASE("synth: byte-identical datasets from equal seeds") {
    SynthConfig cfg;
    cfg.n_train = 20;
    cfg.n_dev = 5;
    cfg.n_test = 5;
    SynthDataset a = synth_generate(cfg, 7);
    SynthDataset b = synth_generate(cfg, 7);
    REQUIRE(a.train.utterances.size() == b.train.utterances.size());
    for (std::size_t i = 0; i < a.train.utterances.size(); ++i) {
        const Utterance& ua = a.train.utterances[i];
        const Utterance& ub = b.train.utterances[i];
        CHECK(ua.id == ub.id);
        CHECK(ua.transcript == ub.transcript);
        CHECK(ua.intent == ub.intent);
        CHECK(ua.slot_tags == ub.slot_tags);
        REQUIRE(ua.features.rows() == ub.features.rows());
        CHECK(std::memcmp(ua.features.data(), ub.features.data(),
                          sizeof(float) * static_cast<std::size_t>(ua.features.size())) == 0);
    }
    SynthDataset c = synth_generate(cfg, 8);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.train.utterances.size(); ++i) {
        any_diff = any_diff ||
                   a.train.utterances[i].transcript != c.train.utterances[i].transcript;
    }
    CHECK(any_diff);
}

TEST_CASE("synth: frame-wise nearest-neighbor recovers token identities") {
    SynthConfig cfg;
    cfg.n_train = 60;
    cfg.n_dev = 1;
    cfg.n_test = 1;
    cfg.noise = 0.1;
    SynthDataset ds = synth_generate(cfg, 11);
    auto codes = synth_word_codes(cfg, 11, ds.vocab);
    long total = 0, correct = 0;
    for (std::size_t ui = 0; ui < ds.train.utterances.size(); ++ui) {
        const Utterance& u = ds.train.utterances[ui];
        const auto& frames = ds.train.token_frames[ui];
        int row = 0;
        for (std::size_t i = 0; i < u.transcript.size(); ++i) {
            for (int f = 0; f < frames[i]; ++f, ++row) {
                int best = -1;
                float best_d = std::numeric_limits<float>::max();
                for (int w = 0; w < ds.vocab.asr_end(); ++w) {
                    const float d = (u.features.row(row) -
                                     codes[static_cast<std::size_t>(w)].row(0))
                                        .squaredNorm();
                    if (d < best_d) {
                        best_d = d;
                        best = w;
                    }
                }
                total += 1;
                correct += (best == u.transcript[i]) ? 1 : 0;
            }
        }
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("synth: BIO validity of generated targets") {
    SynthConfig cfg;
    cfg.n_train = 100;
    cfg.n_dev = 1;
    cfg.n_test = 1;
    SynthDataset ds = synth_generate(cfg, 3);
    for (const Utterance& u : ds.train.utterances) {
        for (std::size_t i = 0; i < u.slot_tags.size(); ++i) {
            const std::string tag = ds.vocab.string_of(u.slot_tags[i]);
            if (tag.rfind("I_", 0) == 0) {
                REQUIRE(i > 0);
                const std::string prev = ds.vocab.string_of(u.slot_tags[i - 1]);
                const std::string type = tag.substr(2);
                CHECK((prev == "B_" + type || prev == "I_" + type));
            }
        }
    }
}

TEST_CASE("synth: inconsistent config is rejected") {
    SynthConfig cfg;
    cfg.n_intents = 0;
    CHECK_THROWS_AS(synth_generate(cfg, 1), ConfigError);
    SynthConfig cfg2;
    cfg2.total_words = cfg2.n_intents + cfg2.n_slot_types * cfg2.slot_value_words;
    CHECK_THROWS_AS(synth_generate(cfg2, 1), ConfigError);
}

TEST_CASE("make_batches: coverage, bucketing, masks") {
    SynthConfig cfg;
    cfg.n_train = 37;
    cfg.n_dev = 1;
    cfg.n_test = 1;
    SynthDataset ds = synth_generate(cfg, 5);
    auto batches = make_batches(ds.train.utterances, ds.vocab, 8, 99);
    std::size_t total = 0;
    std::set<std::string> seen;
    for (const Batch& b : batches) {
        total += static_cast<std::size_t>(b.size());
        for (int u = 0; u < b.size(); ++u) {
            seen.insert(b.ids[static_cast<std::size_t>(u)]);
            CHECK(b.feat_len[static_cast<std::size_t>(u)] <= b.t_max);
            // mask delimits the true length exactly
            for (int t = 0; t < b.t_max; ++t) {
                const bool inside = t < b.feat_len[static_cast<std::size_t>(u)];
                CHECK(b.feature_mask(u, t) == (inside ? 1.0f : 0.0f));
            }
            // padded targets carry PAD beyond the true length
            const auto& tr = b.transcripts[static_cast<std::size_t>(u)];
            for (int n = b.transcript_len[static_cast<std::size_t>(u)]; n < b.n_max; ++n) {
                CHECK(tr[static_cast<std::size_t>(n)] == ds.vocab.pad_id());
            }
        }
    }
    CHECK(total == ds.train.utterances.size());
    CHECK(seen.size() == ds.train.utterances.size());

    auto single = make_batches(ds.train.utterances, ds.vocab, 1000, 99);
    CHECK(single.size() == 1);
    CHECK(single[0].size() == 37);
}

TEST_CASE("feature matrix round-trips through the binary format") {
    MatrixF m(3, 4);
    for (Index r = 0; r < 3; ++r) {
        for (Index c = 0; c < 4; ++c) m(r, c) = static_cast<float>(r * 10 + c) * 0.5f;
    }
    std::string path = (std::filesystem::temp_directory_path() / "narslu_feat.bin").string();
    write_feature_matrix(path, m);
    MatrixF back = read_feature_matrix(path);
    std::remove(path.c_str());
    REQUIRE(back.rows() == 3);
    REQUIRE(back.cols() == 4);
    CHECK(std::memcmp(m.data(), back.data(), sizeof(float) * 12) == 0);
}
