#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "narslu/metrics.hpp"

#include <algorithm>

using namespace narslu;

TEST_CASE("wer: identical sequences score zero") {
    WerCounts c = wer({1, 2, 3}, {1, 2, 3});
    CHECK(c.percent() == 0.0);
    CHECK(c.edits() == 0);
}

TEST_CASE("wer: worked alignment with one substitution and one insertion") {
    // ref "a b c", hyp "a x c d"
    WerCounts c = wer({1, 2, 3}, {1, 9, 3, 4});
    CHECK(c.substitutions == 1);
    CHECK(c.insertions == 1);
    CHECK(c.deletions == 0);
    CHECK(c.percent() == doctest::Approx(200.0 / 3.0).epsilon(1e-9));
}

TEST_CASE("wer: empty hypothesis is all deletions") {
    WerCounts c = wer({1, 2, 3}, {});
    CHECK(c.deletions == 3);
    CHECK(c.percent() == doctest::Approx(100.0));
}

TEST_CASE("wer: empty reference follows the documented convention") {
    WerCounts c = wer({}, {1, 2});
    CHECK(c.insertions == 2);
    CHECK(c.percent() == doctest::Approx(200.0));
    WerCounts both = wer({}, {});
    CHECK(both.percent() == 0.0);
}

TEST_CASE("wer: invariant under relabeling both sequences") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int n_ids = 6;
        std::vector<int> perm(n_ids);
        for (int i = 0; i < n_ids; ++i) perm[static_cast<std::size_t>(i)] = i;
        rng.shuffle(perm);
        auto draw_seq = [&] {
            std::vector<int> s(rng.below(7));
            for (auto& x : s) x = static_cast<int>(rng.below(n_ids));
            return s;
        };
        std::vector<int> ref = draw_seq(), hyp = draw_seq();
        auto map_seq = [&](std::vector<int> s) {
            for (auto& x : s) x = perm[static_cast<std::size_t>(x)];
            return s;
        };
        WerCounts a = wer(ref, hyp);
        WerCounts b = wer(map_seq(ref), map_seq(hyp));
        CHECK(a.percent() == b.percent());
        CHECK(a.edits() == b.edits());
    }
}

TEST_CASE("ic_accuracy: exact-match fractions") {
    CHECK(ic_accuracy({{1, 1}, {2, 2}}) == 100.0);
    CHECK(ic_accuracy({{1, 2}, {2, 1}}) == 0.0);
    CHECK(ic_accuracy({{1, 1}, {2, 2}, {3, 3}, {4, 9}}) == 75.0);
    CHECK_THROWS_AS(ic_accuracy({}), ContractError);
}

namespace {

JointVocabulary table1_vocab() {
    return build_vocab({"set lunch every day at twelve thirty thirteen"},
                       {"calendar_set"}, {"meal_type", "general_frequency", "time"},
                       TokenPolicy::word);
}

}  // namespace

TEST_CASE("extract_entities: worked table example") {
    JointVocabulary v = table1_vocab();
    std::vector<int> tokens = tokenize("set lunch every day at twelve thirty", v);
    std::vector<int> tags{v.id_of("O"),
                          v.id_of("B_meal_type"),
                          v.id_of("B_general_frequency"),
                          v.id_of("I_general_frequency"),
                          v.id_of("O"),
                          v.id_of("B_time"),
                          v.id_of("I_time")};
    EntityList ents = extract_entities(tokens, tags, v);
    REQUIRE(ents.size() == 3);
    CHECK(ents[0] == std::pair<std::string, std::string>("meal_type", "lunch"));
    CHECK(ents[1] == std::pair<std::string, std::string>("general_frequency", "every day"));
    CHECK(ents[2] == std::pair<std::string, std::string>("time", "twelve thirty"));
}

TEST_CASE("extract_entities: all-O yields nothing; orphan I_ repairs leniently") {
    JointVocabulary v = table1_vocab();
    std::vector<int> tokens = tokenize("at thirty", v);
    std::vector<int> all_o{v.id_of("O"), v.id_of("O")};
    CHECK(extract_entities(tokens, all_o, v).empty());

    std::vector<int> orphan{v.id_of("O"), v.id_of("I_time")};
    EntityList ents = extract_entities(tokens, orphan, v);
    REQUIRE(ents.size() == 1);
    CHECK(ents[0] == std::pair<std::string, std::string>("time", "thirty"));
}

TEST_CASE("extract_entities inverts BIO tag generation on well-formed inputs") {
    // random well-formed BIO sequences: non-adjacent typed spans over tokens
    JointVocabulary v = build_vocab({"w0 w1 w2 w3 w4 w5 w6 w7"}, {"i"}, {"t0", "t1"},
                                    TokenPolicy::word);
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const int len = 2 + static_cast<int>(rng.below(7));
        std::vector<int> tokens(static_cast<std::size_t>(len));
        for (auto& t : tokens) t = static_cast<int>(rng.below(8));
        std::vector<int> tags(static_cast<std::size_t>(len), v.id_of("O"));
        EntityList expected;
        int pos = 0;
        while (pos < len) {
            if (rng.below(2) == 0) {
                const int type = static_cast<int>(rng.below(2));
                const int span = 1 + static_cast<int>(rng.below(2));
                const int end = std::min(len, pos + span);
                std::vector<int> span_ids;
                for (int k = pos; k < end; ++k) {
                    tags[static_cast<std::size_t>(k)] =
                        v.id_of((k == pos ? "B_t" : "I_t") + std::to_string(type));
                    span_ids.push_back(tokens[static_cast<std::size_t>(k)]);
                }
                expected.emplace_back("t" + std::to_string(type), detokenize(span_ids, v));
                pos = end + 1;  // gap keeps spans separated
            } else {
                ++pos;
            }
        }
        CHECK(extract_entities(tokens, tags, v) == expected);
    }
}

TEST_CASE("slu_f1: perfect predictions score 100 everywhere") {
    std::vector<EntityList> gold{{{"time", "twelve thirty"}, {"meal_type", "lunch"}},
                                 {{"place", "home"}}};
    SluF1Result r = slu_f1(gold, gold);
    CHECK(r.slu_f1 == doctest::Approx(100.0));
    CHECK(r.word_f1 == doctest::Approx(100.0));
    CHECK(r.char_f1 == doctest::Approx(100.0));
}

TEST_CASE("slu_f1: no predictions against G gold entities scores zero") {
    std::vector<EntityList> gold{{{"time", "noon"}, {"place", "home"}}};
    std::vector<EntityList> pred{{}};
    SluF1Result r = slu_f1(gold, pred);
    CHECK(r.slu_f1 == 0.0);
    CHECK(r.counts.fn_w == doctest::Approx(2.0));
    CHECK(r.counts.fp_w == 0.0);
}

TEST_CASE("slu_f1: hand-traced partial match") {
    // gold (time, "twelve thirty") vs predicted (time, "twelve thirteen")
    // word distance 1 over max(2,2) -> d_w = 0.5: TP 0.5, FP 0.5, FN 0.5 -> word-f1 50
    // char distance 3 over max(13,15) -> d_c = 0.2: TP 0.8, FP 0.2, FN 0.2 -> char-f1 80
    // pooled: TP 1.3, FP 0.7, FN 0.7 -> slu-f1 65
    std::vector<EntityList> gold{{{"time", "twelve thirty"}}};
    std::vector<EntityList> pred{{{"time", "twelve thirteen"}}};
    CHECK(levenshtein_words("twelve thirty", "twelve thirteen") == 1);
    CHECK(levenshtein_chars("twelve thirty", "twelve thirteen") == 3);
    SluF1Result r = slu_f1(gold, pred);
    CHECK(r.word_f1 == doctest::Approx(50.0).epsilon(1e-9));
    CHECK(r.char_f1 == doctest::Approx(80.0).epsilon(1e-9));
    CHECK(r.slu_f1 == doctest::Approx(65.0).epsilon(1e-9));
}

TEST_CASE("slu_f1: type mismatch never matches") {
    std::vector<EntityList> gold{{{"time", "noon"}}};
    std::vector<EntityList> pred{{{"place", "noon"}}};
    SluF1Result r = slu_f1(gold, pred);
    CHECK(r.counts.fp_w == doctest::Approx(1.0));
    CHECK(r.counts.fn_w == doctest::Approx(1.0));
    CHECK(r.slu_f1 == 0.0);
}

TEST_CASE("slu_f1: bounded, 100 exactly on multiset equality, monotone") {
    Rng rng(23);
    const char* types[] = {"a", "b"};
    const char* fillers[] = {"x", "y z", "w", "pq r"};
    auto random_list = [&](int max_n) {
        EntityList l;
        const int n = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_n) + 1));
        for (int i = 0; i < n; ++i) {
            l.emplace_back(types[rng.below(2)], fillers[rng.below(4)]);
        }
        return l;
    };
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<EntityList> gold{random_list(3)};
        std::vector<EntityList> pred{random_list(3)};
        SluF1Result r = slu_f1(gold, pred);
        CHECK(r.slu_f1 >= 0.0);
        CHECK(r.slu_f1 <= 100.0);
        auto sorted = [](EntityList l) {
            std::sort(l.begin(), l.end());
            return l;
        };
        const bool equal_multisets = sorted(gold[0]) == sorted(pred[0]);
        CHECK((r.slu_f1 == 100.0) == equal_multisets);

        // adding one exactly-correct entity to both sides never lowers the score
        std::vector<EntityList> gold2 = gold, pred2 = pred;
        gold2[0].emplace_back("a", "bonus");
        pred2[0].emplace_back("a", "bonus");
        CHECK(slu_f1(gold2, pred2).slu_f1 >= r.slu_f1 - 1e-9);
    }
}

TEST_CASE("rtf: plain ratio semantics") {
    CHECK(rtf(5.0, 50.0) == doctest::Approx(0.1));
    CHECK(rtf(10.0, 50.0) == doctest::Approx(0.2));  // doubling compute doubles rtf
    CHECK_THROWS_AS(rtf(1.0, 0.0), ContractError);
    CHECK(frames_to_seconds(500) == doctest::Approx(5.0));
}

TEST_CASE("eval report serializes and tabulates") {
    EvalReport r;
    r.wer_percent = 12.5;
    r.ic_acc = 90.0;
    r.slu_f1 = 80.0;
    r.rtf_value = 0.05;
    r.avg_iterations = 2.5;
    r.utterances = 10;
    auto j = r.to_json();
    CHECK(j["wer"] == 12.5);
    CHECK(j["counts"].contains("substitutions"));
    const std::string table = r.table();
    CHECK(table.find("WER") != std::string::npos);
    CHECK(table.find("RTF") != std::string::npos);
}
