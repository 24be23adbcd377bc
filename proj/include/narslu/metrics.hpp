#pragma once

#include "narslu/common.hpp"
#include "narslu/vocab.hpp"

#include <json.hpp>

#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

namespace narslu {

// ---------------------------------------------------------------------------
// Word error rate: unit-cost Levenshtein alignment with an S/I/D breakdown.
// Convention for an empty reference: 100 * |hypothesis| percent (all
// insertions, zero-length denominator handled explicitly).
// ---------------------------------------------------------------------------

struct WerCounts {
    long substitutions = 0;
    long insertions = 0;
    long deletions = 0;
    long ref_len = 0;

    long edits() const { return substitutions + insertions + deletions; }

    double percent() const {
        if (ref_len == 0) return 100.0 * static_cast<double>(insertions);
        return 100.0 * static_cast<double>(edits()) / static_cast<double>(ref_len);
    }

    WerCounts& operator+=(const WerCounts& o) {
        substitutions += o.substitutions;
        insertions += o.insertions;
        deletions += o.deletions;
        ref_len += o.ref_len;
        return *this;
    }
};

template <typename T>
WerCounts wer_align(const std::vector<T>& ref, const std::vector<T>& hyp) {
    const std::size_t m = ref.size(), n = hyp.size();
    std::vector<std::vector<int>> dp(m + 1, std::vector<int>(n + 1, 0));
    for (std::size_t i = 0; i <= m; ++i) dp[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= n; ++j) dp[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            const int sub = dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            dp[i][j] = std::min({sub, dp[i - 1][j] + 1, dp[i][j - 1] + 1});
        }
    }
    WerCounts out;
    out.ref_len = static_cast<long>(m);
    // backtrace, preferring matches/substitutions, then deletions
    std::size_t i = m, j = n;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 &&
            dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] != hyp[j - 1]) ++out.substitutions;
            --i;
            --j;
        } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
            ++out.deletions;
            --i;
        } else {
            ++out.insertions;
            --j;
        }
    }
    return out;
}

inline WerCounts wer(const std::vector<int>& ref, const std::vector<int>& hyp) {
    return wer_align(ref, hyp);
}

inline int levenshtein_words(const std::string& a, const std::string& b) {
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::istringstream is(s);
        std::string w;
        while (is >> w) out.push_back(w);
        return out;
    };
    return static_cast<int>(wer_align(split(a), split(b)).edits());
}

inline int levenshtein_chars(const std::string& a, const std::string& b) {
    return static_cast<int>(
        wer_align(std::vector<char>(a.begin(), a.end()), std::vector<char>(b.begin(), b.end()))
            .edits());
}

// ---------------------------------------------------------------------------
// Intent-classification accuracy: exact-match fraction.
// ---------------------------------------------------------------------------

inline double ic_accuracy(const std::vector<std::pair<int, int>>& gold_pred) {
    if (gold_pred.empty()) throw ContractError("ic_accuracy: empty evaluation set");
    long correct = 0;
    for (const auto& [g, p] : gold_pred) correct += (g == p) ? 1 : 0;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(gold_pred.size());
}

// ---------------------------------------------------------------------------
// Entity extraction from BIO tags. Maximal B_/I_ spans of one type become one
// entity; an orphan I_ starts a new entity of its type (lenient repair).
// ---------------------------------------------------------------------------

using EntityList = std::vector<std::pair<std::string, std::string>>;  // (type, filler)

inline EntityList extract_entities(const std::vector<int>& tokens,
                                   const std::vector<int>& slot_tags,
                                   const JointVocabulary& vocab) {
    if (tokens.size() != slot_tags.size()) {
        throw ContractError("extract_entities: " + std::to_string(tokens.size()) +
                            " tokens vs " + std::to_string(slot_tags.size()) + " tags");
    }
    EntityList out;
    std::string open_type;
    std::vector<int> open_ids;
    auto close = [&]() {
        if (!open_type.empty()) {
            out.emplace_back(open_type, detokenize(open_ids, vocab));
            open_type.clear();
            open_ids.clear();
        }
    };
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string tag = vocab.string_of(slot_tags[i]);
        if (tag.rfind("B_", 0) == 0) {
            close();
            open_type = tag.substr(2);
            open_ids = {tokens[i]};
        } else if (tag.rfind("I_", 0) == 0) {
            const std::string type = tag.substr(2);
            if (type == open_type) {
                open_ids.push_back(tokens[i]);
            } else {
                close();  // orphan continuation starts a fresh entity
                open_type = type;
                open_ids = {tokens[i]};
            }
        } else {
            close();
        }
    }
    close();
    return out;
}

// ---------------------------------------------------------------------------
// SLU-F1 with edit-distance penalties. Within each utterance and slot type,
// predictions match gold entities one-to-one greedily by minimal character
// edit distance. A matched pair with word-distance fraction d_w contributes
// TP += 1-d_w, FP += d_w, FN += d_w at the word level (characters analogous,
// fractions clipped to [0, 1]); unmatched predictions are full false
// positives, unmatched gold entities full false negatives. word-f1 and
// char-f1 pool their own counts; the headline slu-f1 pools both.
// ---------------------------------------------------------------------------

struct SluF1Counts {
    double tp_w = 0, fp_w = 0, fn_w = 0;
    double tp_c = 0, fp_c = 0, fn_c = 0;

    SluF1Counts& operator+=(const SluF1Counts& o) {
        tp_w += o.tp_w;
        fp_w += o.fp_w;
        fn_w += o.fn_w;
        tp_c += o.tp_c;
        fp_c += o.fp_c;
        fn_c += o.fn_c;
        return *this;
    }
};

namespace detail {

inline double f1_from(double tp, double fp, double fn) {
    // nothing gold and nothing predicted: no misses, no hallucinations
    if (tp == 0.0 && fp == 0.0 && fn == 0.0) return 100.0;
    const double prec = (tp + fp) > 0 ? tp / (tp + fp) : 0.0;
    const double rec = (tp + fn) > 0 ? tp / (tp + fn) : 0.0;
    if (prec + rec == 0.0) return 0.0;
    return 100.0 * 2.0 * prec * rec / (prec + rec);
}

inline int word_count(const std::string& s) {
    std::istringstream is(s);
    std::string w;
    int n = 0;
    while (is >> w) ++n;
    return n;
}

}  // namespace detail

struct SluF1Result {
    double slu_f1 = 0, word_f1 = 0, char_f1 = 0;
    SluF1Counts counts;
};

inline SluF1Counts slu_f1_counts(const EntityList& gold, const EntityList& pred) {
    SluF1Counts c;
    std::vector<bool> gold_used(gold.size(), false), pred_used(pred.size(), false);
    // candidate pairs of equal type, cheapest character distance first
    struct Pair {
        int dist;
        std::size_t p, g;
    };
    std::vector<Pair> pairs;
    for (std::size_t p = 0; p < pred.size(); ++p) {
        for (std::size_t g = 0; g < gold.size(); ++g) {
            if (pred[p].first != gold[g].first) continue;
            pairs.push_back({levenshtein_chars(pred[p].second, gold[g].second), p, g});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.p != b.p) return a.p < b.p;
        return a.g < b.g;
    });
    for (const Pair& pr : pairs) {
        if (pred_used[pr.p] || gold_used[pr.g]) continue;
        pred_used[pr.p] = true;
        gold_used[pr.g] = true;
        const std::string& ps = pred[pr.p].second;
        const std::string& gs = gold[pr.g].second;
        const double wmax = std::max(detail::word_count(ps), detail::word_count(gs));
        const double cmax = std::max(ps.size(), gs.size());
        double d_w = wmax > 0 ? levenshtein_words(ps, gs) / wmax : 0.0;
        double d_c = cmax > 0 ? levenshtein_chars(ps, gs) / cmax : 0.0;
        d_w = std::clamp(d_w, 0.0, 1.0);
        d_c = std::clamp(d_c, 0.0, 1.0);
        c.tp_w += 1.0 - d_w;
        c.fp_w += d_w;
        c.fn_w += d_w;
        c.tp_c += 1.0 - d_c;
        c.fp_c += d_c;
        c.fn_c += d_c;
    }
    for (std::size_t p = 0; p < pred.size(); ++p) {
        if (!pred_used[p]) {
            c.fp_w += 1.0;
            c.fp_c += 1.0;
        }
    }
    for (std::size_t g = 0; g < gold.size(); ++g) {
        if (!gold_used[g]) {
            c.fn_w += 1.0;
            c.fn_c += 1.0;
        }
    }
    return c;
}

inline SluF1Result slu_f1(const std::vector<EntityList>& gold,
                          const std::vector<EntityList>& pred) {
    if (gold.size() != pred.size()) {
        throw ContractError("slu_f1: gold and predicted utterance counts differ");
    }
    SluF1Result r;
    for (std::size_t u = 0; u < gold.size(); ++u) {
        r.counts += slu_f1_counts(gold[u], pred[u]);
    }
    r.word_f1 = detail::f1_from(r.counts.tp_w, r.counts.fp_w, r.counts.fn_w);
    r.char_f1 = detail::f1_from(r.counts.tp_c, r.counts.fp_c, r.counts.fn_c);
    r.slu_f1 = detail::f1_from(r.counts.tp_w + r.counts.tp_c, r.counts.fp_w + r.counts.fp_c,
                               r.counts.fn_w + r.counts.fn_c);
    return r;
}

// ---------------------------------------------------------------------------
// Real-time factor. Synthetic audio duration is frames * 10 ms.
// ---------------------------------------------------------------------------

inline double rtf(double decode_seconds, double audio_seconds) {
    if (audio_seconds <= 0.0) throw ContractError("rtf: audio duration must be positive");
    return decode_seconds / audio_seconds;
}

inline double frames_to_seconds(long frames) { return static_cast<double>(frames) * 0.01; }

// ---------------------------------------------------------------------------
// EvalReport: the aggregate a decode evaluation produces.
// ---------------------------------------------------------------------------

struct EvalReport {
    double wer_percent = 0;
    double ic_acc = 0;
    double slu_f1 = 0, word_f1 = 0, char_f1 = 0;
    double rtf_value = 0;
    double avg_iterations = 0;
    long utterances = 0;
    WerCounts wer_counts;
    SluF1Counts f1_counts;

    nlohmann::json to_json() const {
        return nlohmann::json{
            {"utterances", utterances},
            {"wer", wer_percent},
            {"ic_acc", ic_acc},
            {"slu_f1", slu_f1},
            {"word_f1", word_f1},
            {"char_f1", char_f1},
            {"rtf", rtf_value},
            {"avg_iterations", avg_iterations},
            {"counts",
             {{"substitutions", wer_counts.substitutions},
              {"insertions", wer_counts.insertions},
              {"deletions", wer_counts.deletions},
              {"ref_len", wer_counts.ref_len},
              {"tp_w", f1_counts.tp_w},
              {"fp_w", f1_counts.fp_w},
              {"fn_w", f1_counts.fn_w},
              {"tp_c", f1_counts.tp_c},
              {"fp_c", f1_counts.fp_c},
              {"fn_c", f1_counts.fn_c}}}};
    }

    std::string table() const {
        std::ostringstream os;
        os << "| Metric     | Value |\n";
        os << "|------------|-------|\n";
        char buf[64];
        auto row = [&](const char* name, double v) {
            std::snprintf(buf, sizeof(buf), "| %-10s | %5.2f |\n", name, v);
            os << buf;
        };
        row("WER %", wer_percent);
        row("IC Acc %", ic_acc);
        row("SLU-F1 %", slu_f1);
        row("word-F1 %", word_f1);
        row("char-F1 %", char_f1);
        std::snprintf(buf, sizeof(buf), "| %-10s | %5.3f |\n", "RTF", rtf_value);
        os << buf;
        std::snprintf(buf, sizeof(buf), "| %-10s | %5.2f |\n", "avg iters", avg_iterations);
        os << buf;
        return os.str();
    }
};

}  // namespace narslu
