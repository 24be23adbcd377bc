#pragma once

#include "narslu/common.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace narslu {

struct UnknownTokenError : Error {
    using Error::Error;
};

enum class TokenPolicy { word, bpe };

inline std::string token_policy_name(TokenPolicy p) {
    return p == TokenPolicy::word ? "word" : "bpe";
}

inline TokenPolicy token_policy_from(const std::string& s) {
    if (s == "word") return TokenPolicy::word;
    if (s == "bpe") return TokenPolicy::bpe;
    throw ConfigError("unknown tokenizer policy: " + s);
}

// Greedy pair-merge BPE. Words end with a terminal marker symbol so merges
// can capture word endings; ties between equally frequent pairs break
// lexicographically for determinism.
struct BpeModel {
    static constexpr const char* kEndMark = "</w>";
    std::vector<std::pair<std::string, std::string>> merges;

    std::vector<std::string> segment(const std::string& word) const {
        std::vector<std::string> pieces;
        for (char c : word) pieces.emplace_back(1, c);
        pieces.emplace_back(kEndMark);
        for (const auto& [a, b] : merges) {
            for (std::size_t i = 0; i + 1 < pieces.size();) {
                if (pieces[i] == a && pieces[i + 1] == b) {
                    pieces[i] = a + b;
                    pieces.erase(pieces.begin() + static_cast<std::ptrdiff_t>(i) + 1);
                } else {
                    ++i;
                }
            }
        }
        return pieces;
    }
};

inline BpeModel train_bpe(const std::vector<std::string>& corpus_words, int n_merges) {
    std::map<std::vector<std::string>, long> words;
    for (const std::string& w : corpus_words) {
        std::vector<std::string> pieces;
        for (char c : w) pieces.emplace_back(1, c);
        pieces.emplace_back(BpeModel::kEndMark);
        words[pieces] += 1;
    }
    BpeModel model;
    for (int m = 0; m < n_merges; ++m) {
        std::map<std::pair<std::string, std::string>, long> pair_counts;
        for (const auto& [pieces, freq] : words) {
            for (std::size_t i = 0; i + 1 < pieces.size(); ++i) {
                pair_counts[{pieces[i], pieces[i + 1]}] += freq;
            }
        }
        if (pair_counts.empty()) break;
        auto best = pair_counts.begin();
        for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
            if (it->second > best->second) best = it;  // map order breaks ties
        }
        if (best->second < 2) break;  // nothing left worth merging
        const auto [a, b] = best->first;
        model.merges.emplace_back(a, b);
        std::map<std::vector<std::string>, long> next;
        for (const auto& [pieces, freq] : words) {
            std::vector<std::string> merged;
            for (std::size_t i = 0; i < pieces.size(); ++i) {
                if (i + 1 < pieces.size() && pieces[i] == a && pieces[i + 1] == b) {
                    merged.push_back(a + b);
                    ++i;
                } else {
                    merged.push_back(pieces[i]);
                }
            }
            next[merged] += freq;
        }
        words = std::move(next);
    }
    return model;
}

// Partitioned id space over four contiguous blocks:
//   [asr units | intents | slot tags (B_*, I_*, O) | specials]
// The five specials are fixed-role symbols at the end of the space.
class JointVocabulary {
public:
    static constexpr const char* kBlank = "<blank>";
    static constexpr const char* kMask = "<mask>";
    static constexpr const char* kCls = "<cls>";
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kEos = "<eos>";

    JointVocabulary() = default;

    JointVocabulary(std::vector<std::string> asr_units, std::vector<std::string> intents,
                    std::vector<std::string> slot_types, TokenPolicy policy = TokenPolicy::word,
                    BpeModel bpe = {})
        : policy_(policy), bpe_(std::move(bpe)) {
        if (asr_units.empty() || intents.empty() || slot_types.empty()) {
            throw ConfigError("vocabulary: unit, intent and slot-type inventories must be non-empty");
        }
        sort_unique_or_throw(asr_units, "asr unit");
        sort_unique_or_throw(intents, "intent");
        sort_unique_or_throw(slot_types, "slot type");
        asr_units_ = asr_units;
        intents_ = intents;
        slot_types_ = slot_types;

        for (const std::string& u : asr_units) push(u);
        intent_begin_ = static_cast<int>(entries_.size());
        for (const std::string& i : intents) push(i);
        slot_begin_ = static_cast<int>(entries_.size());
        std::vector<std::string> tags;
        for (const std::string& t : slot_types) tags.push_back("B_" + t);
        for (const std::string& t : slot_types) tags.push_back("I_" + t);
        tags.emplace_back("O");
        std::sort(tags.begin(), tags.end());
        for (const std::string& t : tags) push(t);
        special_begin_ = static_cast<int>(entries_.size());
        for (const char* s : {kBlank, kMask, kCls, kPad, kEos}) push(s);
    }

    int size() const { return static_cast<int>(entries_.size()); }

    int asr_begin() const { return 0; }
    int asr_end() const { return intent_begin_; }
    int intent_begin() const { return intent_begin_; }
    int intent_end() const { return slot_begin_; }
    int slot_begin() const { return slot_begin_; }
    int slot_end() const { return special_begin_; }

    int blank_id() const { return special_begin_; }
    int mask_id() const { return special_begin_ + 1; }
    int cls_id() const { return special_begin_ + 2; }
    int pad_id() const { return special_begin_ + 3; }
    int eos_id() const { return special_begin_ + 4; }

    bool is_asr(int id) const { return id >= asr_begin() && id < asr_end(); }
    bool is_intent(int id) const { return id >= intent_begin() && id < intent_end(); }
    bool is_slot_tag(int id) const { return id >= slot_begin() && id < slot_end(); }

    int id_of(const std::string& s) const {
        auto it = index_.find(s);
        if (it == index_.end()) throw UnknownTokenError("vocabulary: unknown entry '" + s + "'");
        return it->second;
    }

    bool contains(const std::string& s) const { return index_.count(s) != 0; }

    const std::string& string_of(int id) const {
        if (id < 0 || id >= size()) {
            throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
        }
        return entries_[static_cast<std::size_t>(id)];
    }

    TokenPolicy policy() const { return policy_; }
    const BpeModel& bpe() const { return bpe_; }
    const std::vector<std::string>& asr_units() const { return asr_units_; }
    const std::vector<std::string>& intents() const { return intents_; }
    const std::vector<std::string>& slot_types() const { return slot_types_; }

    std::vector<std::string> pieces_of_word(const std::string& word) const {
        if (policy_ == TokenPolicy::word) return {word};
        return bpe_.segment(word);
    }

private:
    void push(const std::string& s) {
        auto [it, inserted] = index_.emplace(s, static_cast<int>(entries_.size()));
        if (!inserted) throw ConfigError("vocabulary: duplicate entry '" + s + "'");
        entries_.push_back(s);
    }

    static void sort_unique_or_throw(std::vector<std::string>& v, const std::string& what) {
        std::sort(v.begin(), v.end());
        auto dup = std::adjacent_find(v.begin(), v.end());
        if (dup != v.end()) throw ConfigError("vocabulary: duplicate " + what + " '" + *dup + "'");
    }

    std::vector<std::string> entries_;
    std::unordered_map<std::string, int> index_;
    std::vector<std::string> asr_units_, intents_, slot_types_;
    int intent_begin_ = 0, slot_begin_ = 0, special_begin_ = 0;
    TokenPolicy policy_ = TokenPolicy::word;
    BpeModel bpe_;
};

// Units harvested from a transcript corpus under the given policy, then a
// vocabulary over them. |V| always derives from the component counts.
inline JointVocabulary build_vocab(const std::vector<std::string>& corpus_transcripts,
                                   const std::vector<std::string>& intents,
                                   const std::vector<std::string>& slot_types,
                                   TokenPolicy policy, int bpe_merges = 64) {
    std::set<std::string> units;
    BpeModel bpe;
    if (policy == TokenPolicy::bpe) {
        std::vector<std::string> all_words;
        for (const std::string& line : corpus_transcripts) {
            std::istringstream is(line);
            std::string w;
            while (is >> w) all_words.push_back(w);
        }
        bpe = train_bpe(all_words, bpe_merges);
        for (const std::string& w : all_words) {
            for (const std::string& p : bpe.segment(w)) units.insert(p);
        }
    } else {
        for (const std::string& line : corpus_transcripts) {
            std::istringstream is(line);
            std::string w;
            while (is >> w) units.insert(w);
        }
    }
    return JointVocabulary(std::vector<std::string>(units.begin(), units.end()), intents,
                           slot_types, policy, std::move(bpe));
}

inline std::string normalize_text(const std::string& text) {
    std::string out;
    bool in_space = true;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_space && !out.empty()) out.push_back(' ');
            in_space = true;
        } else {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

// Deterministic segmentation of normalized text into asr-unit ids. Unknown
// words (or pieces) raise; the empty string tokenizes to nothing.
inline std::vector<int> tokenize(const std::string& text, const JointVocabulary& vocab) {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
        for (const std::string& piece : vocab.pieces_of_word(w)) {
            ids.push_back(vocab.id_of(piece));
        }
    }
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const JointVocabulary& vocab) {
    if (vocab.policy() == TokenPolicy::word) {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i > 0) out.push_back(' ');
            out += vocab.string_of(ids[i]);
        }
        return out;
    }
    std::string out;
    std::string word;
    for (int id : ids) {
        std::string piece = vocab.string_of(id);
        const std::string mark = BpeModel::kEndMark;
        bool ends = piece.size() >= mark.size() &&
                    piece.compare(piece.size() - mark.size(), mark.size(), mark) == 0;
        if (ends) piece.resize(piece.size() - mark.size());
        word += piece;
        if (ends) {
            if (!out.empty()) out.push_back(' ');
            out += word;
            word.clear();
        }
    }
    if (!word.empty()) {
        if (!out.empty()) out.push_back(' ');
        out += word;
    }
    return out;
}

}  // namespace narslu
