#pragma once

#include "narslu/checkpoint.hpp"  // little-endian field helpers
#include "narslu/common.hpp"
#include "narslu/vocab.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace narslu {

struct Utterance {
    std::string id;
    MatrixF features;             // [T_raw x F], may be empty until attached
    std::vector<int> transcript;  // asr-unit ids, length N
    int intent = -1;
    std::vector<int> slot_tags;   // tag ids, length N
};

// ---------------------------------------------------------------------------
// Binary feature-matrix format ("NARF"): magic, format version, rows, cols
// (u32 little-endian), then row-major little-endian float32 payload.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

inline void write_feature_matrix(const std::string& path, const MatrixF& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("features: cannot open " + path + " for writing");
    os.write("NARF", 4);
    detail::put_u32(os, kFeatureFormatVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) detail::put_f32(os, m(r, c));
    }
    if (!os) throw IoError("features: write failed for " + path);
}

inline MatrixF read_feature_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("features: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "NARF") throw IoError("features: bad magic in " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != kFeatureFormatVersion) {
        throw IoError("features: unsupported version " + std::to_string(version));
    }
    const std::uint32_t rows = detail::get_u32(is);
    const std::uint32_t cols = detail::get_u32(is);
    MatrixF m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
        for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = detail::get_f32(is);
    }
    if (!is) throw IoError("features: truncated payload in " + path);
    return m;
}

// ---------------------------------------------------------------------------
// Annotation ingestion (JSON-lines: id, transcript, intent, entities).
// ---------------------------------------------------------------------------

struct AnnotationRecord {
    std::string id;
    std::string transcript;
    std::string intent;
    std::vector<std::pair<std::string, std::string>> entities;  // (type, filler)
};

inline AnnotationRecord parse_annotation_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("annotations: malformed json line: ") + e.what());
    }
    AnnotationRecord rec;
    try {
        rec.id = j.at("id").get<std::string>();
        rec.transcript = j.at("transcript").get<std::string>();
        rec.intent = j.at("intent").get<std::string>();
        for (const auto& e : j.value("entities", nlohmann::json::array())) {
            rec.entities.emplace_back(e.at("type").get<std::string>(),
                                      e.at("filler").get<std::string>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("annotations: missing field: ") + e.what());
    }
    return rec;
}

inline std::string annotation_to_json(const AnnotationRecord& rec) {
    nlohmann::json ents = nlohmann::json::array();
    for (const auto& [type, filler] : rec.entities) {
        ents.push_back({{"type", type}, {"filler", filler}});
    }
    nlohmann::json j{{"id", rec.id},
                     {"transcript", rec.transcript},
                     {"intent", rec.intent},
                     {"entities", ents}};
    return j.dump();
}

struct LoadResult {
    std::vector<Utterance> utterances;
    std::vector<std::string> rejected;  // one diagnostic per dropped record
};

// BIO tags from entity spans: the first piece of a filler span gets B_type,
// every continuation piece I_type, everything else O. A filler must appear as
// a contiguous unclaimed token span; overlaps and unlocatable fillers reject
// the record, unknown intent / slot names are corpus-level errors.
inline std::optional<Utterance> annotation_to_utterance(const AnnotationRecord& rec,
                                                        const JointVocabulary& vocab,
                                                        std::string* diagnostic) {
    Utterance utt;
    utt.id = rec.id;
    try {
        utt.transcript = tokenize(normalize_text(rec.transcript), vocab);
    } catch (const UnknownTokenError& e) {
        *diagnostic = rec.id + ": transcript has out-of-vocabulary words (" + e.what() + ")";
        return std::nullopt;
    }
    utt.intent = vocab.id_of(rec.intent);  // unknown intent name is a corpus error
    if (!vocab.is_intent(utt.intent)) {
        throw ConfigError("annotations: '" + rec.intent + "' is not an intent");
    }
    const int o_tag = vocab.id_of("O");
    utt.slot_tags.assign(utt.transcript.size(), o_tag);
    std::vector<bool> claimed(utt.transcript.size(), false);

    for (const auto& [type, filler] : rec.entities) {
        const int b_tag = vocab.id_of("B_" + type);  // unknown slot name is a corpus error
        const int i_tag = vocab.id_of("I_" + type);
        std::vector<int> span;
        try {
            span = tokenize(normalize_text(filler), vocab);
        } catch (const UnknownTokenError&) {
            *diagnostic = rec.id + ": filler '" + filler + "' of type " + type +
                          " not found as a contiguous token span";
            return std::nullopt;
        }
        if (span.empty()) {
            *diagnostic = rec.id + ": entity of type " + type + " has an empty filler";
            return std::nullopt;
        }
        // first unclaimed contiguous occurrence
        int found = -1;
        for (std::size_t start = 0; start + span.size() <= utt.transcript.size(); ++start) {
            bool match = true;
            for (std::size_t k = 0; k < span.size(); ++k) {
                if (utt.transcript[start + k] != span[k] || claimed[start + k]) {
                    match = false;
                    break;
                }
            }
            if (match) {
                found = static_cast<int>(start);
                break;
            }
        }
        if (found < 0) {
            bool anywhere = false;
            for (std::size_t start = 0; start + span.size() <= utt.transcript.size(); ++start) {
                bool match = true;
                for (std::size_t k = 0; k < span.size(); ++k) {
                    if (utt.transcript[start + k] != span[k]) match = false;
                }
                anywhere = anywhere || match;
            }
            *diagnostic = rec.id + ": filler '" + filler + "' of type " + type +
                          (anywhere ? " overlaps another entity span"
                                    : " not found as a contiguous token span");
            return std::nullopt;
        }
        for (std::size_t k = 0; k < span.size(); ++k) {
            claimed[static_cast<std::size_t>(found) + k] = true;
            utt.slot_tags[static_cast<std::size_t>(found) + k] = (k == 0) ? b_tag : i_tag;
        }
    }
    return utt;
}

inline LoadResult load_slurp_jsonl(const std::string& path, const JointVocabulary& vocab) {
    std::ifstream is(path);
    if (!is) throw IoError("annotations: cannot open " + path);
    LoadResult out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        AnnotationRecord rec = parse_annotation_line(line);
        std::string diagnostic;
        auto utt = annotation_to_utterance(rec, vocab, &diagnostic);
        if (utt) {
            out.utterances.push_back(std::move(*utt));
        } else {
            out.rejected.push_back(diagnostic);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CMLM mask sampling: the number of masked positions is uniform on 1..N and
// the positions are drawn without replacement. The decoder input is the
// CLS-prefixed transcript with masked tokens replaced.
// ---------------------------------------------------------------------------

struct MaskedTarget {
    std::vector<int> decoder_input;     // length N+1, starts with CLS
    std::vector<int> masked_positions;  // ascending transcript indices
};

inline MaskedTarget mask_targets(const std::vector<int>& transcript,
                                 const JointVocabulary& vocab, Rng& rng) {
    const int n = static_cast<int>(transcript.size());
    if (n < 1) throw ContractError("mask_targets: transcript must be non-empty");
    const int m = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    MaskedTarget out;
    out.masked_positions.assign(order.begin(), order.begin() + m);
    std::sort(out.masked_positions.begin(), out.masked_positions.end());
    out.decoder_input.reserve(static_cast<std::size_t>(n) + 1);
    out.decoder_input.push_back(vocab.cls_id());
    out.decoder_input.insert(out.decoder_input.end(), transcript.begin(), transcript.end());
    for (int p : out.masked_positions) {
        out.decoder_input[static_cast<std::size_t>(p) + 1] = vocab.mask_id();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic task. A template grammar over a closed word inventory: one
// intent-bearing keyword (anywhere in the utterance) fixes the intent, slot
// spans are drawn from per-type value words, everything else is filler.
// Filler words form a deterministic bigram chain (each filler admits exactly
// two successors), so masked fillers are recoverable from sentence context.
// Features repeat a per-word characteristic vector for a random number of
// frames plus seeded Gaussian noise. Adjacent tokens never repeat, which
// keeps every transcript CTC-emittable at the minimum frame budget.
// ---------------------------------------------------------------------------

struct SynthConfig {
    int n_intents = 5;
    int n_slot_types = 4;
    int slot_value_words = 3;  // value words per slot type
    int total_words = 30;      // keywords + value words + fillers
    int min_len = 4, max_len = 8;
    int min_frames = 8, max_frames = 11;  // raw frames per token
    int feature_dim = 16;
    double noise = 0.1;
    int n_train = 2000, n_dev = 200, n_test = 200;

    int filler_words() const {
        return total_words - n_intents - n_slot_types * slot_value_words;
    }

    void validate() const {
        if (n_intents < 1) throw ConfigError("synth: need at least one intent");
        if (n_slot_types < 1) throw ConfigError("synth: need at least one slot type");
        if (slot_value_words < 2) throw ConfigError("synth: need >= 2 value words per type");
        if (filler_words() < 2) {
            throw ConfigError("synth: total_words leaves fewer than two filler words");
        }
        if (min_len < 1 || max_len < min_len) throw ConfigError("synth: bad utterance length range");
        if (min_frames < 4 || max_frames < min_frames) {
            throw ConfigError("synth: frames-per-token range must start at >= 4");
        }
        if (feature_dim < 1) throw ConfigError("synth: feature_dim must be positive");
        if (noise < 0) throw ConfigError("synth: noise must be non-negative");
        if (n_train < 1 || n_dev < 1 || n_test < 1) {
            throw ConfigError("synth: split sizes must be positive");
        }
    }
};

struct SynthSplit {
    std::vector<Utterance> utterances;
    // frames per token, kept for oracle tests that need frame/token alignment
    std::vector<std::vector<int>> token_frames;
};

struct SynthDataset {
    JointVocabulary vocab;
    SynthSplit train, dev, test;
};

namespace detail {

inline std::string synth_keyword(int i) { return "act" + std::to_string(i); }
inline std::string synth_intent(int i) { return "intent" + std::to_string(i); }
inline std::string synth_slot_type(int s) { return "type" + std::to_string(s); }
inline std::string synth_value_word(int s, int j) {
    return "val" + std::to_string(s) + "_" + std::to_string(j);
}
inline std::string synth_filler(int f) { return "fill" + std::to_string(f); }

// Bigram chain over filler indices: from filler i the next filler is one of
// two fixed successors. Offsets 1 and 1+(F-1)/2 are never zero mod F, so the
// chain cannot repeat a word immediately.
inline int synth_filler_successor(int i, int n_fillers, int branch) {
    const int o1 = 1;
    const int o2 = 1 + (n_fillers - 1) / 2;
    return (i + (branch == 0 ? o1 : o2)) % n_fillers;
}

}  // namespace detail

inline SynthDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);

    std::vector<std::string> words;
    for (int i = 0; i < cfg.n_intents; ++i) words.push_back(detail::synth_keyword(i));
    for (int s = 0; s < cfg.n_slot_types; ++s) {
        for (int j = 0; j < cfg.slot_value_words; ++j) {
            words.push_back(detail::synth_value_word(s, j));
        }
    }
    for (int f = 0; f < cfg.filler_words(); ++f) words.push_back(detail::synth_filler(f));
    std::vector<std::string> intents, slot_types;
    for (int i = 0; i < cfg.n_intents; ++i) intents.push_back(detail::synth_intent(i));
    for (int s = 0; s < cfg.n_slot_types; ++s) slot_types.push_back(detail::synth_slot_type(s));

    SynthDataset ds;
    ds.vocab = JointVocabulary(words, intents, slot_types, TokenPolicy::word);

    // per-word characteristic vectors, in vocabulary order for determinism
    std::vector<MatrixF> codes(static_cast<std::size_t>(ds.vocab.asr_end()));
    for (int id = 0; id < ds.vocab.asr_end(); ++id) {
        MatrixF c(1, cfg.feature_dim);
        for (int d = 0; d < cfg.feature_dim; ++d) {
            c(0, d) = static_cast<float>(rng.gaussian());
        }
        codes[static_cast<std::size_t>(id)] = std::move(c);
    }

    const int o_tag = ds.vocab.id_of("O");

    auto gen_tokens = [&](int intent_idx, std::vector<int>* tags) {
        const int len = rng.range_int(cfg.min_len, cfg.max_len);
        std::vector<std::string> tokens(static_cast<std::size_t>(len));
        std::vector<int> tag_ids(static_cast<std::size_t>(len), o_tag);
        std::vector<bool> used(static_cast<std::size_t>(len), false);
        const int kpos = static_cast<int>(rng.below(static_cast<std::uint64_t>(len)));
        tokens[static_cast<std::size_t>(kpos)] = detail::synth_keyword(intent_idx);
        used[static_cast<std::size_t>(kpos)] = true;

        const int n_spans = static_cast<int>(rng.below(3));  // 0..2 entity spans
        for (int k = 0; k < n_spans; ++k) {
            const int type = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_slot_types)));
            const int span_len = 1 + static_cast<int>(rng.below(2));
            for (int attempt = 0; attempt < 8; ++attempt) {
                if (span_len > len) break;
                const int start =
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(len - span_len + 1)));
                bool free = true;
                for (int p = start; p < start + span_len; ++p) {
                    free = free && !used[static_cast<std::size_t>(p)];
                }
                if (!free) continue;
                // continuation words follow the first deterministically, so a
                // masked span word is always recoverable from its neighbor
                int prev_word = -1;
                for (int p = start; p < start + span_len; ++p) {
                    const int j =
                        (prev_word < 0)
                            ? static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.slot_value_words)))
                            : (prev_word + 1) % cfg.slot_value_words;
                    tokens[static_cast<std::size_t>(p)] = detail::synth_value_word(type, j);
                    tag_ids[static_cast<std::size_t>(p)] = ds.vocab.id_of(
                        (p == start ? "B_" : "I_") + detail::synth_slot_type(type));
                    used[static_cast<std::size_t>(p)] = true;
                    prev_word = j;
                }
                break;
            }
        }
        int chain = -1;  // last filler index; the chain spans interruptions
        for (int p = 0; p < len; ++p) {
            if (used[static_cast<std::size_t>(p)]) continue;
            chain = (chain < 0)
                        ? static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.filler_words())))
                        : detail::synth_filler_successor(chain, cfg.filler_words(),
                                                         static_cast<int>(rng.below(2)));
            tokens[static_cast<std::size_t>(p)] = detail::synth_filler(chain);
        }
        *tags = tag_ids;
        return tokens;
    };

    auto gen_split = [&](const std::string& prefix, int count) {
        SynthSplit split;
        for (int n = 0; n < count; ++n) {
            Utterance utt;
            std::vector<std::string> tokens;
            std::vector<int> tags;
            const int intent_idx = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_intents)));
            // resample until no adjacent duplicate words (keeps CTC feasible)
            for (int attempt = 0;; ++attempt) {
                tokens = gen_tokens(intent_idx, &tags);
                bool ok = true;
                for (std::size_t i = 1; i < tokens.size(); ++i) {
                    ok = ok && tokens[i] != tokens[i - 1];
                }
                if (ok) break;
                if (attempt > 200) throw ConfigError("synth: cannot avoid adjacent duplicates");
            }
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%04d", n);
            utt.id = prefix + "-" + buf;
            utt.intent = ds.vocab.id_of(detail::synth_intent(intent_idx));
            utt.slot_tags = tags;
            std::vector<int> frames_per_token;
            int total_frames = 0;
            for (const std::string& w : tokens) {
                utt.transcript.push_back(ds.vocab.id_of(w));
                const int fr = rng.range_int(cfg.min_frames, cfg.max_frames);
                frames_per_token.push_back(fr);
                total_frames += fr;
            }
            utt.features.resize(total_frames, cfg.feature_dim);
            int row = 0;
            for (std::size_t i = 0; i < utt.transcript.size(); ++i) {
                const MatrixF& code = codes[static_cast<std::size_t>(utt.transcript[i])];
                for (int f = 0; f < frames_per_token[i]; ++f) {
                    for (int d = 0; d < cfg.feature_dim; ++d) {
                        utt.features(row, d) =
                            code(0, d) + static_cast<float>(cfg.noise * rng.gaussian());
                    }
                    ++row;
                }
            }
            split.token_frames.push_back(std::move(frames_per_token));
            split.utterances.push_back(std::move(utt));
        }
        return split;
    };

    ds.train = gen_split("train", cfg.n_train);
    ds.dev = gen_split("dev", cfg.n_dev);
    ds.test = gen_split("test", cfg.n_test);
    return ds;
}

// Word characteristic vectors recomputed for oracle tests (same stream
// position as in synth_generate: codes are drawn before any utterance).
inline std::vector<MatrixF> synth_word_codes(const SynthConfig& cfg, std::uint64_t seed,
                                             const JointVocabulary& vocab) {
    Rng rng(seed);
    std::vector<MatrixF> codes(static_cast<std::size_t>(vocab.asr_end()));
    for (int id = 0; id < vocab.asr_end(); ++id) {
        MatrixF c(1, cfg.feature_dim);
        for (int d = 0; d < cfg.feature_dim; ++d) c(0, d) = static_cast<float>(rng.gaussian());
        codes[static_cast<std::size_t>(id)] = std::move(c);
    }
    return codes;
}

// ---------------------------------------------------------------------------
// Batching: seeded shuffle, stable length bucketing, zero-padded features and
// PAD-filled targets with explicit lengths and masks.
// ---------------------------------------------------------------------------

struct Batch {
    MatrixF features;  // [B * t_max x F], one t_max-row block per utterance
    int t_max = 0;
    std::vector<int> feat_len;
    std::vector<std::vector<int>> transcripts;  // padded to n_max with PAD
    std::vector<int> transcript_len;
    std::vector<std::vector<int>> slot_tags;  // padded to n_max with PAD
    std::vector<int> intents;
    int n_max = 0;
    MatrixF feature_mask;  // [B x t_max], 1 for real frames
    std::vector<std::string> ids;

    int size() const { return static_cast<int>(feat_len.size()); }

    MatrixF features_of(int u) const {
        return features.block(static_cast<Index>(u) * t_max, 0, feat_len[static_cast<std::size_t>(u)],
                              features.cols());
    }

    std::vector<int> transcript_of(int u) const {
        const auto& padded = transcripts[static_cast<std::size_t>(u)];
        return {padded.begin(), padded.begin() + transcript_len[static_cast<std::size_t>(u)]};
    }

    std::vector<int> tags_of(int u) const {
        const auto& padded = slot_tags[static_cast<std::size_t>(u)];
        return {padded.begin(), padded.begin() + transcript_len[static_cast<std::size_t>(u)]};
    }
};

inline std::vector<Batch> make_batches(const std::vector<Utterance>& dataset,
                                       const JointVocabulary& vocab, int batch_size,
                                       std::uint64_t seed) {
    if (dataset.empty()) throw ContractError("make_batches: dataset is empty");
    if (batch_size < 1) throw ContractError("make_batches: batch size must be positive");
    Rng rng(seed);
    std::vector<int> order(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    // stable sort by length: equal lengths keep their shuffled order
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dataset[static_cast<std::size_t>(a)].features.rows() <
               dataset[static_cast<std::size_t>(b)].features.rows();
    });
    std::vector<std::vector<int>> buckets;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
        buckets.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    rng.shuffle(buckets);

    std::vector<Batch> out;
    for (const auto& bucket : buckets) {
        Batch b;
        const Index f_dim = dataset[static_cast<std::size_t>(bucket.front())].features.cols();
        for (int idx : bucket) {
            const Utterance& u = dataset[static_cast<std::size_t>(idx)];
            b.t_max = std::max(b.t_max, static_cast<int>(u.features.rows()));
            b.n_max = std::max(b.n_max, static_cast<int>(u.transcript.size()));
        }
        b.features = MatrixF::Zero(static_cast<Index>(bucket.size()) * b.t_max, f_dim);
        b.feature_mask = MatrixF::Zero(static_cast<Index>(bucket.size()), b.t_max);
        int row = 0;
        for (int idx : bucket) {
            const Utterance& u = dataset[static_cast<std::size_t>(idx)];
            b.ids.push_back(u.id);
            b.feat_len.push_back(static_cast<int>(u.features.rows()));
            b.features.block(static_cast<Index>(row) * b.t_max, 0, u.features.rows(), f_dim) =
                u.features;
            b.feature_mask.row(row).head(u.features.rows()).setOnes();
            std::vector<int> padded = u.transcript;
            padded.resize(static_cast<std::size_t>(b.n_max), vocab.pad_id());
            b.transcripts.push_back(std::move(padded));
            b.transcript_len.push_back(static_cast<int>(u.transcript.size()));
            std::vector<int> tags = u.slot_tags;
            tags.resize(static_cast<std::size_t>(b.n_max), vocab.pad_id());
            b.slot_tags.push_back(std::move(tags));
            b.intents.push_back(u.intent);
            ++row;
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace narslu
