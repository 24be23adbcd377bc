#pragma once

#include "narslu/autodiff.hpp"
#include "narslu/common.hpp"
#include "narslu/layers.hpp"
#include "narslu/params.hpp"

#include <functional>
#include <string>
#include <vector>

namespace narslu {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EncoderConfig {
    int layers = 4;
    int d_model = 64;
    int heads = 2;
    int ffn_dim = 256;
    int conv_kernel = 7;
    // 1-based layer numbers carrying a self-conditioning tap; the conditioned
    // input feeds layer l+1, so every tap must lie below the top layer.
    std::vector<int> taps;
    int vocab_size = 0;
    int feature_dim = 0;
    int max_positions = 512;

    void validate() const {
        if (layers < 1) throw ConfigError("encoder: need at least one layer");
        if (d_model < 1 || d_model % heads != 0) {
            throw ConfigError("encoder: d_model must be a positive multiple of heads");
        }
        if (conv_kernel % 2 == 0) throw ConfigError("encoder: conv kernel must be odd");
        if (vocab_size < 2) throw ConfigError("encoder: vocab_size not set");
        if (feature_dim < 1) throw ConfigError("encoder: feature_dim not set");
        for (std::size_t i = 0; i < taps.size(); ++i) {
            if (taps[i] < 1 || taps[i] >= layers) {
                throw ConfigError("encoder: tap layer " + std::to_string(taps[i]) +
                                  " out of range 1.." + std::to_string(layers - 1));
            }
            if (i > 0 && taps[i] <= taps[i - 1]) {
                throw ConfigError("encoder: tap layers must be strictly increasing");
            }
        }
    }
};

struct DecoderConfig {
    int layers = 2;
    int d_model = 64;
    int heads = 2;
    int ffn_dim = 256;
    int vocab_size = 0;
    int max_positions = 512;

    void validate() const {
        if (layers < 1) throw ConfigError("decoder: need at least one layer");
        if (d_model < 1 || d_model % heads != 0) {
            throw ConfigError("decoder: d_model must be a positive multiple of heads");
        }
        if (vocab_size < 2) throw ConfigError("decoder: vocab_size not set");
    }
};

enum class ModelKind { mask_ctc, sc_mask_ctc, ar };

inline std::string model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::mask_ctc: return "mask-ctc";
        case ModelKind::sc_mask_ctc: return "sc-mask-ctc";
        case ModelKind::ar: return "ar";
    }
    throw ContractError("model_kind_name: bad enum");
}

inline ModelKind model_kind_from(const std::string& s) {
    if (s == "mask-ctc") return ModelKind::mask_ctc;
    if (s == "sc-mask-ctc") return ModelKind::sc_mask_ctc;
    if (s == "ar") return ModelKind::ar;
    throw ConfigError("unknown model kind: " + s + " (expected mask-ctc, sc-mask-ctc or ar)");
}

struct ModelConfig {
    ModelKind kind = ModelKind::mask_ctc;
    EncoderConfig encoder;
    DecoderConfig decoder;

    void validate() const {
        encoder.validate();
        decoder.validate();
        if (encoder.vocab_size != decoder.vocab_size) {
            throw ConfigError("model: encoder and decoder vocab sizes differ");
        }
        if (encoder.d_model != decoder.d_model) {
            throw ConfigError("model: encoder and decoder dims differ (cross-attention)");
        }
        if (kind != ModelKind::sc_mask_ctc && !encoder.taps.empty()) {
            throw ConfigError("model: only sc-mask-ctc uses encoder taps");
        }
        if (kind == ModelKind::sc_mask_ctc && encoder.taps.empty()) {
            throw ConfigError("model: sc-mask-ctc needs at least one tap");
        }
    }
};

// Named presets. "desk" is the scale every test runs at; "paper-slurp"
// mirrors the large-corpus configuration and is constructible but untested
// at desk scale.
inline ModelConfig model_preset(const std::string& name, ModelKind kind, int vocab_size,
                                int feature_dim) {
    ModelConfig cfg;
    cfg.kind = kind;
    if (name == "desk") {
        cfg.encoder = EncoderConfig{4, 64, 2, 256, 7, {}, vocab_size, feature_dim, 512};
        cfg.decoder = DecoderConfig{2, 64, 2, 256, vocab_size, 512};
        if (kind == ModelKind::sc_mask_ctc) cfg.encoder.taps = {2};
    } else if (name == "paper-slurp") {
        cfg.encoder = EncoderConfig{12, 256, 4, 2048, 15, {}, vocab_size, feature_dim, 4096};
        cfg.decoder = DecoderConfig{6, 256, 4, 2048, vocab_size, 4096};
        if (kind == ModelKind::sc_mask_ctc) cfg.encoder.taps = {3, 6, 9};
    } else {
        throw ConfigError("unknown model preset: " + name + " (expected desk or paper-slurp)");
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

namespace init {

template <typename S>
void gaussian(Matrix<S>& m, Rng& rng, double scl) {
    for (Index r = 0; r < m.rows(); ++r) {
        for (Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(scl * rng.gaussian());
    }
}

template <typename S>
void add_linear(ModelParams<S>& p, const std::string& prefix, Index in, Index out, Rng& rng) {
    gaussian(p.add(prefix + ".w", in, out), rng, std::sqrt(1.0 / static_cast<double>(in)));
    p.add(prefix + ".b", 1, out);  // zeros
}

template <typename S>
void add_layer_norm(ModelParams<S>& p, const std::string& prefix, Index d) {
    p.add(prefix + ".g", 1, d).setOnes();
    p.add(prefix + ".b", 1, d);
}

template <typename S>
void add_ffn(ModelParams<S>& p, const std::string& prefix, Index d, Index hidden, Rng& rng) {
    add_layer_norm(p, prefix + ".ln", d);
    add_linear(p, prefix + ".in", d, hidden, rng);
    add_linear(p, prefix + ".out", hidden, d, rng);
}

template <typename S>
void add_attention(ModelParams<S>& p, const std::string& prefix, Index d, Rng& rng) {
    add_layer_norm(p, prefix + ".ln", d);
    for (const char* name : {".wq", ".wk", ".wv", ".wo"}) {
        gaussian(p.add(prefix + name, d, d), rng, std::sqrt(1.0 / static_cast<double>(d)));
    }
    for (const char* name : {".bq", ".bk", ".bv", ".bo"}) p.add(prefix + name, 1, d);
}

}  // namespace init

template <typename S>
ModelParams<S> init_model_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams<S> p;
    const Index d = cfg.encoder.d_model;
    const Index v = cfg.encoder.vocab_size;

    init::add_linear(p, "frontend.conv1", 3 * cfg.encoder.feature_dim, d, rng);
    init::add_linear(p, "frontend.conv2", 3 * d, d, rng);
    init::add_linear(p, "frontend.proj", d, d, rng);
    init::gaussian(p.add("enc.pos", cfg.encoder.max_positions, d), rng, 0.1);
    for (int b = 0; b < cfg.encoder.layers; ++b) {
        const std::string pre = "enc.b" + std::to_string(b);
        init::add_ffn(p, pre + ".ffn1", d, cfg.encoder.ffn_dim, rng);
        init::add_attention(p, pre + ".attn", d, rng);
        init::add_layer_norm(p, pre + ".conv.ln", d);
        init::add_linear(p, pre + ".conv.pw1", d, 2 * d, rng);
        init::gaussian(p.add(pre + ".conv.dw.w", cfg.encoder.conv_kernel, d), rng,
                       std::sqrt(1.0 / cfg.encoder.conv_kernel));
        p.add(pre + ".conv.dw.b", 1, d);
        init::add_layer_norm(p, pre + ".conv.ln2", d);
        init::add_linear(p, pre + ".conv.pw2", d, d, rng);
        init::add_ffn(p, pre + ".ffn2", d, cfg.encoder.ffn_dim, rng);
        init::add_layer_norm(p, pre + ".final", d);
    }
    init::add_linear(p, "enc.ctc_head", d, v, rng);
    if (!cfg.encoder.taps.empty()) {
        // one projection shared by every tap
        init::add_linear(p, "enc.cond", v, d, rng);
    }

    init::gaussian(p.add("dec.emb", v, d), rng, 0.1);
    init::gaussian(p.add("dec.pos", cfg.decoder.max_positions, d), rng, 0.1);
    for (int b = 0; b < cfg.decoder.layers; ++b) {
        const std::string pre = "dec.b" + std::to_string(b);
        init::add_attention(p, pre + ".self", d, rng);
        init::add_attention(p, pre + ".cross", d, rng);
        init::add_ffn(p, pre + ".ffn", d, cfg.decoder.ffn_dim, rng);
    }
    init::add_layer_norm(p, "dec.final", d);
    init::add_linear(p, "dec.asr_head", d, v, rng);
    init::add_linear(p, "dec.slu_head", d, v, rng);
    return p;
}

// ---------------------------------------------------------------------------
// Subsampling front-end: two strided convolutions (kernel 3, stride 2,
// padding 1), silu after each, then a linear projection to d_model. The
// output length is subsampled_length(T_raw).
// ---------------------------------------------------------------------------

inline int conv_out_length(int len, int kernel, int stride, int pad) {
    return (len + 2 * pad - kernel) / stride + 1;
}

inline int subsampled_length(int t_raw) {
    return conv_out_length(conv_out_length(t_raw, 3, 2, 1), 3, 2, 1);
}

template <typename S>
Var<S> subsample_frontend(const BoundParams<S>& p, const EncoderConfig& cfg, Var<S> features) {
    if (features.rows() < 4) {
        throw ShapeError("subsample_frontend: need at least 4 frames, got " +
                         shape_str(features.value()));
    }
    if (features.cols() != cfg.feature_dim) {
        throw ShapeError("subsample_frontend: expected " + std::to_string(cfg.feature_dim) +
                         " feature dims, got " + shape_str(features.value()));
    }
    Var<S> h = silu(linear(time_patches(features, 3, 2, 1), p["frontend.conv1.w"],
                           p["frontend.conv1.b"]));
    h = silu(linear(time_patches(h, 3, 2, 1), p["frontend.conv2.w"], p["frontend.conv2.b"]));
    return linear(h, p["frontend.proj.w"], p["frontend.proj.b"]);
}

// ---------------------------------------------------------------------------
// Conformer encoder with self-conditioning taps
// ---------------------------------------------------------------------------

template <typename S>
struct IntermediatePrediction {
    int layer = 0;   // 1-based tap layer
    Var<S> z;        // [T x V] frame posteriors (softmax)
    Var<S> z_log;    // [T x V] log posteriors, shares the logits with z
    Var<S> x_out;    // [T x D] running representation at the tap
};

// Hook invoked at each tap; returns the conditioning distribution fed into
// the shared projection (identity on z when absent).
template <typename S>
using FeedbackHook = std::function<Var<S>(int layer, Var<S> z, Var<S> x_out)>;

template <typename S>
struct EncoderResult {
    Var<S> x;  // [T x D] final representation
    std::vector<IntermediatePrediction<S>> taps;
};

namespace detail {

template <typename S>
Var<S> conformer_block(const BoundParams<S>& p, const std::string& pre, int heads,
                       Var<S> x) {
    const S eps = S(1e-5);
    auto ln = [&](Var<S> h, const std::string& name) {
        return layer_norm_rows(h, p[pre + name + ".g"], p[pre + name + ".b"], eps);
    };
    // macaron half-step feed-forward
    Var<S> h = ln(x, ".ffn1.ln");
    x = add(x, scale(feed_forward(h, p[pre + ".ffn1.in.w"], p[pre + ".ffn1.in.b"],
                                  p[pre + ".ffn1.out.w"], p[pre + ".ffn1.out.b"]),
                     S(0.5)));
    // self-attention
    h = ln(x, ".attn.ln");
    x = add(x, multi_head_attention(h, h, heads, p[pre + ".attn.wq"], p[pre + ".attn.bq"],
                                    p[pre + ".attn.wk"], p[pre + ".attn.bk"],
                                    p[pre + ".attn.wv"], p[pre + ".attn.bv"],
                                    p[pre + ".attn.wo"], p[pre + ".attn.bo"]));
    // convolution module: pointwise+glu, depthwise, norm, silu, pointwise
    h = ln(x, ".conv.ln");
    h = glu_cols(linear(h, p[pre + ".conv.pw1.w"], p[pre + ".conv.pw1.b"]));
    h = depthwise_conv1d(h, p[pre + ".conv.dw.w"], p[pre + ".conv.dw.b"]);
    h = silu(ln(h, ".conv.ln2"));
    x = add(x, linear(h, p[pre + ".conv.pw2.w"], p[pre + ".conv.pw2.b"]));
    // second macaron half
    h = ln(x, ".ffn2.ln");
    x = add(x, scale(feed_forward(h, p[pre + ".ffn2.in.w"], p[pre + ".ffn2.in.b"],
                                  p[pre + ".ffn2.out.w"], p[pre + ".ffn2.out.b"]),
                     S(0.5)));
    return ln(x, ".final");
}

}  // namespace detail

template <typename S>
Var<S> ctc_head_logits(const BoundParams<S>& p, Var<S> x) {
    return linear(x, p["enc.ctc_head.w"], p["enc.ctc_head.b"]);
}

// frames: [T x D] subsampled features. Adds learned absolute positions, runs
// the conformer stack, and at each tap layer computes the shared-head
// posterior Z^l and feeds layer_norm-ed block output plus the projected
// conditioning distribution into the next layer.
template <typename S>
EncoderResult<S> encoder_forward(const BoundParams<S>& p, const EncoderConfig& cfg,
                                 Var<S> frames, const FeedbackHook<S>& hook = {}) {
    cfg.validate();
    const Index t = frames.rows();
    if (frames.cols() != cfg.d_model) {
        throw ShapeError("encoder_forward: frames " + shape_str(frames.value()) +
                         " do not match d_model " + std::to_string(cfg.d_model));
    }
    if (t > cfg.max_positions) {
        throw ShapeError("encoder_forward: " + std::to_string(t) +
                         " frames exceed max_positions " + std::to_string(cfg.max_positions));
    }
    std::vector<int> pos_ids(static_cast<std::size_t>(t));
    for (Index i = 0; i < t; ++i) pos_ids[static_cast<std::size_t>(i)] = static_cast<int>(i);
    Var<S> x = add(frames, embedding(p["enc.pos"], pos_ids));

    EncoderResult<S> result;
    std::size_t next_tap = 0;
    for (int layer = 1; layer <= cfg.layers; ++layer) {
        x = detail::conformer_block(p, "enc.b" + std::to_string(layer - 1), cfg.heads, x);
        if (next_tap < cfg.taps.size() && cfg.taps[next_tap] == layer) {
            Var<S> logits = ctc_head_logits(p, x);
            IntermediatePrediction<S> tap;
            tap.layer = layer;
            tap.z = softmax_rows(logits);
            tap.z_log = log_softmax_rows(logits);
            tap.x_out = x;
            Var<S> conditioning = hook ? hook(layer, tap.z, tap.x_out) : tap.z;
            x = add(x, linear(conditioning, p["enc.cond.w"], p["enc.cond.b"]));
            result.taps.push_back(std::move(tap));
            ++next_tap;
        }
    }
    result.x = x;
    return result;
}

// Convenience composition used by every pipeline: raw features in, encoder
// representation out.
template <typename S>
EncoderResult<S> encode_features(const BoundParams<S>& p, const EncoderConfig& cfg,
                                 Var<S> features, const FeedbackHook<S>& hook = {}) {
    return encoder_forward(p, cfg, subsample_frontend(p, cfg, features), hook);
}

// ---------------------------------------------------------------------------
// Transformer decoder trunk shared by the CMLM (bidirectional) and the AR
// decoder (causal self-attention). Cross-attends to the encoder memory.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Var<S> decoder_trunk(const BoundParams<S>& p, const DecoderConfig& cfg,
                     const std::vector<int>& input_ids, Var<S> memory, bool causal) {
    cfg.validate();
    if (input_ids.empty()) throw ContractError("decoder: empty input sequence");
    if (static_cast<int>(input_ids.size()) > cfg.max_positions) {
        throw ShapeError("decoder: input length " + std::to_string(input_ids.size()) +
                         " exceeds max_positions " + std::to_string(cfg.max_positions));
    }
    if (memory.cols() != cfg.d_model) {
        throw ShapeError("decoder: memory " + shape_str(memory.value()) +
                         " does not match d_model");
    }
    for (int id : input_ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw ContractError("decoder: input id " + std::to_string(id) +
                                " outside vocabulary");
        }
    }
    const S eps = S(1e-5);
    const Index n = static_cast<Index>(input_ids.size());
    std::vector<int> pos_ids(input_ids.size());
    for (Index i = 0; i < n; ++i) pos_ids[static_cast<std::size_t>(i)] = static_cast<int>(i);
    Var<S> x = add(embedding(p["dec.emb"], input_ids), embedding(p["dec.pos"], pos_ids));

    Matrix<S> mask;
    if (causal) mask = causal_mask<S>(n);
    for (int b = 0; b < cfg.layers; ++b) {
        const std::string pre = "dec.b" + std::to_string(b);
        auto ln = [&](Var<S> h, const std::string& name) {
            return layer_norm_rows(h, p[pre + name + ".g"], p[pre + name + ".b"], eps);
        };
        Var<S> h = ln(x, ".self.ln");
        x = add(x, multi_head_attention(h, h, cfg.heads, p[pre + ".self.wq"],
                                        p[pre + ".self.bq"], p[pre + ".self.wk"],
                                        p[pre + ".self.bk"], p[pre + ".self.wv"],
                                        p[pre + ".self.bv"], p[pre + ".self.wo"],
                                        p[pre + ".self.bo"], causal ? &mask : nullptr));
        h = ln(x, ".cross.ln");
        x = add(x, multi_head_attention(h, memory, cfg.heads, p[pre + ".cross.wq"],
                                        p[pre + ".cross.bq"], p[pre + ".cross.wk"],
                                        p[pre + ".cross.bk"], p[pre + ".cross.wv"],
                                        p[pre + ".cross.bv"], p[pre + ".cross.wo"],
                                        p[pre + ".cross.bo"]));
        h = ln(x, ".ffn.ln");
        x = add(x, feed_forward(h, p[pre + ".ffn.in.w"], p[pre + ".ffn.in.b"],
                                p[pre + ".ffn.out.w"], p[pre + ".ffn.out.b"]));
    }
    return layer_norm_rows(x, p["dec.final.g"], p["dec.final.b"], eps);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CMLM decoder: BERT-style bidirectional self-attention over the CLS-prefixed
// token sequence. The ASR head reads positions 1..N, the separate SLU head
// reads positions 0..N (intent at 0, slot tags elsewhere).
// ---------------------------------------------------------------------------

template <typename S>
struct CmlmResult {
    Var<S> hidden;    // [(N+1) x D]
    Var<S> asr_logp;  // [N x V]; row j belongs to transcript index j
    Var<S> slu_logp;  // [(N+1) x V]; row 0 is the intent position
};

template <typename S>
CmlmResult<S> cmlm_forward(const BoundParams<S>& p, const DecoderConfig& cfg,
                           const std::vector<int>& input_ids, Var<S> memory) {
    if (memory.rows() < 1) throw ContractError("cmlm_forward: empty encoder memory");
    CmlmResult<S> out;
    out.hidden = detail::decoder_trunk(p, cfg, input_ids, memory, /*causal=*/false);
    std::vector<int> token_rows;
    for (std::size_t i = 1; i < input_ids.size(); ++i) token_rows.push_back(static_cast<int>(i));
    out.asr_logp = log_softmax_rows(
        linear(gather_rows(out.hidden, token_rows), p["dec.asr_head.w"], p["dec.asr_head.b"]));
    out.slu_logp =
        log_softmax_rows(linear(out.hidden, p["dec.slu_head.w"], p["dec.slu_head.b"]));
    return out;
}

// ---------------------------------------------------------------------------
// AR decoder: causal trunk over [start, y_1..y_N]; row j of each head is the
// step-(j+1) distribution. Incremental decoding re-runs the parallel forward
// and reads the last row, so prefix consistency is structural.
// ---------------------------------------------------------------------------

template <typename S>
struct ArResult {
    Var<S> hidden;    // [L x D]
    Var<S> asr_logp;  // [L x V]
    Var<S> slu_logp;  // [L x V]
};

template <typename S>
ArResult<S> ar_parallel_forward(const BoundParams<S>& p, const DecoderConfig& cfg,
                                const std::vector<int>& input_ids, Var<S> memory) {
    ArResult<S> out;
    out.hidden = detail::decoder_trunk(p, cfg, input_ids, memory, /*causal=*/true);
    out.asr_logp =
        log_softmax_rows(linear(out.hidden, p["dec.asr_head.w"], p["dec.asr_head.b"]));
    out.slu_logp =
        log_softmax_rows(linear(out.hidden, p["dec.slu_head.w"], p["dec.slu_head.b"]));
    return out;
}

// Next-step distributions given the decoded prefix (ids without the start
// symbol). Returns value matrices [1 x V] for the ASR and SLU heads.
template <typename S>
std::pair<Matrix<S>, Matrix<S>> ar_decoder_step(const BoundParams<S>& p,
                                                const DecoderConfig& cfg, int start_id,
                                                const std::vector<int>& prefix,
                                                Var<S> memory) {
    std::vector<int> input;
    input.reserve(prefix.size() + 1);
    input.push_back(start_id);
    input.insert(input.end(), prefix.begin(), prefix.end());
    ArResult<S> res = ar_parallel_forward(p, cfg, input, memory);
    const Index last = res.asr_logp.rows() - 1;
    return {res.asr_logp.value().row(last), res.slu_logp.value().row(last)};
}

}  // namespace narslu
