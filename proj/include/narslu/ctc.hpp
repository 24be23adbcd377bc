#pragma once

#include "narslu/autodiff.hpp"
#include "narslu/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace narslu {

// CTC: dynamic-programming loss over all blank-augmented alignments, greedy
// decoding with per-token source positions, an exact enumeration oracle, and
// the prefix scorer used by joint beam search. All log-domain arithmetic uses
// log-sum-exp with max extraction.

template <typename Scalar>
constexpr Scalar neg_inf() {
    return -std::numeric_limits<Scalar>::infinity();
}

template <typename Scalar>
Scalar log_add(Scalar a, Scalar b) {
    if (a == neg_inf<Scalar>()) return b;
    if (b == neg_inf<Scalar>()) return a;
    const Scalar m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

template <typename Scalar>
Scalar log_add(Scalar a, Scalar b, Scalar c) {
    return log_add(log_add(a, b), c);
}

// Greedy-decode output: tokens with their confidences and the frame each
// token was read from, plus the raw per-frame argmax alignment.
struct CtcDecodeResult {
    std::vector<int> tokens;         // no blanks
    std::vector<double> confidences; // frame posterior at the chosen frame
    std::vector<int> positions;      // strictly increasing source frames
    std::vector<int> alignment;      // per-frame argmax ids, length T
};

template <typename Scalar>
struct CtcLossResult {
    Scalar nll = 0;                       // negative log-likelihood, natural log
    Matrix<Scalar> grad_log_probs;        // d nll / d log_probs, [T x V]
};

namespace detail {

// Frames needed to emit the target: one per label plus one separator blank
// between adjacent repeats.
inline int min_frames_for(const std::vector<int>& target) {
    int need = static_cast<int>(target.size());
    for (std::size_t i = 1; i < target.size(); ++i) {
        if (target[i] == target[i - 1]) ++need;
    }
    return need;
}

template <typename Scalar>
void validate_ctc_inputs(const Matrix<Scalar>& log_probs, const std::vector<int>& target,
                         int blank) {
    const Index v = log_probs.cols();
    if (blank < 0 || blank >= v) {
        throw ContractError("ctc: blank id " + std::to_string(blank) + " outside vocabulary of " +
                            std::to_string(v));
    }
    for (int id : target) {
        if (id < 0 || id >= v) {
            throw ContractError("ctc: target id " + std::to_string(id) +
                                " outside vocabulary of " + std::to_string(v));
        }
        if (id == blank) throw ContractError("ctc: target contains the blank id");
    }
}

}  // namespace detail

// Forward-backward CTC loss on a [T x V] matrix of log-probabilities. The
// gradient is the negative state-occupancy posterior, exact for any real
// input matrix (normalization is not assumed).
template <typename Scalar>
CtcLossResult<Scalar> ctc_loss_matrix(const Matrix<Scalar>& log_probs,
                                      const std::vector<int>& target, int blank) {
    detail::validate_ctc_inputs(log_probs, target, blank);
    const int t_len = static_cast<int>(log_probs.rows());
    const int u_len = static_cast<int>(target.size());
    if (t_len < detail::min_frames_for(target)) {
        throw InfeasibleTargetError("ctc: target of length " + std::to_string(u_len) +
                                    " not emittable in " + std::to_string(t_len) + " frames");
    }
    const int n_states = 2 * u_len + 1;
    auto label_of = [&](int s) { return (s % 2 == 0) ? blank : target[(s - 1) / 2]; };
    const Scalar ninf = neg_inf<Scalar>();

    Matrix<Scalar> alpha = Matrix<Scalar>::Constant(t_len, n_states, ninf);
    alpha(0, 0) = log_probs(0, blank);
    if (u_len > 0) alpha(0, 1) = log_probs(0, target[0]);
    for (int t = 1; t < t_len; ++t) {
        for (int s = 0; s < n_states; ++s) {
            Scalar acc = alpha(t - 1, s);
            if (s >= 1) acc = log_add(acc, alpha(t - 1, s - 1));
            if (s >= 2 && s % 2 == 1 && label_of(s) != label_of(s - 2)) {
                acc = log_add(acc, alpha(t - 1, s - 2));
            }
            if (acc != ninf) alpha(t, s) = acc + log_probs(t, label_of(s));
        }
    }
    Scalar log_p = alpha(t_len - 1, n_states - 1);
    if (u_len > 0) log_p = log_add(log_p, alpha(t_len - 1, n_states - 2));
    if (!(log_p > ninf)) {
        throw InfeasibleTargetError("ctc: no feasible alignment for the target");
    }

    // beta excludes the emission at its own frame, so alpha_t(s) + beta_t(s)
    // is the log-mass of complete paths through state s at frame t.
    Matrix<Scalar> beta = Matrix<Scalar>::Constant(t_len, n_states, ninf);
    beta(t_len - 1, n_states - 1) = 0;
    if (u_len > 0) beta(t_len - 1, n_states - 2) = 0;
    for (int t = t_len - 2; t >= 0; --t) {
        for (int s = 0; s < n_states; ++s) {
            Scalar acc = ninf;
            for (int s2 = s; s2 <= std::min(s + 2, n_states - 1); ++s2) {
                if (s2 == s + 2 && !(s2 % 2 == 1 && label_of(s2) != label_of(s))) continue;
                if (beta(t + 1, s2) == ninf) continue;
                acc = log_add(acc, beta(t + 1, s2) + log_probs(t + 1, label_of(s2)));
            }
            beta(t, s) = acc;
        }
    }

    CtcLossResult<Scalar> out;
    out.nll = -log_p;
    out.grad_log_probs = Matrix<Scalar>::Zero(t_len, log_probs.cols());
    for (int t = 0; t < t_len; ++t) {
        for (int s = 0; s < n_states; ++s) {
            const Scalar occ = alpha(t, s) + beta(t, s) - log_p;
            if (occ == ninf || std::isnan(occ)) continue;
            out.grad_log_probs(t, label_of(s)) -= std::exp(occ);
        }
    }
    return out;
}

// Autodiff node: scalar nll whose adjoint feeds the analytic gradient into
// the upstream log-probability matrix.
template <typename Scalar>
Var<Scalar> ctc_loss(Var<Scalar> log_probs, const std::vector<int>& target, int blank) {
    CtcLossResult<Scalar> res = ctc_loss_matrix(log_probs.value(), target, blank);
    Matrix<Scalar> nll(1, 1);
    nll(0, 0) = res.nll;
    return log_probs.tape->emit(
        std::move(nll), log_probs.requires_grad(),
        [lp = log_probs.id, grad = std::move(res.grad_log_probs)](Tape<Scalar>& tp,
                                                                  const Matrix<Scalar>& g) {
            tp.accumulate(lp, (grad.array() * g(0, 0)).matrix());
        });
}

// The collapse rule shared by decoding and the oracle: merge runs of equal
// non-blank ids, drop blanks.
inline std::vector<int> collapse_alignment(const std::vector<int>& alignment, int blank) {
    std::vector<int> out;
    int prev = blank;
    for (int id : alignment) {
        if (id != blank && id != prev) out.push_back(id);
        prev = id;
    }
    return out;
}

// Exact enumeration over all |V|^T alignments. Bounded refusal keeps the
// oracle honest about its own cost.
template <typename Scalar>
Scalar brute_force_ctc(const Matrix<Scalar>& log_probs, const std::vector<int>& target,
                       int blank) {
    const int t_len = static_cast<int>(log_probs.rows());
    const int v = static_cast<int>(log_probs.cols());
    if (t_len > 8 || v > 5) {
        throw ContractError("brute_force_ctc: refusing T=" + std::to_string(t_len) +
                            ", |V|=" + std::to_string(v) + " (bounds are T<=8, |V|<=5)");
    }
    detail::validate_ctc_inputs(log_probs, target, blank);
    Scalar total = neg_inf<Scalar>();
    std::vector<int> alignment(static_cast<std::size_t>(t_len), 0);
    while (true) {
        if (collapse_alignment(alignment, blank) == target) {
            Scalar lp = 0;
            for (int t = 0; t < t_len; ++t) lp += log_probs(t, alignment[t]);
            total = log_add(total, lp);
        }
        int pos = t_len - 1;
        while (pos >= 0 && alignment[pos] == v - 1) alignment[pos--] = 0;
        if (pos < 0) break;
        ++alignment[pos];
    }
    return -total;  // +inf when no alignment collapses to the target
}

// Greedy best-path decode with position tracking: within a run of one id the
// frame with the highest posterior for that id is recorded, and that frame's
// posterior becomes the token confidence.
template <typename Scalar>
CtcDecodeResult greedy_collapse(const Matrix<Scalar>& probs, int blank) {
    const int t_len = static_cast<int>(probs.rows());
    CtcDecodeResult res;
    res.alignment.resize(static_cast<std::size_t>(t_len));
    for (int t = 0; t < t_len; ++t) {
        Index arg = 0;
        probs.row(t).maxCoeff(&arg);
        res.alignment[static_cast<std::size_t>(t)] = static_cast<int>(arg);
    }
    int t = 0;
    while (t < t_len) {
        const int id = res.alignment[static_cast<std::size_t>(t)];
        if (id == blank) {
            ++t;
            continue;
        }
        int best_frame = t;
        Scalar best_p = probs(t, id);
        int end = t + 1;
        while (end < t_len && res.alignment[static_cast<std::size_t>(end)] == id) {
            if (probs(end, id) > best_p) {
                best_p = probs(end, id);
                best_frame = end;
            }
            ++end;
        }
        res.tokens.push_back(id);
        res.positions.push_back(best_frame);
        res.confidences.push_back(static_cast<double>(best_p));
        t = end;
    }
    return res;
}

// Tokens whose confidence is strictly below the threshold are replaced by
// mask_id; the returned index list addresses the token sequence.
struct MaskedHypothesis {
    std::vector<int> tokens;
    std::vector<int> masked_indices;
};

inline MaskedHypothesis mask_by_confidence(const CtcDecodeResult& result, double p_thresh,
                                           int mask_id) {
    if (p_thresh < 0.0 || p_thresh > 1.0) {
        throw ContractError("mask_by_confidence: threshold must be in [0, 1]");
    }
    MaskedHypothesis out;
    out.tokens = result.tokens;
    for (std::size_t i = 0; i < result.tokens.size(); ++i) {
        if (result.confidences[i] < p_thresh) {
            out.tokens[i] = mask_id;
            out.masked_indices.push_back(static_cast<int>(i));
        }
    }
    return out;
}

namespace detail {

// Shared DP for prefix probabilities. States over t frames consumed:
//   a_n[n][t]: collapse of the first t frames is exactly g[0..n-1], last
//              frame extends the final token's run
//   a_b[n][t]: same collapse, last frame is blank
template <typename Scalar>
struct PrefixDp {
    std::vector<std::vector<Scalar>> a_n, a_b;
};

template <typename Scalar>
PrefixDp<Scalar> prefix_dp(const Matrix<Scalar>& log_probs, const std::vector<int>& prefix,
                           int blank) {
    const int t_len = static_cast<int>(log_probs.rows());
    const int n_len = static_cast<int>(prefix.size());
    const Scalar ninf = neg_inf<Scalar>();
    PrefixDp<Scalar> dp;
    dp.a_n.assign(n_len + 1, std::vector<Scalar>(t_len + 1, ninf));
    dp.a_b.assign(n_len + 1, std::vector<Scalar>(t_len + 1, ninf));
    dp.a_b[0][0] = 0;
    for (int t = 1; t <= t_len; ++t) {
        dp.a_b[0][t] = dp.a_b[0][t - 1] + log_probs(t - 1, blank);
    }
    for (int n = 1; n <= n_len; ++n) {
        const int sym = prefix[static_cast<std::size_t>(n - 1)];
        const bool fresh_run_ok = (n == 1) || (sym != prefix[static_cast<std::size_t>(n - 2)]);
        for (int t = 1; t <= t_len; ++t) {
            Scalar enter = dp.a_b[n - 1][t - 1];
            if (fresh_run_ok) enter = log_add(enter, dp.a_n[n - 1][t - 1]);
            dp.a_n[n][t] = log_probs(t - 1, sym) + log_add(dp.a_n[n][t - 1], enter);
            dp.a_b[n][t] = log_probs(t - 1, blank) + log_add(dp.a_b[n][t - 1], dp.a_n[n][t - 1]);
        }
    }
    return dp;
}

}  // namespace detail

// log P(the collapsed output starts with `prefix`). The empty prefix scores 0.
template <typename Scalar>
Scalar ctc_prefix_score(const Matrix<Scalar>& log_probs, const std::vector<int>& prefix,
                        int blank) {
    detail::validate_ctc_inputs(log_probs, prefix, blank);
    if (prefix.empty()) return 0;
    const int t_len = static_cast<int>(log_probs.rows());
    const int n_len = static_cast<int>(prefix.size());
    auto dp = detail::prefix_dp(log_probs, prefix, blank);
    const int last = prefix.back();
    const bool fresh_run_ok =
        (n_len == 1) || (last != prefix[static_cast<std::size_t>(n_len - 2)]);
    // mass entering the final symbol at frame t is absorbed: any continuation
    // keeps the prefix property and sums to probability one.
    Scalar total = neg_inf<Scalar>();
    for (int t = 1; t <= t_len; ++t) {
        Scalar enter = dp.a_b[n_len - 1][t - 1];
        if (fresh_run_ok) enter = log_add(enter, dp.a_n[n_len - 1][t - 1]);
        if (enter == neg_inf<Scalar>()) continue;
        total = log_add(total, enter + log_probs(t - 1, last));
    }
    return total;
}

// log P(the collapsed output equals `seq` exactly); equals -ctc_loss nll.
template <typename Scalar>
Scalar ctc_complete_score(const Matrix<Scalar>& log_probs, const std::vector<int>& seq,
                          int blank) {
    detail::validate_ctc_inputs(log_probs, seq, blank);
    const int t_len = static_cast<int>(log_probs.rows());
    const int n_len = static_cast<int>(seq.size());
    auto dp = detail::prefix_dp(log_probs, seq, blank);
    return log_add(dp.a_n[n_len][t_len], dp.a_b[n_len][t_len]);
}

}  // namespace narslu
