#pragma once

#include "narslu/autodiff.hpp"

#include <cmath>
#include <vector>

namespace narslu {

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
    return add_row(matmul(x, w), b);
}

// Two-layer pointwise feed-forward with silu in between.
template <typename Scalar>
Var<Scalar> feed_forward(Var<Scalar> x, Var<Scalar> w1, Var<Scalar> b1, Var<Scalar> w2,
                         Var<Scalar> b2) {
    return linear(silu(linear(x, w1, b1)), w2, b2);
}

// Gated linear unit over column halves: out = x[:, :C/2] * sigmoid(x[:, C/2:]).
template <typename Scalar>
Var<Scalar> glu_cols(Var<Scalar> x) {
    const Index c = x.cols();
    if (c % 2 != 0) throw ShapeError("glu_cols: need even column count, got " + shape_str(x.value()));
    return cmul(slice_cols(x, 0, c / 2), sigmoid(slice_cols(x, c / 2, c / 2)));
}

// Multi-head scaled-dot-product attention. q_in attends over kv_in; the
// optional additive mask [Tq x Tk] is applied to the scores pre-softmax
// (-inf disallows a position entirely).
template <typename Scalar>
Var<Scalar> multi_head_attention(Var<Scalar> q_in, Var<Scalar> kv_in, int heads, Var<Scalar> wq,
                                 Var<Scalar> bq, Var<Scalar> wk, Var<Scalar> bk, Var<Scalar> wv,
                                 Var<Scalar> bv, Var<Scalar> wo, Var<Scalar> bo,
                                 const Matrix<Scalar>* additive_mask = nullptr) {
    const Index d = q_in.cols();
    if (d % heads != 0) {
        throw ShapeError("multi_head_attention: model dim " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) + " heads");
    }
    if (kv_in.cols() != d) {
        throw ShapeError("multi_head_attention: query dim " + shape_str(q_in.value()) +
                         " vs memory dim " + shape_str(kv_in.value()));
    }
    if (additive_mask != nullptr &&
        (additive_mask->rows() != q_in.rows() || additive_mask->cols() != kv_in.rows())) {
        throw ShapeError("multi_head_attention: mask " + shape_str(*additive_mask) +
                         " does not cover scores " + shape_str(q_in.rows(), kv_in.rows()));
    }
    const Index dh = d / heads;
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    Var<Scalar> q = linear(q_in, wq, bq);
    Var<Scalar> k = linear(kv_in, wk, bk);
    Var<Scalar> v = linear(kv_in, wv, bv);

    Var<Scalar> mask_var{};
    if (additive_mask != nullptr) mask_var = q.tape->constant(*additive_mask);

    std::vector<Var<Scalar>> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var<Scalar> qh = slice_cols(q, Index(h) * dh, dh);
        Var<Scalar> kh = slice_cols(k, Index(h) * dh, dh);
        Var<Scalar> vh = slice_cols(v, Index(h) * dh, dh);
        Var<Scalar> scores = scale(matmul_nt(qh, kh), inv_sqrt);
        if (additive_mask != nullptr) scores = add(scores, mask_var);
        head_outs.push_back(matmul(softmax_rows(scores), vh));
    }
    return linear(concat_cols(head_outs), wo, bo);
}

// Additive causal mask: position i may attend to j <= i.
template <typename Scalar>
Matrix<Scalar> causal_mask(Index n) {
    Matrix<Scalar> m = Matrix<Scalar>::Zero(n, n);
    const Scalar ninf = -std::numeric_limits<Scalar>::infinity();
    for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) m(i, j) = ninf;
    }
    return m;
}

}  // namespace narslu
