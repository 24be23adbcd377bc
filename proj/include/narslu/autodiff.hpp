#pragma once

#include "narslu/common.hpp"

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

namespace narslu {

// Reverse-mode autodiff on dense row-major matrices. A Tape records every
// primitive in creation order (which is a topological order by construction);
// backward() replays it once in reverse. Node values either live in the tape
// or reference caller-owned storage (parameters), so binding a parameter set
// to a fresh tape copies nothing.

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    const Matrix<Scalar>& value() const { return tape->value(id); }
    const Matrix<Scalar>& grad() const { return tape->grad(id); }
    bool requires_grad() const { return tape->requires_grad(id); }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
public:
    using BackFn = std::function<void(Tape&, const Matrix<Scalar>&)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    Var<Scalar> leaf(Matrix<Scalar> v, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(v), nullptr, BackFn{}, requires_grad && grad_enabled_});
        return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
    }

    // Caller keeps ownership; the matrix must outlive the tape.
    Var<Scalar> leaf_ref(const Matrix<Scalar>* v, bool requires_grad = false) {
        nodes_.push_back(Node{Matrix<Scalar>{}, v, BackFn{}, requires_grad && grad_enabled_});
        return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<Scalar> constant(Matrix<Scalar> v) { return leaf(std::move(v), false); }

    // Op-author entry point: record a computed node.
    Var<Scalar> emit(Matrix<Scalar> value, bool requires_grad, BackFn back) {
        const bool rg = requires_grad && grad_enabled_;
        nodes_.push_back(Node{std::move(value), nullptr, rg ? std::move(back) : BackFn{}, rg});
        return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Matrix<Scalar>& value(int id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    // Gradient from the last backward() pass; zeros if the node was not reached.
    const Matrix<Scalar>& grad(int id) {
        if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
        Matrix<Scalar>& g = grads_[static_cast<std::size_t>(id)];
        if (g.size() == 0) g = Matrix<Scalar>::Zero(value(id).rows(), value(id).cols());
        return g;
    }

    template <typename Expr>
    void accumulate(int id, const Expr& delta) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        Matrix<Scalar>& g = grads_[static_cast<std::size_t>(id)];
        if (g.size() == 0) {
            g = delta;
        } else {
            g += delta;
        }
    }

    void backward(Var<Scalar> loss) {
        if (loss.tape != this) throw ContractError("backward: var belongs to another tape");
        if (value(loss.id).size() != 1) {
            throw ContractError("backward: loss must be scalar, got " +
                                shape_str(value(loss.id)));
        }
        grads_.assign(nodes_.size(), Matrix<Scalar>{});
        grads_[static_cast<std::size_t>(loss.id)] = Matrix<Scalar>::Ones(1, 1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            const Matrix<Scalar>& g = grads_[static_cast<std::size_t>(id)];
            if (n.back && g.size() != 0) n.back(*this, g);
        }
    }

    bool grad_enabled() const { return grad_enabled_; }

    // RAII scope that suppresses gradient recording, used for the detached
    // feedback passes and for plain inference.
    struct NoGrad {
        explicit NoGrad(Tape& t) : tape(t), saved(t.grad_enabled_) { t.grad_enabled_ = false; }
        ~NoGrad() { tape.grad_enabled_ = saved; }
        Tape& tape;
        bool saved;
    };

    std::size_t size() const { return nodes_.size(); }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }

    Rng* rng = nullptr;  // consumed by dropout

private:
    struct Node {
        Matrix<Scalar> value;
        const Matrix<Scalar>* external = nullptr;
        BackFn back;
        bool requires_grad = false;
    };

    // deque keeps references returned by value() stable while new nodes are
    // recorded (decoding hooks hold tap posteriors across CMLM subgraphs)
    std::deque<Node> nodes_;
    std::vector<Matrix<Scalar>> grads_;
    bool grad_enabled_ = true;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(std::initializer_list<Var<Scalar>> vars) {
    Tape<Scalar>* t = vars.begin()->tape;
    for (const Var<Scalar>& v : vars) {
        if (v.tape != t) throw ContractError("operands belong to different tapes");
    }
    return *t;
}

template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vars) {
    for (const Var<Scalar>& v : vars) {
        if (v.requires_grad()) return true;
    }
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Each validates shapes, computes the value eagerly and
// registers an adjoint that accumulates into its parents.
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({a, b});
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
    Matrix<Scalar> out = a.value() * b.value();
    return t.emit(std::move(out), detail::any_grad<Scalar>({a, b}),
                  [a = a.id, b = b.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      tp.accumulate(a, g * tp.value(b).transpose());
                      tp.accumulate(b, tp.value(a).transpose() * g);
                  });
}

// C = A * B^T, used for attention scores.
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({a, b});
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
    Matrix<Scalar> out = a.value() * b.value().transpose();
    return t.emit(std::move(out), detail::any_grad<Scalar>({a, b}),
                  [a = a.id, b = b.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      tp.accumulate(a, g * tp.value(b));
                      tp.accumulate(b, g.transpose() * tp.value(a));
                  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({a, b});
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("add: shape mismatch, " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
    Matrix<Scalar> out = a.value() + b.value();
    return t.emit(std::move(out), detail::any_grad<Scalar>({a, b}),
                  [a = a.id, b = b.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      tp.accumulate(a, g);
                      tp.accumulate(b, g);
                  });
}

// x[R,C] + row[1,C] broadcast down the rows (bias add).
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> x, Var<Scalar> row) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({x, row});
    if (row.rows() != 1 || row.cols() != x.cols()) {
        throw ShapeError("add_row: need [1x" + std::to_string(x.cols()) + "] bias, got " +
                         shape_str(row.value()));
    }
    Matrix<Scalar> out = x.value().rowwise() + row.value().row(0);
    return t.emit(std::move(out), detail::any_grad<Scalar>({x, row}),
                  [x = x.id, r = row.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      tp.accumulate(x, g);
                      tp.accumulate(r, g.colwise().sum());
                  });
}

template <typename Scalar>
Var<Scalar> cmul(Var<Scalar> a, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({a, b});
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("cmul: shape mismatch, " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
    }
    Matrix<Scalar> out = a.value().cwiseProduct(b.value());
    return t.emit(std::move(out), detail::any_grad<Scalar>({a, b}),
                  [a = a.id, b = b.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      tp.accumulate(a, g.cwiseProduct(tp.value(b)));
                      tp.accumulate(b, g.cwiseProduct(tp.value(a)));
                  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar c) {
    Matrix<Scalar> out = x.value() * c;
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, c](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            tp.accumulate(x, g * c);
                        });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
    return add(a, b);
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
    return add(a, scale(b, Scalar(-1)));
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
    Matrix<Scalar> out =
        x.value().unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            Matrix<Scalar> s = tp.value(x).unaryExpr([](Scalar v) {
                                return Scalar(1) / (Scalar(1) + std::exp(-v));
                            });
                            tp.accumulate(
                                x, g.cwiseProduct(s.cwiseProduct((1 - s.array()).matrix())));
                        });
}

// x * sigmoid(x), the conformer activation.
template <typename Scalar>
Var<Scalar> silu(Var<Scalar> x) {
    Matrix<Scalar> s =
        x.value().unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
    Matrix<Scalar> out = x.value().cwiseProduct(s);
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            const Matrix<Scalar>& v = tp.value(x);
                            Matrix<Scalar> s = v.unaryExpr([](Scalar u) {
                                return Scalar(1) / (Scalar(1) + std::exp(-u));
                            });
                            // d/dx [x*s] = s + x*s*(1-s)
                            Matrix<Scalar> d =
                                (s.array() + v.array() * s.array() * (1 - s.array())).matrix();
                            tp.accumulate(x, g.cwiseProduct(d));
                        });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
    Matrix<Scalar> out = x.value().cwiseMax(Scalar(0));
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            Matrix<Scalar> d = (tp.value(x).array() > Scalar(0))
                                                   .template cast<Scalar>()
                                                   .matrix();
                            tp.accumulate(x, g.cwiseProduct(d));
                        });
}

namespace detail {

// Row-wise softmax with max extraction. -inf entries (additive masks) are
// legal and map to exactly zero weight; NaN and +inf are not checked here.
template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x) {
    Matrix<Scalar> out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar m = x.row(r).maxCoeff();
        out.row(r) = (x.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> x) {
    if (x.cols() < 1) throw ShapeError("softmax_rows: need at least one column");
    Matrix<Scalar> out = detail::softmax_rows_value(x.value());
    return x.tape->emit(
        std::move(out), x.requires_grad(), [x = x.id, out_id = int(x.tape->size())](
                                               Tape<Scalar>& tp, const Matrix<Scalar>& g) {
            const Matrix<Scalar>& y = tp.value(out_id);
            Matrix<Scalar> dx(y.rows(), y.cols());
            for (Index r = 0; r < y.rows(); ++r) {
                const Scalar dot = g.row(r).dot(y.row(r));
                dx.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
            }
            tp.accumulate(x, dx);
        });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(Var<Scalar> x) {
    if (x.cols() < 1) throw ShapeError("log_softmax_rows: need at least one column");
    if (!x.value().allFinite()) {
        throw NumericError("log_softmax_rows: non-finite input");
    }
    Matrix<Scalar> out(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar m = x.value().row(r).maxCoeff();
        const Scalar lse = m + std::log((x.value().row(r).array() - m).exp().sum());
        out.row(r) = x.value().row(r).array() - lse;
    }
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, out_id = int(x.tape->size())](Tape<Scalar>& tp,
                                                                 const Matrix<Scalar>& g) {
                            const Matrix<Scalar>& lp = tp.value(out_id);
                            Matrix<Scalar> dx(lp.rows(), lp.cols());
                            for (Index r = 0; r < lp.rows(); ++r) {
                                const Scalar gsum = g.row(r).sum();
                                dx.row(r) =
                                    g.row(r) - (lp.row(r).array().exp() * gsum).matrix();
                            }
                            tp.accumulate(x, dx);
                        });
}

// Per-row normalization to zero mean / unit variance (population variance,
// eps inside the square root), then the affine transform gain*y + bias.
template <typename Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias, Scalar eps) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({x, gain, bias});
    const Index c = x.cols();
    if (c < 1) throw ShapeError("layer_norm_rows: need at least one column");
    if (eps <= Scalar(0)) throw ContractError("layer_norm_rows: eps must be positive");
    if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
        throw ShapeError("layer_norm_rows: gain/bias must be [1x" + std::to_string(c) +
                         "], got " + shape_str(gain.value()) + " and " + shape_str(bias.value()));
    }
    Matrix<Scalar> out(x.rows(), c);
    for (Index r = 0; r < x.rows(); ++r) {
        const Scalar mu = x.value().row(r).mean();
        const Scalar var = (x.value().row(r).array() - mu).square().mean();
        const Scalar inv = Scalar(1) / std::sqrt(var + eps);
        out.row(r) = (((x.value().row(r).array() - mu) * inv) * gain.value().row(0).array() +
                      bias.value().row(0).array())
                         .matrix();
    }
    return t.emit(std::move(out), detail::any_grad<Scalar>({x, gain, bias}),
                  [x = x.id, ga = gain.id, bi = bias.id, eps](Tape<Scalar>& tp,
                                                              const Matrix<Scalar>& g) {
                      const Matrix<Scalar>& xv = tp.value(x);
                      const Matrix<Scalar>& gv = tp.value(ga);
                      const Index rows = xv.rows(), c = xv.cols();
                      Matrix<Scalar> dx(rows, c);
                      Matrix<Scalar> dgain = Matrix<Scalar>::Zero(1, c);
                      Matrix<Scalar> dbias = Matrix<Scalar>::Zero(1, c);
                      for (Index r = 0; r < rows; ++r) {
                          const Scalar mu = xv.row(r).mean();
                          const Scalar var = (xv.row(r).array() - mu).square().mean();
                          const Scalar inv = Scalar(1) / std::sqrt(var + eps);
                          Eigen::Array<Scalar, 1, Eigen::Dynamic> y =
                              (xv.row(r).array() - mu) * inv;
                          Eigen::Array<Scalar, 1, Eigen::Dynamic> dy =
                              g.row(r).array() * gv.row(0).array();
                          dgain.row(0).array() += g.row(r).array() * y;
                          dbias.row(0).array() += g.row(r).array();
                          const Scalar mdy = dy.mean();
                          const Scalar mdyy = (dy * y).mean();
                          dx.row(r) = (inv * (dy - mdy - y * mdyy)).matrix();
                      }
                      tp.accumulate(x, dx);
                      tp.accumulate(ga, dgain);
                      tp.accumulate(bi, dbias);
                  });
}

template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, const std::vector<int>& ids) {
    Matrix<Scalar> out(static_cast<Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table.rows()) {
            throw ContractError("embedding: id " + std::to_string(ids[i]) + " out of range for " +
                                shape_str(table.value()));
        }
        out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
    }
    return table.tape->emit(std::move(out), table.requires_grad(),
                            [t = table.id, ids](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                                Matrix<Scalar> dt =
                                    Matrix<Scalar>::Zero(tp.value(t).rows(), tp.value(t).cols());
                                for (std::size_t i = 0; i < ids.size(); ++i) {
                                    dt.row(ids[i]) += g.row(static_cast<Index>(i));
                                }
                                tp.accumulate(t, dt);
                            });
}

template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> x, const std::vector<int>& rows) {
    Matrix<Scalar> out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.rows()) {
            throw ContractError("gather_rows: row " + std::to_string(rows[i]) +
                                " out of range for " + shape_str(x.value()));
        }
        out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
    }
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, rows](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            Matrix<Scalar> dx =
                                Matrix<Scalar>::Zero(tp.value(x).rows(), tp.value(x).cols());
                            for (std::size_t i = 0; i < rows.size(); ++i) {
                                dx.row(rows[i]) += g.row(static_cast<Index>(i));
                            }
                            tp.accumulate(x, dx);
                        });
}

template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> x, Index c0, Index n) {
    if (c0 < 0 || n < 0 || c0 + n > x.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c0 + n) +
                         ") out of range for " + shape_str(x.value()));
    }
    Matrix<Scalar> out = x.value().middleCols(c0, n);
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, c0, n](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            Matrix<Scalar> dx =
                                Matrix<Scalar>::Zero(tp.value(x).rows(), tp.value(x).cols());
                            dx.middleCols(c0, n) = g;
                            tp.accumulate(x, dx);
                        });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    Tape<Scalar>& t = *parts.front().tape;
    Index total = 0;
    bool rg = false;
    for (const Var<Scalar>& p : parts) {
        if (p.tape != &t) throw ContractError("concat_cols: operands on different tapes");
        if (p.rows() != parts.front().rows()) {
            throw ShapeError("concat_cols: row mismatch, " + shape_str(p.value()) + " vs " +
                             shape_str(parts.front().value()));
        }
        total += p.cols();
        rg = rg || p.requires_grad();
    }
    Matrix<Scalar> out(parts.front().rows(), total);
    Index c = 0;
    std::vector<int> ids;
    std::vector<Index> widths;
    for (const Var<Scalar>& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        ids.push_back(p.id);
        widths.push_back(p.cols());
        c += p.cols();
    }
    return t.emit(std::move(out), rg,
                  [ids, widths](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      Index c = 0;
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                          tp.accumulate(ids[i], g.middleCols(c, widths[i]));
                          c += widths[i];
                      }
                  });
}

// im2row over the time axis: row t of the output is the concatenation of
// x[t*stride - pad + j] for j in [0, kernel). Out-of-range reads are zero.
template <typename Scalar>
Var<Scalar> time_patches(Var<Scalar> x, int kernel, int stride, int pad) {
    const Index tin = x.rows(), c = x.cols();
    if (kernel < 1 || stride < 1 || pad < 0) throw ContractError("time_patches: bad geometry");
    const Index tout = (tin + 2 * pad - kernel) / stride + 1;
    if (tin + 2 * pad < kernel) {
        throw ShapeError("time_patches: input of " + std::to_string(tin) +
                         " frames too short for kernel " + std::to_string(kernel));
    }
    Matrix<Scalar> out = Matrix<Scalar>::Zero(tout, static_cast<Index>(kernel) * c);
    for (Index t = 0; t < tout; ++t) {
        for (int j = 0; j < kernel; ++j) {
            const Index src = t * stride - pad + j;
            if (src >= 0 && src < tin) out.row(t).segment(Index(j) * c, c) = x.value().row(src);
        }
    }
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, kernel, stride, pad](Tape<Scalar>& tp,
                                                        const Matrix<Scalar>& g) {
                            const Index tin = tp.value(x).rows(), c = tp.value(x).cols();
                            Matrix<Scalar> dx = Matrix<Scalar>::Zero(tin, c);
                            for (Index t = 0; t < g.rows(); ++t) {
                                for (int j = 0; j < kernel; ++j) {
                                    const Index src = t * stride - pad + j;
                                    if (src >= 0 && src < tin) {
                                        dx.row(src) += g.row(t).segment(Index(j) * c, c);
                                    }
                                }
                            }
                            tp.accumulate(x, dx);
                        });
}

// Per-channel 1-D convolution over time with 'same' zero padding; kernel
// weights are [k x C], one column per channel. k must be odd.
template <typename Scalar>
Var<Scalar> depthwise_conv1d(Var<Scalar> x, Var<Scalar> w, Var<Scalar> b) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({x, w, b});
    const Index tin = x.rows(), c = x.cols(), k = w.rows();
    if (k % 2 == 0) throw ContractError("depthwise_conv1d: kernel size must be odd");
    if (w.cols() != c || b.rows() != 1 || b.cols() != c) {
        throw ShapeError("depthwise_conv1d: weights " + shape_str(w.value()) + " / bias " +
                         shape_str(b.value()) + " do not match input " + shape_str(x.value()));
    }
    const Index off = (k - 1) / 2;
    Matrix<Scalar> out(tin, c);
    out.rowwise() = b.value().row(0);
    for (Index tt = 0; tt < tin; ++tt) {
        for (Index j = 0; j < k; ++j) {
            const Index src = tt + j - off;
            if (src >= 0 && src < tin) {
                out.row(tt).array() += x.value().row(src).array() * w.value().row(j).array();
            }
        }
    }
    return t.emit(std::move(out), detail::any_grad<Scalar>({x, w, b}),
                  [x = x.id, w = w.id, b = b.id, off](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                      const Matrix<Scalar>& xv = tp.value(x);
                      const Matrix<Scalar>& wv = tp.value(w);
                      const Index tin = xv.rows(), c = xv.cols(), k = wv.rows();
                      Matrix<Scalar> dx = Matrix<Scalar>::Zero(tin, c);
                      Matrix<Scalar> dw = Matrix<Scalar>::Zero(k, c);
                      for (Index tt = 0; tt < tin; ++tt) {
                          for (Index j = 0; j < k; ++j) {
                              const Index src = tt + j - off;
                              if (src >= 0 && src < tin) {
                                  dx.row(src).array() += g.row(tt).array() * wv.row(j).array();
                                  dw.row(j).array() += g.row(tt).array() * xv.row(src).array();
                              }
                          }
                      }
                      tp.accumulate(x, dx);
                      tp.accumulate(w, dw);
                      tp.accumulate(b, g.colwise().sum());
                  });
}

// out = base; out[positions[i]] += contrib[i]. Duplicate positions sum.
template <typename Scalar>
Var<Scalar> scatter_add_rows(Var<Scalar> base, Var<Scalar> contrib,
                             const std::vector<int>& positions) {
    Tape<Scalar>& t = detail::same_tape<Scalar>({base, contrib});
    if (contrib.rows() != static_cast<Index>(positions.size()) || contrib.cols() != base.cols()) {
        throw ShapeError("scatter_add_rows: contributions " + shape_str(contrib.value()) +
                         " do not match " + std::to_string(positions.size()) + " positions over " +
                         shape_str(base.value()));
    }
    for (int p : positions) {
        if (p < 0 || p >= base.rows()) {
            throw ContractError("scatter_add_rows: position " + std::to_string(p) +
                                " out of range for " + shape_str(base.value()));
        }
    }
    Matrix<Scalar> out = base.value();
    for (std::size_t i = 0; i < positions.size(); ++i) {
        out.row(positions[i]) += contrib.value().row(static_cast<Index>(i));
    }
    return t.emit(std::move(out), detail::any_grad<Scalar>({base, contrib}),
                  [b = base.id, c = contrib.id, positions](Tape<Scalar>& tp,
                                                           const Matrix<Scalar>& g) {
                      tp.accumulate(b, g);
                      Matrix<Scalar> dc(static_cast<Index>(positions.size()), g.cols());
                      for (std::size_t i = 0; i < positions.size(); ++i) {
                          dc.row(static_cast<Index>(i)) = g.row(positions[i]);
                      }
                      tp.accumulate(c, dc);
                  });
}

// Select scattered entries (row, col) into an [n x 1] column, e.g. the
// log-probabilities of target ids.
template <typename Scalar>
Var<Scalar> pick_entries(Var<Scalar> x, const std::vector<std::pair<int, int>>& entries) {
    Matrix<Scalar> out(static_cast<Index>(entries.size()), 1);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto [r, c] = entries[i];
        if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols()) {
            throw ContractError("pick_entries: (" + std::to_string(r) + "," + std::to_string(c) +
                                ") out of range for " + shape_str(x.value()));
        }
        out(static_cast<Index>(i), 0) = x.value()(r, c);
    }
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, entries](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            Matrix<Scalar> dx =
                                Matrix<Scalar>::Zero(tp.value(x).rows(), tp.value(x).cols());
                            for (std::size_t i = 0; i < entries.size(); ++i) {
                                dx(entries[i].first, entries[i].second) +=
                                    g(static_cast<Index>(i), 0);
                            }
                            tp.accumulate(x, dx);
                        });
}

template <typename Scalar>
Var<Scalar> sum_all(Var<Scalar> x) {
    Matrix<Scalar> out(1, 1);
    out(0, 0) = x.value().sum();
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            tp.accumulate(x, Matrix<Scalar>::Constant(tp.value(x).rows(),
                                                                      tp.value(x).cols(),
                                                                      g(0, 0)));
                        });
}

template <typename Scalar>
Var<Scalar> mean_all(Var<Scalar> x) {
    if (x.value().size() == 0) throw ContractError("mean_all: empty tensor");
    return scale(sum_all(x), Scalar(1) / Scalar(x.value().size()));
}

// Inverted dropout; identity when p == 0. Draws its mask from the tape rng.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, Scalar p, bool training) {
    if (p < Scalar(0) || p >= Scalar(1)) throw ContractError("dropout: p must be in [0, 1)");
    if (!training || p == Scalar(0)) return x;
    if (x.tape->rng == nullptr) throw ContractError("dropout: tape has no rng attached");
    Matrix<Scalar> mask(x.rows(), x.cols());
    const Scalar keep = Scalar(1) - p;
    for (Index r = 0; r < mask.rows(); ++r) {
        for (Index c = 0; c < mask.cols(); ++c) {
            mask(r, c) = (x.tape->rng->uniform() < static_cast<double>(keep))
                             ? Scalar(1) / keep
                             : Scalar(0);
        }
    }
    Matrix<Scalar> out = x.value().cwiseProduct(mask);
    return x.tape->emit(std::move(out), x.requires_grad(),
                        [x = x.id, mask](Tape<Scalar>& tp, const Matrix<Scalar>& g) {
                            tp.accumulate(x, g.cwiseProduct(mask));
                        });
}

}  // namespace narslu
