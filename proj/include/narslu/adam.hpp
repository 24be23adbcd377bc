#pragma once

#include "narslu/common.hpp"
#include "narslu/params.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace narslu {

template <typename Scalar>
struct AdamConfig {
    Scalar lr = Scalar(1e-3);
    Scalar beta1 = Scalar(0.9);
    Scalar beta2 = Scalar(0.999);
    Scalar eps = Scalar(1e-8);
};

template <typename Scalar>
struct AdamState {
    std::map<std::string, Matrix<Scalar>> m;
    std::map<std::string, Matrix<Scalar>> v;
    std::int64_t step = 0;
};

// One bias-corrected Adam update. Parameters without an entry in grads are
// treated as zero-gradient. Deterministic given inputs.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, const std::map<std::string, Matrix<Scalar>>& grads,
               AdamState<Scalar>& state, const AdamConfig<Scalar>& cfg) {
    state.step += 1;
    const Scalar bc1 = Scalar(1) - std::pow(cfg.beta1, static_cast<Scalar>(state.step));
    const Scalar bc2 = Scalar(1) - std::pow(cfg.beta2, static_cast<Scalar>(state.step));
    for (auto& [name, p] : params.tensors()) {
        Matrix<Scalar>& m = state.m.try_emplace(name, Matrix<Scalar>::Zero(p.rows(), p.cols()))
                                .first->second;
        Matrix<Scalar>& v = state.v.try_emplace(name, Matrix<Scalar>::Zero(p.rows(), p.cols()))
                                .first->second;
        if (m.rows() != p.rows() || m.cols() != p.cols()) {
            throw ShapeError("adam_step: state " + shape_str(m) + " does not match param " +
                             name + " " + shape_str(p));
        }
        auto git = grads.find(name);
        if (git != grads.end() && git->second.size() != 0) {
            const Matrix<Scalar>& g = git->second;
            if (g.rows() != p.rows() || g.cols() != p.cols()) {
                throw ShapeError("adam_step: grad " + shape_str(g) + " does not match param " +
                                 name + " " + shape_str(p));
            }
            m = cfg.beta1 * m + (Scalar(1) - cfg.beta1) * g;
            v = (cfg.beta2 * v.array() + (Scalar(1) - cfg.beta2) * g.array().square()).matrix();
        } else {
            m *= cfg.beta1;
            v *= cfg.beta2;
        }
        p.array() -=
            cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
    }
}

}  // namespace narslu
