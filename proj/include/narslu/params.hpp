#pragma once

#include "narslu/autodiff.hpp"
#include "narslu/common.hpp"

#include <map>
#include <string>

namespace narslu {

// All trainable arrays of a model, addressable by name. std::map keeps the
// iteration order deterministic for initialization, checkpointing and the
// optimizer.
template <typename Scalar>
class ModelParams {
public:
    Matrix<Scalar>& add(const std::string& name, Index rows, Index cols) {
        auto [it, inserted] = tensors_.emplace(name, Matrix<Scalar>::Zero(rows, cols));
        if (!inserted) throw ContractError("ModelParams::add: duplicate name " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    Matrix<Scalar>& at(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw ContractError("ModelParams: unknown name " + name);
        return it->second;
    }

    const Matrix<Scalar>& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw ContractError("ModelParams: unknown name " + name);
        return it->second;
    }

    std::map<std::string, Matrix<Scalar>>& tensors() { return tensors_; }
    const std::map<std::string, Matrix<Scalar>>& tensors() const { return tensors_; }

    std::size_t count() const { return tensors_.size(); }

    template <typename T>
    ModelParams<T> cast() const {
        ModelParams<T> out;
        for (const auto& [name, m] : tensors_) {
            out.add(name, m.rows(), m.cols()) = m.template cast<T>();
        }
        return out;
    }

private:
    std::map<std::string, Matrix<Scalar>> tensors_;
};

// Parameters registered on a tape as reference leaves; one bind per
// forward/backward round.
template <typename Scalar>
struct BoundParams {
    Tape<Scalar>* tape = nullptr;
    std::map<std::string, Var<Scalar>> vars;

    Var<Scalar> operator[](const std::string& name) const {
        auto it = vars.find(name);
        if (it == vars.end()) throw ContractError("BoundParams: unknown name " + name);
        return it->second;
    }
};

template <typename Scalar>
BoundParams<Scalar> bind_params(Tape<Scalar>& tape, const ModelParams<Scalar>& params,
                                bool requires_grad = true) {
    BoundParams<Scalar> bound;
    bound.tape = &tape;
    for (const auto& [name, m] : params.tensors()) {
        bound.vars.emplace(name, tape.leaf_ref(&m, requires_grad));
    }
    return bound;
}

// Gradients of every bound parameter after backward(); untouched leaves
// report zeros.
template <typename Scalar>
std::map<std::string, Matrix<Scalar>> collect_grads(const BoundParams<Scalar>& bound) {
    std::map<std::string, Matrix<Scalar>> grads;
    for (const auto& [name, var] : bound.vars) {
        grads.emplace(name, var.grad());
    }
    return grads;
}

}  // namespace narslu
