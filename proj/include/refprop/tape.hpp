// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "refprop/tensor.hpp"

namespace refprop {

/**
 * Define-by-run reverse-mode tape. Each differentiable op appends one step
 * while computing its forward value; backward() runs the steps in reverse.
 *
 * The tape owns all gradient buffers, keyed by tensor storage. Keeping them
 * out of the tensors lets several tapes differentiate disjoint graphs over
 * the same parameters concurrently (one tape per worker thread).
 *
 * A tape is single-use: it is rebuilt every forward pass and backward() may
 * run at most once. reset() returns it to an empty reusable state.
 */
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// When disabled, ops compute values only; nothing is recorded.
    bool enabled() const { return enabled_; }
    void set_enabled(bool v) { enabled_ = v; }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    /// Gradient buffer for t, created zero-filled on first use.
    std::span<T> ensure_grad(const Tensor<T>& t) {
        auto& g = grads_[t.storage()];
        if (g.empty()) g.assign(t.numel(), T(0));
        return {g.data(), g.size()};
    }

    /// Gradient of t accumulated by the last backward(). Throws if t never
    /// participated in a recorded op.
    std::span<const T> grad(const Tensor<T>& t) const {
        auto it = grads_.find(t.storage());
        if (it == grads_.end())
            throw std::runtime_error("Tape::grad: tensor has no gradient on this tape");
        return {it->second.data(), it->second.size()};
    }

    std::span<T> grad_mut(const Tensor<T>& t) {
        auto it = grads_.find(t.storage());
        if (it == grads_.end())
            throw std::runtime_error("Tape::grad: tensor has no gradient on this tape");
        return {it->second.data(), it->second.size()};
    }

    bool has_grad(const Tensor<T>& t) const { return grads_.count(t.storage()) != 0; }

    /// Seeds d(loss)/d(loss) = 1 and runs recorded steps newest-first.
    /// Requirements: loss is scalar, requires grad, and was recorded here
    /// (or is itself a leaf); the tape has not been consumed.
    void backward(const Tensor<T>& loss) {
        if (consumed_)
            throw std::runtime_error("Tape::backward: tape already consumed; rebuild the graph");
        if (!loss.defined() || loss.numel() != 1)
            throw std::runtime_error("Tape::backward: loss must be a defined scalar");
        if (!loss.requires_grad())
            throw std::runtime_error("Tape::backward: loss does not require grad");
        if (!steps_.empty() && grads_.find(loss.storage()) == grads_.end())
            throw std::runtime_error(
                "Tape::backward: loss was not produced by ops recorded on this tape");
        ensure_grad(loss)[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    bool consumed() const { return consumed_; }
    std::size_t step_count() const { return steps_.size(); }

    /// Drops all steps and gradient buffers; the tape is fresh again.
    void reset() {
        steps_.clear();
        grads_.clear();
        consumed_ = false;
    }

private:
    std::unordered_map<const TensorImpl<T>*, std::vector<T>> grads_;
    std::vector<std::function<void()>> steps_;
    bool enabled_ = true;
    bool consumed_ = false;
};

/// True when the op must record a backward step for these inputs.
template <typename T>
inline bool tape_should_record(const Tape<T>& tape,
                               std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape.enabled()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

}  // namespace refprop
