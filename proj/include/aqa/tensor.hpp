// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aqa/common.hpp"

namespace aqa {

// Reverse-mode tape node. A tensor handle (TensorT) is a shared pointer to
// one of these; ops build new nodes eagerly and record a backprop closure.
// Nodes are immutable after construction except for grad accumulation.
template <class Real>
struct TensorNodeT {
    std::vector<int> shape;
    std::vector<Real> value;
    std::vector<Real> grad; // empty until first needed
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNodeT>> parents;
    // Reads this->grad, accumulates into parents' grads. The closure holds
    // raw parent pointers; ownership lives in `parents`, so no cycles.
    std::function<void(TensorNodeT&)> backprop;

    bool is_leaf() const { return parents.empty(); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), Real(0));
    }
};

template <class Real>
class TensorT {
public:
    using Node = TensorNodeT<Real>;

    TensorT() = default;

    static TensorT from(std::vector<int> shape, std::vector<Real> values) {
        if (numel(shape) != static_cast<std::int64_t>(values.size()))
            throw Error(cat("tensor: shape ", shape_str(shape), " wants ", numel(shape),
                            " values, got ", values.size()));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        return TensorT(std::move(n));
    }

    static TensorT full(std::vector<int> shape, Real v) {
        std::vector<Real> vals(static_cast<size_t>(numel(shape)), v);
        return from(std::move(shape), std::move(vals));
    }

    static TensorT zeros(std::vector<int> shape) { return full(std::move(shape), Real(0)); }

    // rank-0
    static TensorT scalar(Real v) { return from({}, {v}); }

    static TensorT wrap(std::shared_ptr<Node> n) { return TensorT(std::move(n)); }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }
    const std::vector<Real>& value() const { return n_->value; }
    std::vector<Real>& mutable_value() { return n_->value; }

    std::vector<Real>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<Real>& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.assign(n_->value.size(), Real(0)); }

    Real item() const {
        if (size() != 1)
            throw Error(cat("item(): tensor has ", size(), " elements, shape ", shape_str(shape())));
        return n_->value[0];
    }

    Node* node() const { return n_.get(); }
    std::shared_ptr<Node> handle() const { return n_; }

private:
    explicit TensorT(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;
};

template <class Real>
TensorT<Real> custom_op(const char* op, std::vector<int> shape, std::vector<Real> value,
                        const std::vector<TensorT<Real>>& parents,
                        std::function<void(TensorNodeT<Real>&)> backprop) {
    if (numel(shape) != static_cast<std::int64_t>(value.size()))
        throw Error(cat(op, ": shape ", shape_str(shape), " wants ", numel(shape),
                        " values, got ", value.size()));
    auto n = std::make_shared<TensorNodeT<Real>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.handle());
    n->backprop = std::move(backprop);
    return TensorT<Real>::wrap(std::move(n));
}

// Accumulates d(loss)/d(node) into every node reachable from `loss`.
// Leaf grads persist across calls (repeated backward accumulates); grads of
// interior nodes are reset per pass.
template <class Real>
void backward(const TensorT<Real>& loss) {
    using Node = TensorNodeT<Real>;
    if (!loss.defined()) throw Error("backward: undefined tensor");
    if (loss.size() != 1)
        throw Error(cat("backward: loss must be scalar, got shape ", shape_str(loss.shape())));

    // Iterative post-order DFS: every node appears after all of its parents,
    // so the reversed order processes each consumer before its inputs.
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node(), 0});
    seen.insert(loss.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Node* p = f.n->parents[f.next++].get();
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    for (Node* n : topo) {
        if (n->is_leaf())
            n->ensure_grad();
        else
            n->grad.assign(n->value.size(), Real(0));
    }
    loss.node()->grad[0] += Real(1);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

using Tensor = TensorT<double>;

} // namespace aqa
