#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rescr/tensor.hpp"

namespace rescr {

template <typename T>
class Tape;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::size_t id = 0;
    const char* op = "constant";
    Tape<T>* tape = nullptr;
    // Reads this node's grad and accumulates into the inputs it captured.
    std::function<void(const Tensor<T>&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a value in the computation graph. Cheap to copy.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool valid() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t rank() const { return node_->value.rank(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::size_t id() const { return node_->id; }
    Tape<T>* tape() const { return node_ ? node_->tape : nullptr; }

    // Null when no gradient reached this node.
    const Tensor<T>* grad() const {
        return node_ && !node_->grad.empty() ? &node_->grad : nullptr;
    }

    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Value with no gradient and no tape. Intermediates built only from
// constants are never recorded, so inference frees them eagerly.
template <typename T>
Var<T> constant(Tensor<T> value) {
    if (!value.all_finite()) throw NumericError("non-finite value in constant");
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var<T>(std::move(n));
}

/// Records differentiable operations in execution order and replays them
/// in reverse to accumulate gradients.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(const Tensor<T>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Tensor<T> value) {
        if (!value.all_finite()) throw NumericError("non-finite value in leaf");
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        n->op = "leaf";
        n->tape = this;
        n->id = next_id_++;
        leaves_.push_back(n);
        return Var<T>(std::move(n));
    }

    Var<T> record(const char* op, Tensor<T> value, BackwardFn fn) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = true;
        n->op = op;
        n->tape = this;
        n->id = next_id_++;
        n->backward = std::move(fn);
        records_.push_back(n);
        return Var<T>(std::move(n));
    }

    // Reverse-topological sweep from a scalar root. May run once per reset().
    void backward(const Var<T>& loss) {
        if (!loss.valid() || !loss.requires_grad() || loss.tape() != this)
            throw ValueError("backward: root is detached from this tape");
        if (loss.value().size() != 1)
            throw ShapeError("backward: root must be scalar, got " + to_string(loss.shape()));
        if (backward_done_) throw ValueError("backward: already run on this tape; call reset() first");
        backward_done_ = true;
        loss.node()->grad_buffer()[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            Node<T>& n = **it;
            if (n.grad.empty() || !n.backward) continue;
            n.backward(n.grad);
        }
    }

    void reset() {
        records_.clear();
        leaves_.clear();
        backward_done_ = false;
        next_id_ = 0;
    }

    std::size_t num_records() const noexcept { return records_.size(); }
    std::size_t num_leaves() const noexcept { return leaves_.size(); }

    // Node ids of recorded ops, in recording order.
    std::vector<std::size_t> record_ids() const {
        std::vector<std::size_t> ids;
        ids.reserve(records_.size());
        for (const auto& r : records_) ids.push_back(r->id);
        return ids;
    }

private:
    std::vector<std::shared_ptr<Node<T>>> records_;
    std::vector<std::shared_ptr<Node<T>>> leaves_;
    std::size_t next_id_ = 0;
    bool backward_done_ = false;
};

}  // namespace rescr
