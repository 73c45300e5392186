#pragma once

#include <functional>
#include <memory>

#include "afnet/common.hpp"

namespace afnet {

// Dense N-d tensor of doubles, row-major, with an optional gradient buffer.
// Tensor is a shared handle: copies alias the same storage, which is what
// lets tape closures and user code see one gradient. Data is mutable only
// through explicit accessors; shape is fixed at construction (reshape
// returns a new handle over copied data).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return storage().shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(storage().data.size()); }
    std::int64_t dim(std::size_t i) const { return storage().shape.at(i); }
    std::size_t rank() const { return storage().shape.size(); }

    std::vector<double>& data() { return storage().data; }
    const std::vector<double>& data() const { return storage().data; }

    bool requires_grad() const { return storage().requires_grad; }
    void set_requires_grad(bool v) { storage().requires_grad = v; }

    // Gradient buffer. Absent until the first accumulation; callers that
    // treat "absent" as zero should test has_grad() first.
    bool has_grad() const { return !storage().grad.empty(); }
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void accumulate_grad(const std::vector<double>& g);
    void zero_grad();   // keeps the buffer, fills with zeros (allocates if absent)
    void clear_grad();  // drops the buffer entirely

    // True when both handles alias the same storage.
    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    // Element count preserving reshape; copies data into a fresh tensor.
    Tensor reshaped(const Shape& new_shape) const;

    double value() const;  // scalar tensors only

private:
    struct Storage {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Storage& storage() {
        if (!d_) throw ContractError("Tensor: undefined handle");
        return *d_;
    }
    const Storage& storage() const {
        if (!d_) throw ContractError("Tensor: undefined handle");
        return *d_;
    }

    std::shared_ptr<Storage> d_;
};

// Eagerly recorded reverse-mode tape. Each op pushes one node whose closure
// propagates the output gradient into the input gradients; nodes are replayed
// exactly once, newest first. Ops append in creation order, which is a
// topological order of the graph by construction.
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    friend void backward(Tape& tape, const Tensor& loss);

private:
    std::vector<std::function<void()>> nodes_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients land
// on every requires_grad tensor reachable from the loss; tensors that were
// never touched keep no gradient buffer.
void backward(Tape& tape, const Tensor& loss);

}  // namespace afnet
