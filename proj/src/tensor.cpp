#include "afnet/tensor.hpp"

namespace afnet {

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    check_shape_positive(shape, "Tensor");
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = shape;
    t.d_->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    check_shape_positive(shape, "Tensor");
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<Storage>();
    t.d_->shape = shape;
    t.d_->data = std::move(data);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

std::vector<double>& Tensor::grad() {
    auto& s = storage();
    if (s.grad.empty())
        throw ContractError("Tensor: gradient requested but never accumulated");
    return s.grad;
}

const std::vector<double>& Tensor::grad() const {
    const auto& s = storage();
    if (s.grad.empty())
        throw ContractError("Tensor: gradient requested but never accumulated");
    return s.grad;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    auto& s = storage();
    if (g.size() != s.data.size())
        throw ShapeError("Tensor: gradient length mismatch");
    if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) s.grad[i] += g[i];
}

void Tensor::zero_grad() {
    auto& s = storage();
    s.grad.assign(s.data.size(), 0.0);
}

void Tensor::clear_grad() { storage().grad.clear(); }

Tensor Tensor::reshaped(const Shape& new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError("Tensor: reshape " + shape_str(shape()) + " -> " +
                         shape_str(new_shape) + " changes element count");
    return from_data(new_shape, data(), false);
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("Tensor: value() on non-scalar " + shape_str(shape()));
    return data()[0];
}

void backward(Tape& tape, const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    Tensor seed = loss;
    seed.accumulate_grad({1.0});
    for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
}

}  // namespace afnet
