#include "afnet/adam.hpp"

#include <cmath>

namespace afnet {

Adam::Adam(std::vector<Tensor> params, double learning_rate, double beta1, double beta2,
           double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
    if (lr_ < 0) throw ContractError("Adam: learning rate must be non-negative");
    if (beta1_ <= 0 || beta1_ >= 1 || beta2_ <= 0 || beta2_ >= 1)
        throw ContractError("Adam: betas must lie in (0,1)");
    slots_.reserve(params.size());
    for (auto& p : params) {
        Slot s;
        s.param = p;
        s.m.assign(static_cast<std::size_t>(p.numel()), 0.0);
        s.v.assign(static_cast<std::size_t>(p.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void Adam::step() {
    for (auto& s : slots_)
        if (!s.param.has_grad())
            throw ContractError("Adam: parameter is missing its gradient");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
        auto& p = s.param.data();
        const auto& g = s.param.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

}  // namespace afnet
