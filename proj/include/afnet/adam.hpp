#pragma once

#include "afnet/tensor.hpp"

namespace afnet {

// Adam with bias correction. Moment buffers live alongside the parameter
// handles they track; step() requires every parameter to carry a gradient.
class Adam {
public:
    Adam(std::vector<Tensor> params, double learning_rate, double beta1 = 0.9,
         double beta2 = 0.999, double epsilon = 1e-8);

    void step();
    void zero_grad();

    std::int64_t steps() const { return t_; }
    double learning_rate() const { return lr_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Slot> slots_;
    std::int64_t t_ = 0;
    double lr_, beta1_, beta2_, eps_;
};

}  // namespace afnet
