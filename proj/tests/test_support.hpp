#pragma once

// Test-only reference machinery: naive nested-loop oracles and a central
// finite-difference gradient checker. Nothing here calls back into the
// library code paths it is used to verify.

#include <cmath>
#include <functional>
#include <vector>

#include "afnet/ops.hpp"
#include "afnet/rng.hpp"
#include "afnet/tensor.hpp"

namespace afnet::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.data()) v = lo + (hi - lo) * rng.next_double();
    return t;
}

// Random values bounded away from zero, for checking gradients of kinked
// functions (relu) with finite differences.
inline Tensor random_tensor_away_from_zero(const Shape& shape, Rng& rng, double margin = 0.05) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.data()) {
        double u = rng.next_double() * 2.0 - 1.0;
        v = u >= 0 ? margin + u : -margin + u;
    }
    return t;
}

// Six nested loops, straight from the definition of padded cross-correlation.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                           std::int64_t stride, std::int64_t pad) {
    const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const std::int64_t OH = (H + 2 * pad - KH) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - KW) / stride + 1;
    Tensor out = Tensor::zeros({N, Cout, OH, OW});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Cout; ++co)
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double acc = b.data()[static_cast<std::size_t>(co)];
                    for (std::int64_t ci = 0; ci < Cin; ++ci)
                        for (std::int64_t kh = 0; kh < KH; ++kh)
                            for (std::int64_t kw = 0; kw < KW; ++kw) {
                                const std::int64_t ih = oh * stride - pad + kh;
                                const std::int64_t iw = ow * stride - pad + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.data()[static_cast<std::size_t>(((n * Cin + ci) * H + ih) * W + iw)] *
                                       w.data()[static_cast<std::size_t>(((co * Cin + ci) * KH + kh) * KW + kw)];
                            }
                    out.data()[static_cast<std::size_t>(((n * Cout + co) * OH + oh) * OW + ow)] = acc;
                }
    return out;
}

inline Tensor naive_pool2d(const Tensor& x, PoolMode mode, std::int64_t kh, std::int64_t kw,
                           std::int64_t stride, std::int64_t pad = 0) {
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - kw) / stride + 1;
    Tensor out = Tensor::zeros({N, C, OH, OW});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    bool seen = false;
                    double best = 0.0, acc = 0.0;
                    for (std::int64_t i = 0; i < kh; ++i)
                        for (std::int64_t j = 0; j < kw; ++j) {
                            const std::int64_t ih = oh * stride - pad + i;
                            const std::int64_t iw = ow * stride - pad + j;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            const double v =
                                x.data()[static_cast<std::size_t>(((n * C + c) * H + ih) * W + iw)];
                            acc += v;
                            if (!seen || v > best) best = v;
                            seen = true;
                        }
                    out.data()[static_cast<std::size_t>(((n * C + c) * OH + oh) * OW + ow)] =
                        mode == PoolMode::Max ? (seen ? best : 0.0)
                                              : acc / static_cast<double>(kh * kw);
                }
    return out;
}

inline Tensor naive_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::int64_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
    Tensor out = Tensor::zeros({N, K});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t k = 0; k < K; ++k) {
            double acc = b.data()[static_cast<std::size_t>(k)];
            for (std::int64_t d = 0; d < D; ++d)
                acc += x.data()[static_cast<std::size_t>(n * D + d)] *
                       w.data()[static_cast<std::size_t>(d * K + k)];
            out.data()[static_cast<std::size_t>(n * K + k)] = acc;
        }
    return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// loss_fn runs the forward pass on the current contents of the inputs and
// returns a scalar; a null tape means forward-only. Central differences at
// eps against reverse-mode, relative error with a small absolute escape.
struct GradCheckResult {
    double worst_rel = 0.0;
    std::int64_t checked = 0;
    bool ok = true;
};

inline GradCheckResult check_gradients(const std::function<Tensor(Tape*)>& loss_fn,
                                       std::vector<Tensor> inputs, double eps = 1e-5,
                                       double tol = 1e-4, double abs_escape = 1e-8) {
    for (auto& t : inputs) t.clear_grad();
    Tape tape;
    Tensor loss = loss_fn(&tape);
    backward(tape, loss);

    GradCheckResult res;
    for (auto& t : inputs) {
        std::vector<double> ad(t.numel(), 0.0);
        if (t.has_grad()) ad = t.grad();
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            const double saved = t.data()[static_cast<std::size_t>(i)];
            t.data()[static_cast<std::size_t>(i)] = saved + eps;
            const double up = loss_fn(nullptr).value();
            t.data()[static_cast<std::size_t>(i)] = saved - eps;
            const double dn = loss_fn(nullptr).value();
            t.data()[static_cast<std::size_t>(i)] = saved;
            const double fd = (up - dn) / (2.0 * eps);
            const double a = ad[static_cast<std::size_t>(i)];
            const double diff = std::abs(a - fd);
            const double rel = diff / std::max({std::abs(a), std::abs(fd), 1e-12});
            res.checked++;
            if (diff > abs_escape && rel > tol) {
                res.ok = false;
                res.worst_rel = std::max(res.worst_rel, rel);
            }
        }
    }
    return res;
}

}  // namespace afnet::testing
