#pragma once

#include <cstdint>

#include "afnet/tensor.hpp"

namespace afnet {

// Differentiable primitives. Every op takes the recording tape as its first
// argument; pass nullptr to run forward-only (no node is recorded and the
// output does not require grad). An op records iff a tape is given and at
// least one input requires grad.

enum class PoolMode { Max, Avg };
enum class ActKind { Relu, Sigmoid };

// Running statistics of one batch-norm layer. The op updates mean/var in
// place during training-mode forward passes; both tensors have shape [C].
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormState make(std::int64_t channels);
};

struct CrossEntropyResult {
    Tensor loss;   // scalar, mean over the batch
    Tensor probs;  // [N,K], each row sums to 1
};

// Deterministic normal init; identical (shape, mean, std, seed) gives a
// bit-identical tensor.
Tensor init_normal(const Shape& shape, double mean, double stddev, std::uint64_t seed,
                   bool requires_grad = false);

// Cross-correlation with zero padding: x [N,Cin,H,W], w [Cout,Cin,kh,kw],
// b [Cout]. Output spatial size floor((H+2p-kh)/stride)+1.
Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
              std::int64_t stride, std::int64_t pad);

// Windowed max/avg pool. Padding cells never win a max window; avg divides
// by the full kh*kw window including padding.
Tensor pool2d(Tape* tape, const Tensor& x, PoolMode mode, std::int64_t kh, std::int64_t kw,
              std::int64_t stride, std::int64_t pad = 0);

// Whole-plane reduction to [N,C,1,1].
Tensor global_pool(Tape* tape, const Tensor& x, PoolMode mode);

Tensor activation(Tape* tape, const Tensor& x, ActKind kind);
inline Tensor relu(Tape* tape, const Tensor& x) { return activation(tape, x, ActKind::Relu); }
inline Tensor sigmoid(Tape* tape, const Tensor& x) { return activation(tape, x, ActKind::Sigmoid); }

// Elementwise add/mul. b may equal a's shape or be broadcastable to it by
// the right-aligned rule (missing or size-1 dims of b repeat); gradients of
// b sum over the broadcast axes.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);

// Affine map x[N,D] * w[D,K] + b[K].
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b);

// Batch normalization over [N,C,H,W]. Training mode normalizes with batch
// statistics (biased variance) and folds them into the running state; eval
// mode normalizes with the running state.
Tensor batchnorm2d(Tape* tape, const Tensor& x, const Tensor& scale, const Tensor& shift,
                   BatchNormState& state, bool training);

// Mean over the batch of -log softmax(logits)[label].
CrossEntropyResult softmax_cross_entropy(Tape* tape, const Tensor& logits,
                                         const std::vector<int>& labels);

// Plumbing ops used by the model graph.
Tensor reshape(Tape* tape, const Tensor& x, const Shape& new_shape);
Tensor concat_cols(Tape* tape, const Tensor& a, const Tensor& b);  // [N,Da]+[N,Db] -> [N,Da+Db]
Tensor softmax_rows(Tape* tape, const Tensor& x);                  // [N,K]
Tensor log_elem(Tape* tape, const Tensor& x);
Tensor scale(Tape* tape, const Tensor& x, double c);
Tensor select_scalar(Tape* tape, const Tensor& x, std::int64_t flat_index);
Tensor sum_all(Tape* tape, const Tensor& x);

}  // namespace afnet
