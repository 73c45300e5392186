#include "afnet/ops.hpp"

#include <algorithm>
#include <limits>
#include <cmath>

#include "afnet/rng.hpp"

namespace afnet {

namespace {

bool recording(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape) return false;
    for (const Tensor* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

void require_rank(const Tensor& t, std::size_t r, const char* who) {
    if (t.rank() != r)
        throw ShapeError(std::string(who) + ": expected rank " + std::to_string(r) +
                         ", got shape " + shape_str(t.shape()));
}

// Strides of `b` aligned right against `a_shape`; 0 marks a broadcast axis.
// Throws unless b is right-aligned broadcastable to a.
std::vector<std::int64_t> broadcast_strides(const Shape& a_shape, const Shape& b_shape,
                                            const char* who) {
    if (b_shape.size() > a_shape.size())
        throw ShapeError(std::string(who) + ": operand " + shape_str(b_shape) +
                         " has higher rank than " + shape_str(a_shape));
    std::size_t off = a_shape.size() - b_shape.size();
    std::vector<std::int64_t> own(b_shape.size());
    std::int64_t run = 1;
    for (std::size_t i = b_shape.size(); i-- > 0;) {
        own[i] = run;
        run *= b_shape[i];
    }
    std::vector<std::int64_t> strides(a_shape.size(), 0);
    for (std::size_t i = 0; i < a_shape.size(); ++i) {
        if (i < off) continue;
        std::int64_t bd = b_shape[i - off];
        if (bd == a_shape[i]) strides[i] = own[i - off];
        else if (bd == 1) strides[i] = 0;
        else
            throw ShapeError(std::string(who) + ": cannot broadcast " + shape_str(b_shape) +
                             " over " + shape_str(a_shape));
    }
    return strides;
}

// Walks every index of a_shape in row-major order, handing (a_flat, b_flat)
// to fn, where b_flat follows the broadcast strides.
template <typename Fn>
void for_each_broadcast(const Shape& a_shape, const std::vector<std::int64_t>& b_strides, Fn fn) {
    const std::size_t rank = a_shape.size();
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t total = shape_numel(a_shape);
    std::int64_t bi = 0;
    for (std::int64_t ai = 0; ai < total; ++ai) {
        fn(ai, bi);
        for (std::size_t k = rank; k-- > 0;) {
            ++idx[k];
            bi += b_strides[k];
            if (idx[k] < a_shape[k]) break;
            bi -= b_strides[k] * a_shape[k];
            idx[k] = 0;
        }
    }
}

enum class EwKind { Add, Mul };

}  // namespace

namespace detail {

// Unrolls one image's receptive fields into a (Cin*KH*KW) x (OH*OW) matrix;
// out-of-range taps become zeros, so the kernels below need no bounds.
void im2col(const double* x, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t KH,
            std::int64_t KW, std::int64_t stride, std::int64_t pad, std::int64_t OH,
            std::int64_t OW, double* col) {
    const std::int64_t M = OH * OW;
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
        const double* plane = x + ci * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw) {
                double* dst = col + ((ci * KH + kh) * KW + kw) * M;
                const std::int64_t iw0 = kw - pad;
                const std::int64_t lo = iw0 < 0 ? (-iw0 + stride - 1) / stride : 0;
                const std::int64_t hi = std::min(OW, iw0 >= W ? 0 : (W - 1 - iw0) / stride + 1);
                for (std::int64_t oh = 0; oh < OH; ++oh, dst += OW) {
                    const std::int64_t ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + OW, 0.0);
                        continue;
                    }
                    const double* xrow = plane + ih * W;
                    for (std::int64_t ow = 0; ow < lo; ++ow) dst[ow] = 0.0;
                    for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] = xrow[ow * stride + iw0];
                    for (std::int64_t ow = std::max(lo, hi); ow < OW; ++ow) dst[ow] = 0.0;
                }
            }
        }
    }
}

// Scatter-add of a column matrix back onto the input image, the transpose
// of im2col.
void col2im_add(const double* col, std::int64_t Cin, std::int64_t H, std::int64_t W,
                std::int64_t KH, std::int64_t KW, std::int64_t stride, std::int64_t pad,
                std::int64_t OH, std::int64_t OW, double* dx) {
    const std::int64_t M = OH * OW;
    for (std::int64_t ci = 0; ci < Cin; ++ci) {
        double* plane = dx + ci * H * W;
        for (std::int64_t kh = 0; kh < KH; ++kh) {
            for (std::int64_t kw = 0; kw < KW; ++kw) {
                const double* src = col + ((ci * KH + kh) * KW + kw) * M;
                const std::int64_t iw0 = kw - pad;
                const std::int64_t lo = iw0 < 0 ? (-iw0 + stride - 1) / stride : 0;
                const std::int64_t hi = std::min(OW, iw0 >= W ? 0 : (W - 1 - iw0) / stride + 1);
                for (std::int64_t oh = 0; oh < OH; ++oh, src += OW) {
                    const std::int64_t ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    double* xrow = plane + ih * W;
                    for (std::int64_t ow = lo; ow < hi; ++ow) xrow[ow * stride + iw0] += src[ow];
                }
            }
        }
    }
}

}  // namespace detail

namespace {

Tensor elementwise(Tape* tape, const Tensor& a, const Tensor& b, EwKind kind) {
    const char* who = kind == EwKind::Add ? "add" : "mul";
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    if (a.shape() == b.shape()) {
        if (kind == EwKind::Add)
            for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
        else
            for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    } else {
        auto strides = broadcast_strides(a.shape(), b.shape(), who);
        if (kind == EwKind::Add)
            for_each_broadcast(a.shape(), strides,
                               [&](std::int64_t ai, std::int64_t bi) { ov[ai] = av[ai] + bv[bi]; });
        else
            for_each_broadcast(a.shape(), strides,
                               [&](std::int64_t ai, std::int64_t bi) { ov[ai] = av[ai] * bv[bi]; });
    }
    if (recording(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc, kind]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            std::vector<std::int64_t> strides =
                ac.shape() == bc.shape()
                    ? std::vector<std::int64_t>()
                    : broadcast_strides(ac.shape(), bc.shape(), "elementwise-backward");
            if (ac.requires_grad()) {
                std::vector<double> da(ac.numel(), 0.0);
                if (kind == EwKind::Add) {
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] = dy[i];
                } else if (strides.empty()) {
                    const auto& bv2 = bc.data();
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] = dy[i] * bv2[i];
                } else {
                    const auto& bv2 = bc.data();
                    for_each_broadcast(ac.shape(), strides, [&](std::int64_t ai, std::int64_t bi) {
                        da[ai] = dy[ai] * bv2[bi];
                    });
                }
                ac.accumulate_grad(da);
            }
            if (bc.requires_grad()) {
                std::vector<double> db(bc.numel(), 0.0);
                if (strides.empty()) {
                    if (kind == EwKind::Add)
                        for (std::size_t i = 0; i < db.size(); ++i) db[i] = dy[i];
                    else {
                        const auto& av2 = ac.data();
                        for (std::size_t i = 0; i < db.size(); ++i) db[i] = dy[i] * av2[i];
                    }
                } else {
                    if (kind == EwKind::Add)
                        for_each_broadcast(ac.shape(), strides,
                                           [&](std::int64_t ai, std::int64_t bi) { db[bi] += dy[ai]; });
                    else {
                        const auto& av2 = ac.data();
                        for_each_broadcast(ac.shape(), strides, [&](std::int64_t ai, std::int64_t bi) {
                            db[bi] += dy[ai] * av2[ai];
                        });
                    }
                }
                bc.accumulate_grad(db);
            }
        });
    }
    return out;
}

}  // namespace

BatchNormState BatchNormState::make(std::int64_t channels) {
    BatchNormState s;
    s.running_mean = Tensor::zeros({channels});
    s.running_var = Tensor::full({channels}, 1.0);
    return s;
}

Tensor init_normal(const Shape& shape, double mean, double stddev, std::uint64_t seed,
                   bool requires_grad) {
    check_shape_positive(shape, "init_normal");
    if (stddev < 0) throw ContractError("init_normal: negative stddev");
    Tensor t = Tensor::zeros(shape, requires_grad);
    Rng rng(seed);
    for (auto& v : t.data()) v = mean + stddev * rng.next_normal();
    return t;
}

Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
              std::int64_t stride, std::int64_t pad) {
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d");
    require_rank(b, 1, "conv2d");
    if (stride < 1) throw ContractError("conv2d: stride must be positive");
    if (pad < 0) throw ContractError("conv2d: negative padding");
    const std::int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    if (w.dim(1) != Cin)
        throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels, kernel expects " +
                         std::to_string(w.dim(1)));
    if (b.dim(0) != Cout) throw ShapeError("conv2d: bias length != output channels");
    if (H + 2 * pad < KH || W + 2 * pad < KW)
        throw ShapeError("conv2d: kernel larger than padded input");
    const std::int64_t OH = (H + 2 * pad - KH) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - KW) / stride + 1;

    Tensor out = Tensor::zeros({N, Cout, OH, OW});
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();

    const std::int64_t K = Cin * KH * KW;
    const std::int64_t M = OH * OW;
    std::vector<double> col(static_cast<std::size_t>(K * M));
    for (std::int64_t n = 0; n < N; ++n) {
        detail::im2col(xp + n * Cin * H * W, Cin, H, W, KH, KW, stride, pad, OH, OW, col.data());
        for (std::int64_t co = 0; co < Cout; ++co) {
            double* orow = op + (n * Cout + co) * M;
            const double* wrow = wp + co * K;
            if (M <= 4) {
                // tiny output planes: contiguous dot over k beats the axpy form
                for (std::int64_t m = 0; m < M; ++m) {
                    double acc = bp[co];
                    const double* cm = col.data() + m;
                    for (std::int64_t k = 0; k < K; ++k) acc += wrow[k] * cm[k * M];
                    orow[m] = acc;
                }
            } else {
                std::fill(orow, orow + M, bp[co]);
                for (std::int64_t k = 0; k < K; ++k) {
                    const double wv = wrow[k];
                    const double* cr = col.data() + k * M;
                    for (std::int64_t m = 0; m < M; ++m) orow[m] += wv * cr[m];
                }
            }
        }
    }

    if (recording(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b, oc = out;
        tape->record([xc, wc, bc, oc, stride, pad]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            const std::int64_t N = xc.dim(0), Cin = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
            const std::int64_t Cout = wc.dim(0), KH = wc.dim(2), KW = wc.dim(3);
            const std::int64_t OH = oc.dim(2), OW = oc.dim(3);
            const bool need_dx = xc.requires_grad();
            const bool need_dw = wc.requires_grad();
            std::vector<double> dx(need_dx ? xc.numel() : 0, 0.0);
            std::vector<double> dw(need_dw ? wc.numel() : 0, 0.0);
            const double* xp = xc.data().data();
            const double* wp = wc.data().data();
            if (need_dx || need_dw) {
                const std::int64_t K = Cin * KH * KW;
                const std::int64_t M = OH * OW;
                std::vector<double> col(static_cast<std::size_t>(K * M));
                std::vector<double> dcol(need_dx ? static_cast<std::size_t>(K * M) : 0);
                for (std::int64_t n = 0; n < N; ++n) {
                    const double* dyn = dy.data() + n * Cout * M;
                    if (need_dw) {
                        detail::im2col(xp + n * Cin * H * W, Cin, H, W, KH, KW, stride, pad, OH,
                                       OW, col.data());
                        for (std::int64_t co = 0; co < Cout; ++co) {
                            const double* dyrow = dyn + co * M;
                            double* dwrow = dw.data() + co * K;
                            for (std::int64_t k = 0; k < K; ++k) {
                                const double* cr = col.data() + k * M;
                                double acc = 0.0;
                                for (std::int64_t m = 0; m < M; ++m) acc += dyrow[m] * cr[m];
                                dwrow[k] += acc;
                            }
                        }
                    }
                    if (need_dx) {
                        std::fill(dcol.begin(), dcol.end(), 0.0);
                        for (std::int64_t co = 0; co < Cout; ++co) {
                            const double* dyrow = dyn + co * M;
                            const double* wrow = wp + co * K;
                            for (std::int64_t k = 0; k < K; ++k) {
                                const double wv = wrow[k];
                                double* dcr = dcol.data() + k * M;
                                for (std::int64_t m = 0; m < M; ++m) dcr[m] += wv * dyrow[m];
                            }
                        }
                        detail::col2im_add(dcol.data(), Cin, H, W, KH, KW, stride, pad, OH, OW,
                                           dx.data() + n * Cin * H * W);
                    }
                }
            }
            if (need_dx) xc.accumulate_grad(dx);
            if (need_dw) wc.accumulate_grad(dw);
            if (bc.requires_grad()) {
                std::vector<double> db(static_cast<std::size_t>(Cout), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t co = 0; co < Cout; ++co) {
                        const double* dplane = dy.data() + ((n * Cout + co) * OH) * OW;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += dplane[i];
                        db[static_cast<std::size_t>(co)] += acc;
                    }
                bc.accumulate_grad(db);
            }
        });
    }
    return out;
}

Tensor pool2d(Tape* tape, const Tensor& x, PoolMode mode, std::int64_t kh, std::int64_t kw,
              std::int64_t stride, std::int64_t pad) {
    require_rank(x, 4, "pool2d");
    if (stride < 1) throw ContractError("pool2d: stride must be positive");
    if (pad < 0) throw ContractError("pool2d: negative padding");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (kh < 1 || kw < 1 || kh > H + 2 * pad || kw > W + 2 * pad)
        throw ShapeError("pool2d: window larger than padded input");
    const std::int64_t OH = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t OW = (W + 2 * pad - kw) / stride + 1;

    Tensor out = Tensor::zeros({N, C, OH, OW});
    std::vector<std::int64_t> argmax;
    if (mode == PoolMode::Max) argmax.assign(static_cast<std::size_t>(out.numel()), -1);
    const double* xp = x.data().data();
    double* op = out.data().data();
    const double win = static_cast<double>(kh * kw);

    std::int64_t oi = 0;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* plane = xp + ((n * C + c) * H) * W;
            const std::int64_t plane_off = ((n * C + c) * H) * W;
            for (std::int64_t oh = 0; oh < OH; ++oh)
                for (std::int64_t ow = 0; ow < OW; ++ow, ++oi) {
                    const std::int64_t h0 = oh * stride - pad;
                    const std::int64_t w0 = ow * stride - pad;
                    if (mode == PoolMode::Max) {
                        double best = 0.0;
                        std::int64_t best_at = -1;
                        for (std::int64_t i = 0; i < kh; ++i) {
                            const std::int64_t ih = h0 + i;
                            if (ih < 0 || ih >= H) continue;
                            for (std::int64_t j = 0; j < kw; ++j) {
                                const std::int64_t iw = w0 + j;
                                if (iw < 0 || iw >= W) continue;
                                const double v = plane[ih * W + iw];
                                if (best_at < 0 || v > best) {
                                    best = v;
                                    best_at = ih * W + iw;
                                }
                            }
                        }
                        op[oi] = best_at < 0 ? 0.0 : best;
                        argmax[static_cast<std::size_t>(oi)] =
                            best_at < 0 ? -1 : plane_off + best_at;
                    } else {
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < kh; ++i) {
                            const std::int64_t ih = h0 + i;
                            if (ih < 0 || ih >= H) continue;
                            for (std::int64_t j = 0; j < kw; ++j) {
                                const std::int64_t iw = w0 + j;
                                if (iw < 0 || iw >= W) continue;
                                acc += plane[ih * W + iw];
                            }
                        }
                        op[oi] = acc / win;
                    }
                }
        }

    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc, mode, kh, kw, stride, pad, argmax = std::move(argmax)]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            std::vector<double> dx(xc.numel(), 0.0);
            if (mode == PoolMode::Max) {
                for (std::size_t i = 0; i < dy.size(); ++i)
                    if (argmax[i] >= 0) dx[static_cast<std::size_t>(argmax[i])] += dy[i];
            } else {
                const std::int64_t N = xc.dim(0), C = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
                const std::int64_t OH = oc.dim(2), OW = oc.dim(3);
                const double inv_win = 1.0 / static_cast<double>(kh * kw);
                std::int64_t oi = 0;
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        double* dplane = dx.data() + ((n * C + c) * H) * W;
                        for (std::int64_t oh = 0; oh < OH; ++oh)
                            for (std::int64_t ow = 0; ow < OW; ++ow, ++oi) {
                                const double g = dy[static_cast<std::size_t>(oi)] * inv_win;
                                for (std::int64_t i = 0; i < kh; ++i) {
                                    const std::int64_t ih = oh * stride - pad + i;
                                    if (ih < 0 || ih >= H) continue;
                                    for (std::int64_t j = 0; j < kw; ++j) {
                                        const std::int64_t iw = ow * stride - pad + j;
                                        if (iw < 0 || iw >= W) continue;
                                        dplane[ih * W + iw] += g;
                                    }
                                }
                            }
                    }
            }
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor global_pool(Tape* tape, const Tensor& x, PoolMode mode) {
    require_rank(x, 4, "global_pool");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t plane = H * W;
    Tensor out = Tensor::zeros({N, C, 1, 1});
    std::vector<std::int64_t> argmax;
    if (mode == PoolMode::Max) argmax.assign(static_cast<std::size_t>(N * C), 0);
    const double* xp = x.data().data();
    double* op = out.data().data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* p = xp + nc * plane;
        if (mode == PoolMode::Avg) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
            op[nc] = acc / static_cast<double>(plane);
        } else {
            double best = p[0];
            std::int64_t at = 0;
            for (std::int64_t i = 1; i < plane; ++i)
                if (p[i] > best) {
                    best = p[i];
                    at = i;
                }
            op[nc] = best;
            argmax[static_cast<std::size_t>(nc)] = nc * plane + at;
        }
    }
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc, mode, plane, argmax = std::move(argmax)]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            std::vector<double> dx(xc.numel(), 0.0);
            if (mode == PoolMode::Avg) {
                const double inv = 1.0 / static_cast<double>(plane);
                for (std::size_t nc = 0; nc < dy.size(); ++nc) {
                    const double g = dy[nc] * inv;
                    double* p = dx.data() + nc * static_cast<std::size_t>(plane);
                    for (std::int64_t i = 0; i < plane; ++i) p[i] += g;
                }
            } else {
                for (std::size_t nc = 0; nc < dy.size(); ++nc)
                    dx[static_cast<std::size_t>(argmax[nc])] += dy[nc];
            }
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor activation(Tape* tape, const Tensor& x, ActKind kind) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    auto& ov = out.data();
    if (kind == ActKind::Relu) {
        for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    } else {
        // Clamped to the open interval so saturated outputs stay strictly
        // inside (0,1) even where 1/(1+e^-x) rounds to 1.
        const double hi = std::nextafter(1.0, 0.0);
        const double lo = std::numeric_limits<double>::min();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            double y;
            if (v >= 0.0) y = 1.0 / (1.0 + std::exp(-v));
            else {
                const double e = std::exp(v);
                y = e / (1.0 + e);
            }
            ov[i] = std::clamp(y, lo, hi);
        }
    }
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc, kind]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            const auto& yv = oc.data();
            const auto& xv2 = xc.data();
            std::vector<double> dx(xc.numel(), 0.0);
            if (kind == ActKind::Relu)
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = xv2[i] > 0.0 ? dy[i] : 0.0;
            else
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * yv[i] * (1.0 - yv[i]);
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    return elementwise(tape, a, b, EwKind::Add);
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    return elementwise(tape, a, b, EwKind::Mul);
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    require_rank(b, 1, "linear");
    const std::int64_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
    if (w.dim(0) != D)
        throw ShapeError("linear: inner dimensions disagree, x " + shape_str(x.shape()) + " vs w " +
                         shape_str(w.shape()));
    if (b.dim(0) != K) throw ShapeError("linear: bias length != output features");
    Tensor out = Tensor::zeros({N, K});
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        double* orow = op + n * K;
        std::copy(bp, bp + K, orow);
        const double* xrow = xp + n * D;
        for (std::int64_t d = 0; d < D; ++d) {
            const double xv = xrow[d];
            const double* wrow = wp + d * K;
            for (std::int64_t k = 0; k < K; ++k) orow[k] += xv * wrow[k];
        }
    }
    if (recording(tape, {&x, &w, &b})) {
        out.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b, oc = out;
        tape->record([xc, wc, bc, oc]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            const std::int64_t N = xc.dim(0), D = xc.dim(1), K = wc.dim(1);
            if (xc.requires_grad()) {
                std::vector<double> dx(xc.numel(), 0.0);
                const double* wp = wc.data().data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t d = 0; d < D; ++d) {
                        const double* wrow = wp + d * K;
                        const double* drow = dy.data() + n * K;
                        double acc = 0.0;
                        for (std::int64_t k = 0; k < K; ++k) acc += drow[k] * wrow[k];
                        dx[static_cast<std::size_t>(n * D + d)] = acc;
                    }
                xc.accumulate_grad(dx);
            }
            if (wc.requires_grad()) {
                std::vector<double> dw(wc.numel(), 0.0);
                const double* xp = xc.data().data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t d = 0; d < D; ++d) {
                        const double xv = xp[n * D + d];
                        const double* drow = dy.data() + n * K;
                        double* dwrow = dw.data() + d * K;
                        for (std::int64_t k = 0; k < K; ++k) dwrow[k] += xv * drow[k];
                    }
                wc.accumulate_grad(dw);
            }
            if (bc.requires_grad()) {
                std::vector<double> db(static_cast<std::size_t>(K), 0.0);
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t k = 0; k < K; ++k)
                        db[static_cast<std::size_t>(k)] += dy[static_cast<std::size_t>(n * K + k)];
                bc.accumulate_grad(db);
            }
        });
    }
    return out;
}

Tensor batchnorm2d(Tape* tape, const Tensor& x, const Tensor& scale, const Tensor& shift,
                   BatchNormState& state, bool training) {
    require_rank(x, 4, "batchnorm2d");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (scale.numel() != C || shift.numel() != C)
        throw ShapeError("batchnorm2d: scale/shift must have one entry per channel");
    if (state.running_mean.numel() != C || state.running_var.numel() != C)
        throw ShapeError("batchnorm2d: running stats do not match channel count");
    const std::int64_t m = N * H * W;
    if (training && m < 2)
        throw ContractError("batchnorm2d: training mode needs at least 2 values per channel");

    std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
    std::vector<double> var(static_cast<std::size_t>(C), 0.0);
    if (training) {
        const double* xp = x.data().data();
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = xp + ((n * C + c) * H) * W;
                for (std::int64_t i = 0; i < H * W; ++i) acc += p[i];
            }
            mean[static_cast<std::size_t>(c)] = acc / static_cast<double>(m);
        }
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const double mu = mean[static_cast<std::size_t>(c)];
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = xp + ((n * C + c) * H) * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double d = p[i] - mu;
                    acc += d * d;
                }
            }
            var[static_cast<std::size_t>(c)] = acc / static_cast<double>(m);
        }
        auto& rm = state.running_mean.data();
        auto& rv = state.running_var.data();
        for (std::int64_t c = 0; c < C; ++c) {
            rm[static_cast<std::size_t>(c)] = (1.0 - state.momentum) * rm[static_cast<std::size_t>(c)] +
                                              state.momentum * mean[static_cast<std::size_t>(c)];
            rv[static_cast<std::size_t>(c)] = (1.0 - state.momentum) * rv[static_cast<std::size_t>(c)] +
                                              state.momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        mean = state.running_mean.data();
        var = state.running_var.data();
    }

    std::vector<double> inv_std(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c)
        inv_std[static_cast<std::size_t>(c)] =
            1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + state.eps);

    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> xhat(x.data().size());
    {
        const double* xp = x.data().data();
        double* op = out.data().data();
        const double* sp = scale.data().data();
        const double* bp = shift.data().data();
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
                const std::int64_t off = ((n * C + c) * H) * W;
                const double mu = mean[static_cast<std::size_t>(c)];
                const double is = inv_std[static_cast<std::size_t>(c)];
                const double g = sp[c], be = bp[c];
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double xh = (xp[off + i] - mu) * is;
                    xhat[static_cast<std::size_t>(off + i)] = xh;
                    op[off + i] = g * xh + be;
                }
            }
    }

    if (recording(tape, {&x, &scale, &shift})) {
        out.set_requires_grad(true);
        Tensor xc = x, sc = scale, bc = shift, oc = out;
        tape->record([xc, sc, bc, oc, xhat = std::move(xhat), inv_std = std::move(inv_std),
                      training]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            const std::int64_t N = xc.dim(0), C = xc.dim(1), H = xc.dim(2), W = xc.dim(3);
            const std::int64_t plane = H * W;
            const double m = static_cast<double>(N * plane);
            std::vector<double> dscale(static_cast<std::size_t>(C), 0.0);
            std::vector<double> dshift(static_cast<std::size_t>(C), 0.0);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    const std::int64_t off = ((n * C + c) * H) * W;
                    double a = 0.0, s = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        a += dy[static_cast<std::size_t>(off + i)] *
                             xhat[static_cast<std::size_t>(off + i)];
                        s += dy[static_cast<std::size_t>(off + i)];
                    }
                    dscale[static_cast<std::size_t>(c)] += a;
                    dshift[static_cast<std::size_t>(c)] += s;
                }
            if (xc.requires_grad()) {
                std::vector<double> dx(xc.numel(), 0.0);
                const double* sp = sc.data().data();
                for (std::int64_t c = 0; c < C; ++c) {
                    const double g = sp[c] * inv_std[static_cast<std::size_t>(c)];
                    if (training) {
                        const double mean_dy = dshift[static_cast<std::size_t>(c)] / m;
                        const double mean_dyxh = dscale[static_cast<std::size_t>(c)] / m;
                        for (std::int64_t n = 0; n < N; ++n) {
                            const std::int64_t off = ((n * C + c) * H) * W;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const std::size_t k = static_cast<std::size_t>(off + i);
                                dx[k] = g * (dy[k] - mean_dy - xhat[k] * mean_dyxh);
                            }
                        }
                    } else {
                        for (std::int64_t n = 0; n < N; ++n) {
                            const std::int64_t off = ((n * C + c) * H) * W;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const std::size_t k = static_cast<std::size_t>(off + i);
                                dx[k] = g * dy[k];
                            }
                        }
                    }
                }
                xc.accumulate_grad(dx);
            }
            if (sc.requires_grad()) sc.accumulate_grad(dscale);
            if (bc.requires_grad()) bc.accumulate_grad(dshift);
        });
    }
    return out;
}

CrossEntropyResult softmax_cross_entropy(Tape* tape, const Tensor& logits,
                                         const std::vector<int>& labels) {
    require_rank(logits, 2, "softmax_cross_entropy");
    const std::int64_t N = logits.dim(0), K = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N)
        throw ShapeError("softmax_cross_entropy: one label per row required");
    for (int y : labels)
        if (y < 0 || y >= K)
            throw InputError("softmax_cross_entropy: label " + std::to_string(y) +
                             " outside [0," + std::to_string(K) + ")");

    Tensor probs = Tensor::zeros({N, K});
    double loss_acc = 0.0;
    const double* lp = logits.data().data();
    double* pp = probs.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        const double* row = lp + n * K;
        double mx = row[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double z = 0.0;
        for (std::int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        const double logz = std::log(z);
        for (std::int64_t k = 0; k < K; ++k) pp[n * K + k] = std::exp(row[k] - mx) / z;
        loss_acc += logz - (row[labels[static_cast<std::size_t>(n)]] - mx);
    }
    Tensor loss = Tensor::scalar(loss_acc / static_cast<double>(N));

    if (recording(tape, {&logits})) {
        loss.set_requires_grad(true);
        Tensor lc = logits, pc = probs, oc = loss;
        tape->record([lc, pc, oc, labels]() mutable {
            if (!oc.has_grad()) return;
            const double g = oc.grad()[0];
            const std::int64_t N = lc.dim(0), K = lc.dim(1);
            std::vector<double> dl(lc.numel());
            const double* pp = pc.data().data();
            const double inv_n = 1.0 / static_cast<double>(N);
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t k = 0; k < K; ++k) {
                    double v = pp[n * K + k];
                    if (k == labels[static_cast<std::size_t>(n)]) v -= 1.0;
                    dl[static_cast<std::size_t>(n * K + k)] = g * v * inv_n;
                }
            lc.accumulate_grad(dl);
        });
    }
    return {loss, probs};
}

Tensor reshape(Tape* tape, const Tensor& x, const Shape& new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: element count changes " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    Tensor out = Tensor::from_data(new_shape, x.data());
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            if (oc.has_grad()) xc.accumulate_grad(oc.grad());
        });
    }
    return out;
}

Tensor concat_cols(Tape* tape, const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "concat_cols");
    require_rank(b, 2, "concat_cols");
    if (a.dim(0) != b.dim(0)) throw ShapeError("concat_cols: row counts differ");
    const std::int64_t N = a.dim(0), Da = a.dim(1), Db = b.dim(1);
    Tensor out = Tensor::zeros({N, Da + Db});
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy(a.data().begin() + n * Da, a.data().begin() + (n + 1) * Da,
                  out.data().begin() + n * (Da + Db));
        std::copy(b.data().begin() + n * Db, b.data().begin() + (n + 1) * Db,
                  out.data().begin() + n * (Da + Db) + Da);
    }
    if (recording(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        tape->record([ac, bc, oc]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            const std::int64_t N = ac.dim(0), Da = ac.dim(1), Db = bc.dim(1);
            if (ac.requires_grad()) {
                std::vector<double> da(ac.numel());
                for (std::int64_t n = 0; n < N; ++n)
                    std::copy(dy.begin() + n * (Da + Db), dy.begin() + n * (Da + Db) + Da,
                              da.begin() + n * Da);
                ac.accumulate_grad(da);
            }
            if (bc.requires_grad()) {
                std::vector<double> db(bc.numel());
                for (std::int64_t n = 0; n < N; ++n)
                    std::copy(dy.begin() + n * (Da + Db) + Da, dy.begin() + (n + 1) * (Da + Db),
                              db.begin() + n * Db);
                bc.accumulate_grad(db);
            }
        });
    }
    return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& x) {
    require_rank(x, 2, "softmax_rows");
    const std::int64_t N = x.dim(0), K = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    const double* xp = x.data().data();
    double* op = out.data().data();
    for (std::int64_t n = 0; n < N; ++n) {
        const double* row = xp + n * K;
        double mx = row[0];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double z = 0.0;
        for (std::int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        for (std::int64_t k = 0; k < K; ++k) op[n * K + k] = std::exp(row[k] - mx) / z;
    }
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            const auto& yv = oc.data();
            const std::int64_t N = xc.dim(0), K = xc.dim(1);
            std::vector<double> dx(xc.numel());
            for (std::int64_t n = 0; n < N; ++n) {
                double dot = 0.0;
                for (std::int64_t k = 0; k < K; ++k)
                    dot += dy[static_cast<std::size_t>(n * K + k)] *
                           yv[static_cast<std::size_t>(n * K + k)];
                for (std::int64_t k = 0; k < K; ++k) {
                    const std::size_t i = static_cast<std::size_t>(n * K + k);
                    dx[i] = yv[i] * (dy[i] - dot);
                }
            }
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor log_elem(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.data().size(); ++i) out.data()[i] = std::log(x.data()[i]);
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            std::vector<double> dx(xc.numel());
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] / xc.data()[i];
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.data().size(); ++i) out.data()[i] = c * x.data()[i];
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc, c]() mutable {
            if (!oc.has_grad()) return;
            const auto& dy = oc.grad();
            std::vector<double> dx(xc.numel());
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = c * dy[i];
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor select_scalar(Tape* tape, const Tensor& x, std::int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.numel())
        throw ContractError("select_scalar: index out of range");
    Tensor out = Tensor::scalar(x.data()[static_cast<std::size_t>(flat_index)]);
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc, flat_index]() mutable {
            if (!oc.has_grad()) return;
            std::vector<double> dx(xc.numel(), 0.0);
            dx[static_cast<std::size_t>(flat_index)] = oc.grad()[0];
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

Tensor sum_all(Tape* tape, const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (recording(tape, {&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        tape->record([xc, oc]() mutable {
            if (!oc.has_grad()) return;
            std::vector<double> dx(xc.numel(), oc.grad()[0]);
            xc.accumulate_grad(dx);
        });
    }
    return out;
}

}  // namespace afnet
