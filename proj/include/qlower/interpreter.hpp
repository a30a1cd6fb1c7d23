#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qlower/graph.hpp"
#include "qlower/pact.hpp"
#include "qlower/requant.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

// ---------------------------------------------------------------------------
// Execution traces
//
// Every node execution tallies its elementary arithmetic by kind. On the
// integer-deployable path the real-op counter must stay at zero; the trace is
// the evidence, not an assumption.
// ---------------------------------------------------------------------------

struct OpTally {
    std::int64_t integer_ops = 0;
    std::int64_t real_ops = 0;
    std::int64_t peak_int_magnitude = 0;

    void count_int(std::int64_t n = 1) { integer_ops += n; }
    void count_real(std::int64_t n = 1) { real_ops += n; }
    void track(std::int64_t v) { peak_int_magnitude = std::max(peak_int_magnitude, v < 0 ? -v : v); }
};

struct NodeTrace {
    Tensor output;
    OpTally tally;
};

struct ExecTrace {
    std::map<std::string, NodeTrace> per_node;

    std::int64_t total_integer_ops() const {
        std::int64_t n = 0;
        for (const auto& [id, t] : per_node) n += t.tally.integer_ops;
        return n;
    }
    std::int64_t total_real_ops() const {
        std::int64_t n = 0;
        for (const auto& [id, t] : per_node) n += t.tally.real_ops;
        return n;
    }
    /// True iff no node touched real arithmetic.
    bool integer_pure() const { return total_real_ops() == 0; }
};

struct RunResult {
    Tensor output;
    ExecTrace trace;
};

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

namespace detail {

struct Hwc {
    std::int64_t c, h, w;
};

inline Hwc as_chw(const Tensor& x) {
    if (x.shape().size() != 3) throw ShapeMismatchError("expected a [C, H, W] tensor");
    return {x.shape()[0], x.shape()[1], x.shape()[2]};
}

inline std::int64_t window_out(std::int64_t extent, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    std::int64_t span = extent + 2 * pad - k;
    if (span < 0) throw ShapeMismatchError("window larger than padded input");
    return span / stride + 1;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Real kernels
//
// Accumulation order is fixed everywhere (kernel rows, then columns, then
// input channels innermost; features ascending for fully-connected) so that
// repeated runs are bit-identical.
// ---------------------------------------------------------------------------

inline Tensor kernel_conv2d_real(const Tensor& w, const Tensor* b, const Tensor& x, int stride, int pad,
                                 OpTally& tally) {
    auto [ic, h, wd] = detail::as_chw(x);
    if (w.shape().size() != 4 || w.shape()[1] != ic) throw ShapeMismatchError("conv weight/input channel mismatch");
    std::int64_t oc = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    std::int64_t oh = detail::window_out(h, kh, stride, pad);
    std::int64_t ow = detail::window_out(wd, kw, stride, pad);
    if (b && b->size() != oc) throw ShapeMismatchError("conv bias length mismatch");

    const auto& wv = w.reals();
    const auto& xv = x.reals();
    Tensor out = Tensor::zeros(ValueKind::Real, {oc, oh, ow});
    auto& ov = out.reals();
    for (std::int64_t o = 0; o < oc; ++o)
        for (std::int64_t yo = 0; yo < oh; ++yo)
            for (std::int64_t xo = 0; xo < ow; ++xo) {
                double acc = b ? b->reals()[static_cast<std::size_t>(o)] : 0.0;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t yi = yo * stride + ky - pad;
                    if (yi < 0 || yi >= h) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        std::int64_t xi = xo * stride + kx - pad;
                        if (xi < 0 || xi >= wd) continue;
                        for (std::int64_t i = 0; i < ic; ++i) {
                            acc += wv[static_cast<std::size_t>(((o * ic + i) * kh + ky) * kw + kx)] *
                                   xv[static_cast<std::size_t>((i * h + yi) * wd + xi)];
                            tally.count_real(2);
                        }
                    }
                }
                ov[static_cast<std::size_t>((o * oh + yo) * ow + xo)] = acc;
            }
    if (b) tally.count_real(oc * oh * ow);
    return out;
}

inline Tensor kernel_fully_connected_real(const Tensor& w, const Tensor* b, const Tensor& x, OpTally& tally) {
    if (w.shape().size() != 2) throw ShapeMismatchError("fully-connected weight must be [out, in]");
    std::int64_t no = w.shape()[0], ni = w.shape()[1];
    if (x.size() != ni) throw ShapeMismatchError("fully-connected input length mismatch");
    if (b && b->size() != no) throw ShapeMismatchError("fully-connected bias length mismatch");
    const auto& wv = w.reals();
    const auto& xv = x.reals();
    std::vector<double> out(static_cast<std::size_t>(no));
    for (std::int64_t o = 0; o < no; ++o) {
        double acc = b ? b->reals()[static_cast<std::size_t>(o)] : 0.0;
        for (std::int64_t i = 0; i < ni; ++i) {
            acc += wv[static_cast<std::size_t>(o * ni + i)] * xv[static_cast<std::size_t>(i)];
            tally.count_real(2);
        }
        out[static_cast<std::size_t>(o)] = acc;
    }
    return Tensor::real({no}, std::move(out));
}

/// y = gamma/sigma * (x - mu) + beta, per channel (dim 0).
inline Tensor kernel_bn_real(const Tensor& gamma, const Tensor& sigma, const Tensor& mu, const Tensor& beta,
                             const Tensor& x, OpTally& tally) {
    std::int64_t c = x.shape().empty() ? 0 : x.shape()[0];
    if (gamma.size() != c) throw ShapeMismatchError("batch-norm parameter length must equal the channel count");
    std::int64_t inner = x.size() / c;
    const auto& xv = x.reals();
    std::vector<double> out(xv.size());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double k = gamma.reals()[static_cast<std::size_t>(ch)] / sigma.reals()[static_cast<std::size_t>(ch)];
        double m = mu.reals()[static_cast<std::size_t>(ch)];
        double bt = beta.reals()[static_cast<std::size_t>(ch)];
        for (std::int64_t i = 0; i < inner; ++i) {
            std::size_t idx = static_cast<std::size_t>(ch * inner + i);
            out[idx] = k * (xv[idx] - m) + bt;
            tally.count_real(3);
        }
    }
    return Tensor::real(x.shape(), std::move(out));
}

/// y = kappa * x + lambda with per-channel factors already combined.
inline Tensor kernel_bn_affine_real(const std::vector<double>& kappa, const std::vector<double>& lambda,
                                    const Tensor& x, OpTally& tally) {
    std::int64_t c = x.shape().empty() ? 0 : x.shape()[0];
    if (static_cast<std::int64_t>(kappa.size()) != c) throw ShapeMismatchError("affine parameter length mismatch");
    std::int64_t inner = x.size() / c;
    const auto& xv = x.reals();
    std::vector<double> out(xv.size());
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < inner; ++i) {
            std::size_t idx = static_cast<std::size_t>(ch * inner + i);
            out[idx] = kappa[static_cast<std::size_t>(ch)] * xv[idx] + lambda[static_cast<std::size_t>(ch)];
            tally.count_real(2);
        }
    return Tensor::real(x.shape(), std::move(out));
}

inline Tensor kernel_relu_real(const Tensor& x, OpTally& tally) {
    const auto& xv = x.reals();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
        tally.count_real(1);
    }
    return Tensor::real(x.shape(), std::move(out));
}

inline Tensor kernel_add_real(const std::vector<const Tensor*>& xs, OpTally& tally) {
    for (const Tensor* t : xs)
        if (!t->same_shape(*xs.front())) throw ShapeMismatchError("add operands must share one shape");
    std::vector<double> out(xs.front()->reals());
    for (std::size_t b = 1; b < xs.size(); ++b) {
        const auto& xv = xs[b]->reals();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += xv[i];
        tally.count_real(static_cast<std::int64_t>(out.size()));
    }
    return Tensor::real(xs.front()->shape(), std::move(out));
}

template <typename T, typename Fetch>
inline void for_each_pool_window(std::int64_t c, std::int64_t h, std::int64_t w, int kh, int kw, int stride,
                                 Fetch&& fn) {
    std::int64_t oh = detail::window_out(h, kh, stride, 0);
    std::int64_t ow = detail::window_out(w, kw, stride, 0);
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t yo = 0; yo < oh; ++yo)
            for (std::int64_t xo = 0; xo < ow; ++xo) fn(ch, yo, xo, oh, ow);
}

inline Tensor kernel_maxpool_real(const Tensor& x, int kh, int kw, int stride, OpTally& tally) {
    auto [c, h, w] = detail::as_chw(x);
    std::int64_t oh = detail::window_out(h, kh, stride, 0), ow = detail::window_out(w, kw, stride, 0);
    Tensor out = Tensor::zeros(ValueKind::Real, {c, oh, ow});
    const auto& xv = x.reals();
    auto& ov = out.reals();
    for_each_pool_window<double>(c, h, w, kh, kw, stride, [&](auto ch, auto yo, auto xo, auto OH, auto OW) {
        double best = -std::numeric_limits<double>::infinity();
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                best = std::max(best, xv[static_cast<std::size_t>((ch * h + yo * stride + ky) * w + xo * stride + kx)]);
                tally.count_real(1);
            }
        ov[static_cast<std::size_t>((ch * OH + yo) * OW + xo)] = best;
    });
    return out;
}

inline Tensor kernel_avgpool_real(const Tensor& x, int kh, int kw, int stride, OpTally& tally) {
    auto [c, h, w] = detail::as_chw(x);
    std::int64_t oh = detail::window_out(h, kh, stride, 0), ow = detail::window_out(w, kw, stride, 0);
    Tensor out = Tensor::zeros(ValueKind::Real, {c, oh, ow});
    const auto& xv = x.reals();
    auto& ov = out.reals();
    const double k = static_cast<double>(kh) * static_cast<double>(kw);
    for_each_pool_window<double>(c, h, w, kh, kw, stride, [&](auto ch, auto yo, auto xo, auto OH, auto OW) {
        double acc = 0.0;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                acc += xv[static_cast<std::size_t>((ch * h + yo * stride + ky) * w + xo * stride + kx)];
                tally.count_real(1);
            }
        ov[static_cast<std::size_t>((ch * OH + yo) * OW + xo)] = acc / k;
        tally.count_real(1);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Integer kernels
// ---------------------------------------------------------------------------

inline Tensor kernel_conv2d_int(const Tensor& qw, const Tensor* qb, const Tensor& qx, int stride, int pad,
                                OpTally& tally) {
    auto [ic, h, wd] = detail::as_chw(qx);
    if (qw.shape().size() != 4 || qw.shape()[1] != ic) throw ShapeMismatchError("conv weight/input channel mismatch");
    std::int64_t oc = qw.shape()[0], kh = qw.shape()[2], kw = qw.shape()[3];
    std::int64_t oh = detail::window_out(h, kh, stride, pad);
    std::int64_t ow = detail::window_out(wd, kw, stride, pad);
    if (qb && qb->size() != oc) throw ShapeMismatchError("conv bias length mismatch");

    const auto& wv = qw.ints();
    const auto& xv = qx.ints();
    Tensor out = Tensor::zeros(ValueKind::Integer, {oc, oh, ow});
    auto& ov = out.ints();
    for (std::int64_t o = 0; o < oc; ++o)
        for (std::int64_t yo = 0; yo < oh; ++yo)
            for (std::int64_t xo = 0; xo < ow; ++xo) {
                std::int64_t acc = qb ? qb->ints()[static_cast<std::size_t>(o)] : 0;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t yi = yo * stride + ky - pad;
                    if (yi < 0 || yi >= h) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        std::int64_t xi = xo * stride + kx - pad;
                        if (xi < 0 || xi >= wd) continue;
                        for (std::int64_t i = 0; i < ic; ++i) {
                            acc = checked_add(acc, checked_mul(wv[static_cast<std::size_t>(((o * ic + i) * kh + ky) * kw + kx)],
                                                               xv[static_cast<std::size_t>((i * h + yi) * wd + xi)]));
                            tally.count_int(2);
                            tally.track(acc);
                        }
                    }
                }
                ov[static_cast<std::size_t>((o * oh + yo) * ow + xo)] = acc;
            }
    if (qb) tally.count_int(oc * oh * ow);
    return out;
}

inline Tensor kernel_fully_connected_int(const Tensor& qw, const Tensor* qb, const Tensor& qx, OpTally& tally) {
    if (qw.shape().size() != 2) throw ShapeMismatchError("fully-connected weight must be [out, in]");
    std::int64_t no = qw.shape()[0], ni = qw.shape()[1];
    if (qx.size() != ni) throw ShapeMismatchError("fully-connected input length mismatch");
    if (qb && qb->size() != no) throw ShapeMismatchError("fully-connected bias length mismatch");
    const auto& wv = qw.ints();
    const auto& xv = qx.ints();
    std::vector<std::int64_t> out(static_cast<std::size_t>(no));
    for (std::int64_t o = 0; o < no; ++o) {
        std::int64_t acc = qb ? qb->ints()[static_cast<std::size_t>(o)] : 0;
        for (std::int64_t i = 0; i < ni; ++i) {
            acc = checked_add(acc, checked_mul(wv[static_cast<std::size_t>(o * ni + i)], xv[static_cast<std::size_t>(i)]));
            tally.count_int(2);
            tally.track(acc);
        }
        out[static_cast<std::size_t>(o)] = acc;
    }
    return Tensor::integer({no}, std::move(out));
}

/// q_out = q_kappa[c] * q_in + q_lambda_out[c], all in the combined
/// accumulator space.
inline Tensor kernel_bn_int(const Tensor& q_kappa, const Tensor& q_lambda_out, const Tensor& qx, OpTally& tally) {
    std::int64_t c = qx.shape().empty() ? 0 : qx.shape()[0];
    if (q_kappa.size() != c || q_lambda_out.size() != c)
        throw ShapeMismatchError("batch-norm parameter length must equal the channel count");
    std::int64_t inner = qx.size() / c;
    const auto& xv = qx.ints();
    std::vector<std::int64_t> out(xv.size());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        std::int64_t k = q_kappa.ints()[static_cast<std::size_t>(ch)];
        std::int64_t l = q_lambda_out.ints()[static_cast<std::size_t>(ch)];
        for (std::int64_t i = 0; i < inner; ++i) {
            std::size_t idx = static_cast<std::size_t>(ch * inner + i);
            out[idx] = checked_add(checked_mul(k, xv[idx]), l);
            tally.count_int(2);
            tally.track(out[idx]);
        }
    }
    return Tensor::integer(qx.shape(), std::move(out));
}

/// q_y = clip((m * q) >> d, lo, hi): requantize into the activation space and
/// saturate to its usable range.
inline Tensor kernel_act_int(const Tensor& qx, const RequantParams& rq, std::int64_t lo, std::int64_t hi,
                             OpTally& tally) {
    const auto& xv = qx.ints();
    std::vector<std::int64_t> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        std::int64_t y = requantize_scalar(xv[i], rq);
        out[i] = std::clamp(y, lo, hi);
        tally.count_int(3);
        tally.track(out[i]);
    }
    return Tensor::integer(qx.shape(), std::move(out));
}

/// Count, per channel, how many of thresholds[c][1..n] are <= q. Thresholds
/// must be non-decreasing per row (binary search relies on it); the count
/// saturates at 0 and n by construction.
inline Tensor kernel_threshold_act(const Tensor& qx, const Tensor& thresholds, std::int64_t n_levels,
                                   OpTally& tally) {
    if (thresholds.shape().size() != 2 || thresholds.shape()[1] != n_levels + 1)
        throw ShapeMismatchError("threshold table must be [C, n_levels + 1]");
    std::int64_t c = qx.shape().empty() ? 0 : qx.shape()[0];
    if (thresholds.shape()[0] != c) throw ShapeMismatchError("threshold table channel count mismatch");
    std::int64_t inner = qx.size() / c;
    const auto& tv = thresholds.ints();
    const auto& xv = qx.ints();
    std::vector<std::int64_t> out(xv.size());
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t* row = tv.data() + ch * (n_levels + 1);
        for (std::int64_t k = 1; k < n_levels; ++k)
            if (row[k] > row[k + 1])
                throw NonMonotoneThresholdsError("threshold row " + std::to_string(ch) + " is not non-decreasing");
        for (std::int64_t i = 0; i < inner; ++i) {
            std::size_t idx = static_cast<std::size_t>(ch * inner + i);
            const std::int64_t* begin = row + 1;
            const std::int64_t* end = row + n_levels + 1;
            out[idx] = std::upper_bound(begin, end, xv[idx]) - begin;
            // a binary search over n levels costs ~log2(n) integer compares
            tally.count_int(std::max<std::int64_t>(1, std::bit_width(static_cast<std::uint64_t>(n_levels))));
            tally.track(out[idx]);
        }
    }
    return Tensor::integer(qx.shape(), std::move(out));
}

/// q_s = q_ref + sum_i RQ_i(q_i): the first operand is the reference branch
/// and passes through unchanged, every other branch is requantized into the
/// reference space first.
inline Tensor kernel_add_int(const std::vector<const Tensor*>& xs, const std::vector<RequantParams>& branch_rq,
                             OpTally& tally) {
    if (branch_rq.size() + 1 != xs.size())
        throw MissingQuantParamsError("add needs one requantization per non-reference branch");
    for (const Tensor* t : xs)
        if (!t->same_shape(*xs.front())) throw ShapeMismatchError("add operands must share one shape");
    std::vector<std::int64_t> out(xs.front()->ints());
    for (std::size_t b = 1; b < xs.size(); ++b) {
        const auto& xv = xs[b]->ints();
        const RequantParams& rq = branch_rq[b - 1];
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = checked_add(out[i], requantize_scalar(xv[i], rq));
            tally.count_int(3);
            tally.track(out[i]);
        }
    }
    return Tensor::integer(xs.front()->shape(), std::move(out));
}

/// Max pooling commutes with quantization: the integer image of the window
/// maximum is the maximum of the integer images.
inline Tensor kernel_maxpool_int(const Tensor& qx, int kh, int kw, int stride, OpTally& tally) {
    auto [c, h, w] = detail::as_chw(qx);
    std::int64_t oh = detail::window_out(h, kh, stride, 0), ow = detail::window_out(w, kw, stride, 0);
    Tensor out = Tensor::zeros(ValueKind::Integer, {c, oh, ow});
    const auto& xv = qx.ints();
    auto& ov = out.ints();
    for_each_pool_window<std::int64_t>(c, h, w, kh, kw, stride, [&](auto ch, auto yo, auto xo, auto OH, auto OW) {
        std::int64_t best = std::numeric_limits<std::int64_t>::min();
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                best = std::max(best, xv[static_cast<std::size_t>((ch * h + yo * stride + ky) * w + xo * stride + kx)]);
                tally.count_int(1);
            }
        ov[static_cast<std::size_t>((ch * OH + yo) * OW + xo)] = best;
        tally.track(best);
    });
    return out;
}

/// q_p = (m * sum(window)) >> d with m = floor(2^d / (kh*kw)); exact floor
/// division when the window size is a power of two.
inline Tensor kernel_avgpool_int(const Tensor& qx, int kh, int kw, int stride, std::int64_t m, int d,
                                 OpTally& tally) {
    auto [c, h, w] = detail::as_chw(qx);
    std::int64_t oh = detail::window_out(h, kh, stride, 0), ow = detail::window_out(w, kw, stride, 0);
    Tensor out = Tensor::zeros(ValueKind::Integer, {c, oh, ow});
    const auto& xv = qx.ints();
    auto& ov = out.ints();
    for_each_pool_window<std::int64_t>(c, h, w, kh, kw, stride, [&](auto ch, auto yo, auto xo, auto OH, auto OW) {
        std::int64_t acc = 0;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                acc = checked_add(acc, xv[static_cast<std::size_t>((ch * h + yo * stride + ky) * w + xo * stride + kx)]);
                tally.count_int(1);
                tally.track(acc);
            }
        std::int64_t y = checked_mul(m, acc) >> d;
        tally.count_int(2);
        tally.track(y);
        ov[static_cast<std::size_t>((ch * OH + yo) * OW + xo)] = y;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Graph execution
// ---------------------------------------------------------------------------

namespace detail {

inline const QuantSpec& require_out_spec(const Node& n) {
    if (!n.out_spec)
        throw MissingQuantParamsError("node \"" + n.id + "\" has no output space; run set_deployment first");
    return *n.out_spec;
}

inline Tensor eval_node(const Graph& g, const Node& n, const std::map<std::string, Tensor>& vals,
                        const Tensor& graph_input, OpTally& tally) {
    Representation rep = g.representation();
    bool integer_mode = rep == Representation::IntegerDeployable;
    auto in = [&](std::size_t i) -> const Tensor& { return vals.at(n.inputs.at(i)); };

    switch (n.op) {
        case OpKind::Input: {
            const auto& at = n.input();
            if (graph_input.shape() != at.shape) throw ShapeMismatchError("graph input shape mismatch");
            if (integer_mode) {
                std::int64_t hi = (std::int64_t(1) << at.bits) - 1;
                for (std::int64_t v : graph_input.ints())
                    if (v < 0 || v > hi)
                        throw OutOfRangeError("integer input value " + std::to_string(v) + " outside [0, " +
                                              std::to_string(hi) + "]");
            } else {
                (void)graph_input.reals(); // KindMismatch if an integer blob was passed
            }
            return graph_input;
        }
        case OpKind::Conv2d:
        case OpKind::FullyConnected: {
            const auto& la = n.linear();
            bool conv = n.op == OpKind::Conv2d;
            if (integer_mode) {
                if (la.w.kind() != ValueKind::Integer)
                    throw KindMismatchError("node \"" + n.id + "\": integer execution needs integer weights");
                const Tensor* qb = la.b ? &*la.b : nullptr;
                return conv ? kernel_conv2d_int(la.w, qb, in(0), la.stride, la.pad, tally)
                            : kernel_fully_connected_int(la.w, qb, in(0), tally);
            }
            if (la.w.kind() != ValueKind::Real)
                throw KindMismatchError("node \"" + n.id + "\": real execution needs real weights");
            Tensor w = la.w;
            if (rep != Representation::FullPrecision) {
                if (!la.wq)
                    throw MissingQuantParamsError("node \"" + n.id + "\" has no weight quantizer; quantize first");
                w = fq_weight_forward(la.w, *la.wq);
            }
            const Tensor* b = la.b ? &*la.b : nullptr;
            return conv ? kernel_conv2d_real(w, b, in(0), la.stride, la.pad, tally)
                        : kernel_fully_connected_real(w, b, in(0), tally);
        }
        case OpKind::BatchNorm: {
            const auto& bn = n.bn();
            if (rep == Representation::FullPrecision || rep == Representation::FakeQuantized)
                return kernel_bn_real(bn.gamma, bn.sigma, bn.mu, bn.beta, in(0), tally);
            if (!bn.q) throw MissingQuantParamsError("node \"" + n.id + "\" has no batch-norm quantizer");
            if (integer_mode) {
                if (!bn.q->q_lambda_out)
                    throw MissingQuantParamsError("node \"" + n.id + "\" was not integerized");
                return kernel_bn_int(bn.q->q_kappa, *bn.q->q_lambda_out, in(0), tally);
            }
            std::size_t c = bn.q->q_kappa.ints().size();
            std::vector<double> kappa(c), lambda(c);
            for (std::size_t i = 0; i < c; ++i) {
                kappa[i] = bn.q->eps_kappa * static_cast<double>(bn.q->q_kappa.ints()[i]);
                lambda[i] = bn.q->eps_lambda * static_cast<double>(bn.q->q_lambda.ints()[i]);
                tally.count_real(2);
            }
            return kernel_bn_affine_real(kappa, lambda, in(0), tally);
        }
        case OpKind::Activation: {
            if (rep == Representation::FullPrecision) return kernel_relu_real(in(0), tally);
            const auto& at = n.act();
            if (integer_mode) {
                if (!at.rq) throw MissingQuantParamsError("node \"" + n.id + "\" has no requantization parameters");
                QuantSpec spec = at.params().spec();
                return kernel_act_int(in(0), *at.rq, spec.lo, spec.hi, tally);
            }
            Tensor y = fq_act_forward(in(0), at.params());
            tally.count_real(3 * y.size());
            return y;
        }
        case OpKind::ThresholdActivation: {
            const auto& at = n.thresh();
            if (integer_mode) return kernel_threshold_act(in(0), at.thresholds, at.n_levels, tally);
            if (rep != Representation::QuantizedDeployable)
                throw UnsupportedOpError("threshold activations exist only at deployable representations");
            // Recover the integer image of the (on-lattice) input, run the
            // ladder, place the count back on the activation lattice.
            const QuantSpec& in_spec = require_out_spec(g.node(n.inputs[0]));
            const QuantSpec& out_spec = require_out_spec(n);
            const auto& xv = in(0).reals();
            std::vector<std::int64_t> q(xv.size());
            for (std::size_t i = 0; i < xv.size(); ++i) {
                q[i] = std::llround(xv[i] / in_spec.eps);
                tally.count_real(2);
            }
            Tensor counts = kernel_threshold_act(Tensor::integer(in(0).shape(), std::move(q)), at.thresholds,
                                                 at.n_levels, tally);
            std::vector<double> out(counts.ints().size());
            for (std::size_t i = 0; i < out.size(); ++i) {
                out[i] = out_spec.eps * static_cast<double>(counts.ints()[i]);
                tally.count_real(1);
            }
            return Tensor::real(in(0).shape(), std::move(out));
        }
        case OpKind::Add: {
            std::vector<const Tensor*> xs;
            xs.reserve(n.inputs.size());
            for (std::size_t i = 0; i < n.inputs.size(); ++i) xs.push_back(&in(i));
            if (integer_mode) return kernel_add_int(xs, n.add().branch_rq, tally);
            return kernel_add_real(xs, tally);
        }
        case OpKind::MaxPool2d: {
            const auto& p = n.pool();
            return integer_mode ? kernel_maxpool_int(in(0), p.kh, p.kw, p.stride, tally)
                                : kernel_maxpool_real(in(0), p.kh, p.kw, p.stride, tally);
        }
        case OpKind::AvgPool2d: {
            const auto& p = n.pool();
            if (integer_mode) {
                if (!p.m || !p.d)
                    throw MissingQuantParamsError("node \"" + n.id + "\" has no pooling multiplier; integerize first");
                return kernel_avgpool_int(in(0), p.kh, p.kw, p.stride, *p.m, *p.d, tally);
            }
            return kernel_avgpool_real(in(0), p.kh, p.kw, p.stride, tally);
        }
        case OpKind::Output:
            return in(0);
    }
    throw UnsupportedOpError("unhandled operator");
}

} // namespace detail

/// Execute the graph on one sample. Real representations take a real tensor,
/// the integer-deployable representation takes the integer input image.
/// Execution is single-threaded with fixed accumulation order: two runs on
/// the same graph and input produce bit-identical traces.
inline RunResult run(const Graph& g, const Tensor& input) {
    auto violations = validate(g);
    if (!violations.empty())
        throw InvalidGraphError("refusing to execute an invalid graph: " + violations.front().rule + " at \"" +
                                violations.front().node_id + "\"");
    std::map<std::string, Tensor> vals;
    ExecTrace trace;
    for (const auto& id : g.topo_order()) {
        const Node& n = g.node(id);
        OpTally tally;
        Tensor out = detail::eval_node(g, n, vals, input, tally);
        trace.per_node.emplace(id, NodeTrace{out, tally});
        vals.emplace(id, std::move(out));
    }
    return {vals.at(g.output_id()), std::move(trace)};
}

} // namespace qlower
