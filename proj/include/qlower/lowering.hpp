#pragma once

// The pass pipeline. Each pass takes a graph by value and returns the
// transformed graph; representation preconditions are enforced so passes
// cannot run out of order.
//
// The full lowering of a float graph is:
//
//   calibrate -> to_fakequantized -> [fold_bn] -> bn_quantizer
//     -> harden_weights -> set_deployment -> [merge_bn_thresholds]
//     -> integerize
//
// fold_bn is an alternative to keeping integer batch-norm nodes;
// merge_bn_thresholds is an alternative that removes them after deployment
// specs are known.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qlower/errors.hpp"
#include "qlower/graph.hpp"
#include "qlower/interpreter.hpp"
#include "qlower/pact.hpp"
#include "qlower/requant.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

/// Non-fatal findings produced by passes (dead activations, underflowing
/// batch-norm offsets, ...). Callers that do not care can pass nullptr.
struct PassNote {
    std::string code;
    std::string node_id;
    std::string message;
};
using PassNotes = std::vector<PassNote>;

namespace detail {

inline void require_rep(const Graph& g, Representation want, const char* pass) {
    if (g.representation() != want)
        throw PassOrderError(std::string(pass) + " requires a " + to_string(want) + " graph, got " +
                             to_string(g.representation()));
}

inline void require_rep_at_most(const Graph& g, Representation limit, const char* pass) {
    if (static_cast<int>(g.representation()) > static_cast<int>(limit))
        throw PassOrderError(std::string(pass) + " must run before " + to_string(limit) +
                             " is left behind, got " + to_string(g.representation()));
}

inline void add_note(PassNotes* notes, std::string code, std::string node_id, std::string message) {
    if (notes) notes->push_back({std::move(code), std::move(node_id), std::move(message)});
}

inline std::int64_t to_i64_checked(__int128 v, const char* what) {
    if (v > static_cast<__int128>(std::numeric_limits<std::int64_t>::max()) ||
        v < static_cast<__int128>(std::numeric_limits<std::int64_t>::min()))
        throw OverflowError(std::string(what) + " does not fit in 64-bit integers");
    return static_cast<std::int64_t>(v);
}

/// Smallest bit count whose value span covers [lo, hi]; the span check in
/// QuantSpec::validate is (hi - lo) <= 2^bits - 1.
inline int needed_bits(std::int64_t lo, std::int64_t hi) {
    __int128 span = static_cast<__int128>(hi) - static_cast<__int128>(lo);
    int bits = 1;
    while (((static_cast<__int128>(1) << bits) - 1) < span) {
        ++bits;
        if (bits > 62) throw OverflowError("value span needs more than 62 bits");
    }
    return bits;
}

inline double max_abs_real(const Tensor& t) {
    double m = 0.0;
    for (double v : t.reals()) m = std::max(m, std::abs(v));
    return m;
}

/// Per-output-channel sums of the positive and the negative integer weights.
/// Multiplying them by the input bounds gives exact accumulator extremes.
struct SignedSums {
    __int128 pos = 0;
    __int128 neg = 0;
};

inline std::vector<SignedSums> channel_signed_sums(const Tensor& qw) {
    std::size_t oc = static_cast<std::size_t>(qw.shape()[0]);
    std::size_t per = qw.size() / oc;
    std::vector<SignedSums> out(oc);
    const auto& q = qw.ints();
    for (std::size_t c = 0; c < oc; ++c)
        for (std::size_t i = 0; i < per; ++i) {
            std::int64_t v = q[c * per + i];
            if (v >= 0)
                out[c].pos += v;
            else
                out[c].neg += v;
        }
    return out;
}

/// Integer image of a hardened weight tensor. Hardened weights are exact
/// lattice multiples, so rounding recovers the image exactly; a residue
/// beyond fp noise means harden_weights has not run.
inline Tensor weight_integer_image(const Tensor& w, const WeightQuantParams& wq) {
    QuantSpec spec = wq.spec();
    Tensor q = Tensor::integer(w.shape());
    const auto& src = w.reals();
    auto& dst = q.ints();
    for (std::size_t i = 0; i < src.size(); ++i) {
        double scaled = src[i] / spec.eps;
        double rounded = std::nearbyint(scaled);
        if (std::abs(scaled - rounded) > 1e-6)
            throw PassOrderError("weights are not on the quantization lattice; run harden_weights first");
        if (rounded < static_cast<double>(spec.lo) || rounded > static_cast<double>(spec.hi))
            throw OutOfRangeError("hardened weight escapes its own clip window");
        dst[i] = static_cast<std::int64_t>(std::llround(scaled));
    }
    return q;
}

}  // namespace detail

/// Runs the float graph over the calibration batches and records, per
/// activation, the largest output seen (the initial clip bound) and, per
/// linear op, the weight range. Dead activations get a tiny positive bound
/// and a DeadActivation note so later passes never divide by zero.
inline Graph calibrate(Graph g, const std::vector<Tensor>& batches, PassNotes* notes = nullptr) {
    detail::require_rep(g, Representation::FullPrecision, "calibrate");
    if (batches.empty()) throw EmptyCalibrationSetError("calibrate needs at least one input batch");

    constexpr double kFloor = 0x1p-20;
    std::map<std::string, double> act_max;
    for (const Tensor& batch : batches) {
        RunResult res = run(g, batch);
        for (const auto& [id, n] : g.nodes()) {
            if (n.op != OpKind::Activation) continue;
            double m = 0.0;
            for (double v : res.trace.per_node.at(id).output.reals()) m = std::max(m, v);
            auto it = act_max.find(id);
            if (it == act_max.end())
                act_max[id] = m;
            else
                it->second = std::max(it->second, m);
        }
    }

    for (const auto& [id, m] : act_max) {
        Node n = g.node(id);
        auto& at = n.act();
        if (m <= 0.0) {
            at.beta_y = kFloor;
            detail::add_note(notes, "DeadActivation", id,
                             "activation never produced a positive value during calibration");
        } else {
            at.beta_y = m;
        }
        g.replace_node(n);
    }

    for (const auto& [id, node] : std::map<std::string, Node>(g.nodes())) {
        if (node.op != OpKind::Conv2d && node.op != OpKind::FullyConnected) continue;
        Node n = node;
        auto& at = n.linear();
        const auto& w = at.w.reals();
        double lo = *std::min_element(w.begin(), w.end());
        double hi = *std::max_element(w.begin(), w.end());
        if (hi <= lo) {
            hi = lo + kFloor;
            detail::add_note(notes, "DegenerateWeightRange", id, "all weights are identical");
        }
        at.w_min = lo;
        at.w_max = hi;
        g.replace_node(n);
    }
    return g;
}

/// Attaches quantizers everywhere: activations get clipped uniform quantizers
/// at bits_a using the calibrated bound, weights get offset-free lattices at
/// bits_w over the calibrated range. The graph then evaluates through the
/// quantize-dequantize pair instead of raw float ops.
inline Graph to_fakequantized(Graph g, int bits_a, int bits_w) {
    detail::require_rep(g, Representation::FullPrecision, "to_fakequantized");
    for (const auto& [id, node] : std::map<std::string, Node>(g.nodes())) {
        Node n = node;
        if (n.op == OpKind::Activation) {
            auto& at = n.act();
            if (!at.beta_y) throw NotCalibratedError("activation " + id + " has no clip bound; run calibrate");
            at.bits = bits_a;
            ActQuantParams{*at.beta_y, bits_a}.spec().validate();
        } else if (n.op == OpKind::Conv2d || n.op == OpKind::FullyConnected) {
            auto& at = n.linear();
            if (!at.w_min || !at.w_max)
                throw NotCalibratedError("linear op " + id + " has no weight range; run calibrate");
            at.wq = WeightQuantParams{*at.w_min, *at.w_max, bits_w};
            at.wq->spec().validate();
        } else {
            continue;
        }
        g.replace_node(n);
    }
    g.set_representation(Representation::FakeQuantized);
    return g;
}

/// Folds every batch-norm into the linear op that feeds it:
///   w <- (gamma/sigma) * w,  b <- (gamma/sigma) * (b - mu) + beta
/// and removes the node. At FakeQuantized the weight clip window is reset
/// from the folded tensor since the old calibrated range no longer applies.
inline Graph fold_bn(Graph g) {
    detail::require_rep_at_most(g, Representation::FakeQuantized, "fold_bn");

    std::vector<std::string> bn_ids;
    for (const auto& [id, n] : g.nodes())
        if (n.op == OpKind::BatchNorm) bn_ids.push_back(id);

    for (const std::string& bn_id : bn_ids) {
        const Node bn = g.node(bn_id);
        const auto& bat = bn.bn();
        const Node& pred = g.node(bn.inputs.at(0));
        if (pred.op != OpKind::Conv2d && pred.op != OpKind::FullyConnected)
            throw NotFoldableError("batch norm " + bn_id + " does not follow a linear op");
        if (g.consumers(pred.id).size() != 1)
            throw NotFoldableError("linear op " + pred.id + " feeds more than its batch norm");

        Node lin = pred;
        auto& lat = lin.linear();
        const auto& gamma = bat.gamma.reals();
        const auto& sigma = bat.sigma.reals();
        const auto& mu = bat.mu.reals();
        const auto& beta = bat.beta.reals();
        std::size_t oc = static_cast<std::size_t>(lat.w.shape()[0]);
        if (gamma.size() != oc)
            throw ShapeMismatchError("batch norm channel count does not match the producing linear op");

        std::size_t per = lat.w.size() / oc;
        auto& w = lat.w.reals();
        Tensor b = lat.b ? *lat.b : Tensor::real({static_cast<std::int64_t>(oc)});
        auto& bv = b.reals();
        for (std::size_t c = 0; c < oc; ++c) {
            double scale = gamma[c] / sigma[c];
            for (std::size_t i = 0; i < per; ++i) w[c * per + i] *= scale;
            bv[c] = scale * (bv[c] - mu[c]) + beta[c];
        }
        lat.b = std::move(b);

        double lo = *std::min_element(w.begin(), w.end());
        double hi = *std::max_element(w.begin(), w.end());
        if (hi <= lo) hi = lo + 0x1p-20;
        lat.w_min = lo;
        lat.w_max = hi;
        if (lat.wq) lat.wq = WeightQuantParams{lo, hi, lat.wq->bits};

        for (const std::string& cid : g.consumers(bn_id)) {
            Node c = g.node(cid);
            for (auto& in : c.inputs)
                if (in == bn_id) in = lin.id;
            g.replace_node(c);
        }
        g.replace_node(lin);
        g.remove_node(bn_id);
    }
    return g;
}

/// Quantizes batch-norm parameters onto symmetric bits wide lattices:
/// kappa = gamma/sigma and lambda = beta - kappa*mu, each with its own
/// quantum picked from the largest magnitude present.
inline Graph bn_quantizer(Graph g, int bits_bn) {
    detail::require_rep(g, Representation::FakeQuantized, "bn_quantizer");
    for (const auto& [id, node] : std::map<std::string, Node>(g.nodes())) {
        if (node.op != OpKind::BatchNorm) continue;
        Node n = node;
        auto& at = n.bn();
        std::size_t c = at.gamma.size();
        Tensor kappa = Tensor::real({static_cast<std::int64_t>(c)});
        Tensor lambda = Tensor::real({static_cast<std::int64_t>(c)});
        for (std::size_t i = 0; i < c; ++i) {
            double k = at.gamma.reals()[i] / at.sigma.reals()[i];
            kappa.reals()[i] = k;
            lambda.reals()[i] = at.beta.reals()[i] - k * at.mu.reals()[i];
        }
        double kmax = detail::max_abs_real(kappa);
        double lmax = detail::max_abs_real(lambda);
        QuantSpec kspec = QuantSpec::symmetric(kmax > 0.0 ? kmax : 1.0, bits_bn);
        QuantSpec lspec = QuantSpec::symmetric(lmax > 0.0 ? lmax : 1.0, bits_bn);
        BnQuantParams q;
        q.bits = bits_bn;
        q.eps_kappa = kspec.eps;
        q.eps_lambda = lspec.eps;
        q.q_kappa = quantize_linear(kappa, kspec);
        q.q_lambda = quantize_linear(lambda, lspec);
        at.q = std::move(q);
        g.replace_node(n);
    }
    return g;
}

/// Snaps every weight tensor onto its quantization lattice (one
/// quantize-dequantize round trip). Idempotent; after this the fake-quantized
/// forward pass and the plain forward pass agree exactly.
inline Graph harden_weights(Graph g) {
    detail::require_rep(g, Representation::FakeQuantized, "harden_weights");
    for (const auto& [id, node] : std::map<std::string, Node>(g.nodes())) {
        if (node.op != OpKind::Conv2d && node.op != OpKind::FullyConnected) continue;
        Node n = node;
        auto& at = n.linear();
        if (!at.wq) throw MissingQuantParamsError("linear op " + id + " has no weight quantizer");
        at.w = fq_weight_forward(at.w, *at.wq);
        g.replace_node(n);
    }
    return g;
}

namespace detail {

/// Provisional bias headroom for deployment bounds, in output lattice steps:
/// covers the bias quantization error plus the requantizer defect before
/// either is known exactly. integerize replaces these with exact values.
inline std::int64_t provisional_bias_slack(double bias, double eps_phi) {
    return static_cast<std::int64_t>(std::ceil(3.0 * std::abs(bias) / eps_phi)) + 2;
}

}  // namespace detail

/// Assigns every edge its deployment spec: the input quantum propagates
/// through the graph, each node records the quantum, offset and integer
/// bounds of its output. Bounds here are sound over-estimates; integerize
/// tightens them once the exact integer parameters exist.
inline Graph set_deployment(Graph g, double eps_in) {
    detail::require_rep(g, Representation::FakeQuantized, "set_deployment");
    if (!(eps_in > 0.0) || !std::isfinite(eps_in)) throw OutOfRangeError("eps_in must be positive and finite");

    for (const std::string& id : g.topo_order()) {
        Node n = g.node(id);
        QuantSpec spec;
        auto in_spec = [&](std::size_t i) -> QuantSpec {
            const auto& s = g.node(n.inputs.at(i)).out_spec;
            if (!s) throw MissingQuantParamsError("node " + n.inputs.at(i) + " has no deployment spec yet");
            return *s;
        };
        switch (n.op) {
            case OpKind::Input: {
                int bits = n.input().bits;
                spec = QuantSpec{eps_in, 0.0, bits, 0, (std::int64_t(1) << bits) - 1};
                break;
            }
            case OpKind::Conv2d:
            case OpKind::FullyConnected: {
                const auto& at = n.linear();
                if (!at.wq) throw MissingQuantParamsError("linear op " + id + " has no weight quantizer");
                QuantSpec x = in_spec(0);
                double eps_phi = at.wq->eps() * x.eps;
                Tensor qw = detail::weight_integer_image(at.w, *at.wq);
                auto sums = detail::channel_signed_sums(qw);
                std::int64_t xlo = x.lo, xhi = x.hi;
                if (n.op == OpKind::Conv2d && at.pad > 0) xlo = std::min<std::int64_t>(xlo, 0);
                __int128 lo = 0, hi = 0;
                for (std::size_t c = 0; c < sums.size(); ++c) {
                    __int128 clo = sums[c].pos * xlo + sums[c].neg * xhi;
                    __int128 chi = sums[c].pos * xhi + sums[c].neg * xlo;
                    if (at.b) {
                        std::int64_t slack = detail::provisional_bias_slack(at.b->reals()[c], eps_phi);
                        clo -= slack;
                        chi += slack;
                    }
                    if (c == 0 || clo < lo) lo = clo;
                    if (c == 0 || chi > hi) hi = chi;
                }
                std::int64_t l = detail::to_i64_checked(lo, "accumulator lower bound");
                std::int64_t h = detail::to_i64_checked(hi, "accumulator upper bound");
                spec = QuantSpec{eps_phi, 0.0, detail::needed_bits(l, h), l, h};
                break;
            }
            case OpKind::BatchNorm: {
                const auto& at = n.bn();
                if (!at.q) throw MissingQuantParamsError("batch norm " + id + " has no quantized parameters");
                QuantSpec x = in_spec(0);
                double eps_out = at.q->eps_kappa * x.eps;
                std::int64_t m_lambda = ratio_parts(at.q->eps_lambda, 0, eps_out).m;
                __int128 lo = 0, hi = 0;
                const auto& qk = at.q->q_kappa.ints();
                const auto& ql = at.q->q_lambda.ints();
                for (std::size_t c = 0; c < qk.size(); ++c) {
                    __int128 off = static_cast<__int128>(m_lambda) * ql[c];
                    __int128 clo = static_cast<__int128>(qk[c]) * x.lo + off;
                    __int128 chi = static_cast<__int128>(qk[c]) * x.hi + off;
                    if (c == 0 || clo < lo) lo = clo;
                    if (c == 0 || chi > hi) hi = chi;
                }
                std::int64_t l = detail::to_i64_checked(lo, "batch norm lower bound");
                std::int64_t h = detail::to_i64_checked(hi, "batch norm upper bound");
                spec = QuantSpec{eps_out, 0.0, detail::needed_bits(l, h), l, h};
                break;
            }
            case OpKind::Activation: {
                const auto& at = n.act();
                if (!at.has_params()) throw MissingQuantParamsError("activation " + id + " has no quantizer");
                spec = at.params().spec();
                break;
            }
            case OpKind::Add: {
                QuantSpec ref = in_spec(0);
                __int128 lo = ref.lo, hi = ref.hi;
                for (std::size_t i = 1; i < n.inputs.size(); ++i) {
                    QuantSpec b = in_spec(i);
                    double ratio = b.eps / ref.eps;
                    double blo = std::min(0.0, std::floor(ratio * static_cast<double>(b.lo)) - 1.0);
                    double bhi = std::max(0.0, std::ceil(ratio * static_cast<double>(b.hi)) + 1.0);
                    lo += static_cast<__int128>(blo);
                    hi += static_cast<__int128>(bhi);
                }
                std::int64_t l = detail::to_i64_checked(lo, "add lower bound");
                std::int64_t h = detail::to_i64_checked(hi, "add upper bound");
                spec = QuantSpec{ref.eps, 0.0, detail::needed_bits(l, h), l, h};
                break;
            }
            case OpKind::MaxPool2d: {
                spec = in_spec(0);
                break;
            }
            case OpKind::AvgPool2d: {
                QuantSpec x = in_spec(0);
                std::int64_t l = std::min<std::int64_t>(x.lo, 0);
                std::int64_t h = std::max<std::int64_t>(x.hi, 0);
                spec = QuantSpec{x.eps, 0.0, detail::needed_bits(l, h), l, h};
                break;
            }
            case OpKind::Output: {
                spec = in_spec(0);
                break;
            }
            case OpKind::ThresholdActivation:
                throw UnsupportedOpError("threshold activations appear only after set_deployment");
        }
        spec.validate();
        n.out_spec = spec;
        g.replace_node(n);
    }
    g.set_eps_in(eps_in);
    g.set_representation(Representation::QuantizedDeployable);
    return g;
}

/// Absorbs a nonzero input offset into the first linear op: inputs stored as
/// alpha + eps*q feed the graph as eps*q once each output channel's bias
/// gains alpha times the channel weight sum. Padding would inject raw zeros
/// that no longer mean "alpha", so padded convolutions are rejected.
inline Graph add_input_bias(Graph g, double input_alpha) {
    detail::require_rep_at_most(g, Representation::FakeQuantized, "add_input_bias");
    const std::string in_id = g.input_id();
    auto consumers = g.consumers(in_id);
    if (consumers.size() != 1) throw NoLeadingLinearError("graph input feeds more than one node");
    Node lin = g.node(consumers[0]);
    if (lin.op != OpKind::Conv2d && lin.op != OpKind::FullyConnected)
        throw NoLeadingLinearError("first op after the input must be linear to absorb an input offset");
    auto& at = lin.linear();
    if (lin.op == OpKind::Conv2d && at.pad != 0)
        throw UnsupportedOpError("cannot absorb an input offset through zero padding");

    std::size_t oc = static_cast<std::size_t>(at.w.shape()[0]);
    std::size_t per = at.w.size() / oc;
    Tensor b = at.b ? *at.b : Tensor::real({static_cast<std::int64_t>(oc)});
    for (std::size_t c = 0; c < oc; ++c) {
        double wsum = 0.0;
        for (std::size_t i = 0; i < per; ++i) wsum += at.w.reals()[c * per + i];
        b.reals()[c] += input_alpha * wsum;
    }
    at.b = std::move(b);
    g.replace_node(lin);
    return g;
}

namespace detail {

/// Exact integer output interval of a node, given exact input intervals.
/// Used by integerize to replace the provisional deployment bounds.
inline void tighten_linear_bounds(Node& n, const QuantSpec& x) {
    const auto& at = n.linear();
    auto sums = channel_signed_sums(at.w);
    std::int64_t xlo = x.lo, xhi = x.hi;
    if (n.op == OpKind::Conv2d && at.pad > 0) xlo = std::min<std::int64_t>(xlo, 0);
    __int128 lo = 0, hi = 0;
    for (std::size_t c = 0; c < sums.size(); ++c) {
        __int128 qb = at.b ? at.b->ints()[c] : 0;
        __int128 clo = sums[c].pos * xlo + sums[c].neg * xhi + qb;
        __int128 chi = sums[c].pos * xhi + sums[c].neg * xlo + qb;
        if (c == 0 || clo < lo) lo = clo;
        if (c == 0 || chi > hi) hi = chi;
    }
    std::int64_t l = to_i64_checked(lo, "accumulator lower bound");
    std::int64_t h = to_i64_checked(hi, "accumulator upper bound");
    n.out_spec->lo = l;
    n.out_spec->hi = h;
    n.out_spec->bits = needed_bits(l, h);
}

}  // namespace detail

/// Rewrites the graph into pure integer form: weight and bias tensors become
/// their integer images, every cross-lattice edge gets an exact
/// multiplier/shift requantizer, batch-norm offsets move onto the product
/// lattice, and average pools get their reciprocal multiplier. Output bounds
/// are recomputed exactly as the integer parameters become known.
inline Graph integerize(Graph g, double eps_in, std::int64_t factor_act = 16, std::int64_t factor_add = 256,
                        PassNotes* notes = nullptr) {
    detail::require_rep(g, Representation::QuantizedDeployable, "integerize");

    {
        const auto& in_spec = g.node(g.input_id()).out_spec;
        if (!in_spec) throw MissingQuantParamsError("graph input has no deployment spec");
        if (in_spec->eps != eps_in)
            throw PassOrderError("eps_in disagrees with the deployed input quantum; rerun set_deployment");
    }

    for (const std::string& id : g.topo_order()) {
        Node n = g.node(id);
        if (!n.out_spec && n.op != OpKind::Input)
            throw MissingQuantParamsError("node " + id + " has no deployment spec");
        auto in_spec = [&](std::size_t i) -> const QuantSpec& { return *g.node(n.inputs.at(i)).out_spec; };

        switch (n.op) {
            case OpKind::Input:
                break;
            case OpKind::Conv2d:
            case OpKind::FullyConnected: {
                auto& at = n.linear();
                const QuantSpec& x = in_spec(0);
                if (x.alpha != 0.0)
                    throw NonCanonicalError("linear op " + id +
                                            " consumes an offset lattice; run add_input_bias first");
                double eps_phi = n.out_spec->eps;
                at.w = detail::weight_integer_image(at.w, *at.wq);
                if (at.b) {
                    double bmax = detail::max_abs_real(*at.b);
                    if (bmax == 0.0) {
                        at.b = Tensor::integer(at.b->shape());
                        at.bias_rq.reset();
                    } else {
                        QuantSpec bspec = QuantSpec::symmetric(bmax, at.wq->bits);
                        Tensor qb0 = quantize_linear(*at.b, bspec);
                        std::int64_t mag = 0;
                        for (std::int64_t v : qb0.ints()) mag = std::max(mag, std::abs(v));
                        RequantParams rq = make_requant_params(bspec.eps, eps_phi, factor_act, mag);
                        at.b = requantize(qb0, rq);
                        at.bias_rq = BiasQuant{bspec.eps, rq};
                    }
                }
                detail::tighten_linear_bounds(n, x);
                break;
            }
            case OpKind::BatchNorm: {
                auto& at = n.bn();
                if (!at.q) throw MissingQuantParamsError("batch norm " + id + " has no quantized parameters");
                double eps_out = n.out_spec->eps;
                std::int64_t m_lambda = ratio_parts(at.q->eps_lambda, 0, eps_out).m;
                at.q->lambda_m = m_lambda;
                Tensor qlo = Tensor::integer(at.q->q_lambda.shape());
                bool nonzero_lambda = false;
                for (std::size_t i = 0; i < qlo.size(); ++i) {
                    std::int64_t ql = at.q->q_lambda.ints()[i];
                    if (ql != 0) nonzero_lambda = true;
                    qlo.ints()[i] = checked_mul(m_lambda, ql);
                }
                if (m_lambda == 0 && nonzero_lambda)
                    detail::add_note(notes, "LambdaUnderflow", id,
                                     "batch norm offset quantum is below the output quantum; offsets drop to zero");
                at.q->q_lambda_out = std::move(qlo);
                const QuantSpec& x = in_spec(0);
                __int128 lo = 0, hi = 0;
                const auto& qk = at.q->q_kappa.ints();
                for (std::size_t c = 0; c < qk.size(); ++c) {
                    __int128 off = at.q->q_lambda_out->ints()[c];
                    __int128 clo = static_cast<__int128>(qk[c]) * x.lo + off;
                    __int128 chi = static_cast<__int128>(qk[c]) * x.hi + off;
                    if (c == 0 || clo < lo) lo = clo;
                    if (c == 0 || chi > hi) hi = chi;
                }
                n.out_spec->lo = detail::to_i64_checked(lo, "batch norm lower bound");
                n.out_spec->hi = detail::to_i64_checked(hi, "batch norm upper bound");
                n.out_spec->bits = detail::needed_bits(n.out_spec->lo, n.out_spec->hi);
                break;
            }
            case OpKind::Activation: {
                auto& at = n.act();
                const QuantSpec& x = in_spec(0);
                std::int64_t mag = std::max(std::abs(x.lo), std::abs(x.hi));
                at.rq = make_requant_params(x.eps, n.out_spec->eps, factor_act, mag);
                break;
            }
            case OpKind::ThresholdActivation:
                break;
            case OpKind::Add: {
                auto& at = n.add();
                const QuantSpec& ref = in_spec(0);
                at.branch_rq.clear();
                __int128 lo = ref.lo, hi = ref.hi;
                for (std::size_t i = 1; i < n.inputs.size(); ++i) {
                    const QuantSpec& b = in_spec(i);
                    std::int64_t mag = std::max(std::abs(b.lo), std::abs(b.hi));
                    RequantParams rq = make_requant_params(b.eps, ref.eps, factor_add, mag);
                    lo += requantize_scalar(b.lo, rq);
                    hi += requantize_scalar(b.hi, rq);
                    at.branch_rq.push_back(rq);
                }
                n.out_spec->lo = detail::to_i64_checked(lo, "add lower bound");
                n.out_spec->hi = detail::to_i64_checked(hi, "add upper bound");
                n.out_spec->bits = detail::needed_bits(n.out_spec->lo, n.out_spec->hi);
                break;
            }
            case OpKind::MaxPool2d: {
                const QuantSpec& x = in_spec(0);
                n.out_spec->lo = x.lo;
                n.out_spec->hi = x.hi;
                n.out_spec->bits = x.bits;
                break;
            }
            case OpKind::AvgPool2d: {
                auto& at = n.pool();
                std::int64_t k = static_cast<std::int64_t>(at.kh) * at.kw;
                int d = 0;
                while (d <= 62) {
                    std::int64_t pow2 = std::int64_t(1) << d;
                    if (factor_act * (pow2 % k) <= pow2) break;
                    ++d;
                }
                if (d > 62) throw OverflowUnsatisfiableError("average pool reciprocal needs a shift above 62");
                at.d = d;
                at.m = (std::int64_t(1) << d) / k;
                const QuantSpec& x = in_spec(0);
                auto apply = [&](std::int64_t q) {
                    return requantize_scalar(checked_mul(q, k), RequantParams{*at.m, d, x.eps, x.eps});
                };
                n.out_spec->lo = apply(x.lo);
                n.out_spec->hi = apply(x.hi);
                n.out_spec->bits = detail::needed_bits(n.out_spec->lo, n.out_spec->hi);
                break;
            }
            case OpKind::Output: {
                n.out_spec = in_spec(0);
                break;
            }
        }
        if (n.out_spec) n.out_spec->validate();
        g.replace_node(n);
    }
    g.set_representation(Representation::IntegerDeployable);
    return g;
}

/// Threshold ladder for one channel of a (linear -> batch norm -> activation)
/// span: the quantized activation output reaches level i exactly when the
/// accumulator q satisfies q >= TH_i, with
///   TH_i = ceil((sigma/gamma * i * eps_y - beta*sigma/gamma + mu) / eps_phi)
/// for i = 0..n_levels. Counting satisfied thresholds reproduces
/// quantize(act(bn(eps_phi * q))) exactly for every integer q.
inline std::vector<std::int64_t> build_thresholds(double gamma, double sigma, double mu, double beta,
                                                  double eps_phi, double eps_y, std::int64_t n_levels) {
    if (!(gamma > 0.0) || !(sigma > 0.0))
        throw NonMonotoneThresholdsError("threshold construction needs positive gamma and sigma");
    std::vector<std::int64_t> th(static_cast<std::size_t>(n_levels) + 1);
    double r = sigma / gamma;
    for (std::int64_t i = 0; i <= n_levels; ++i) {
        double v = std::ceil((r * static_cast<double>(i) * eps_y - beta * r + mu) / eps_phi);
        if (!(std::abs(v) < 0x1p62)) throw OverflowError("threshold escapes 62-bit range");
        th[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(v);
    }
    return th;
}

/// Collapses (linear -> batch norm -> activation) spans into threshold
/// ladders built by build_thresholds. The comparison ladder reproduces
/// quantize(act(bn(.))) bit for bit while removing all batch-norm
/// arithmetic. Ladders are built from the original real parameters, so no
/// batch-norm quantization error is introduced. Tables grow as 2^bits, so
/// activations above 8 bits are rejected.
inline Graph merge_bn_thresholds(Graph g,
                                 const std::optional<std::vector<std::string>>& act_ids = std::nullopt) {
    detail::require_rep(g, Representation::QuantizedDeployable, "merge_bn_thresholds");

    std::vector<std::string> targets;
    if (act_ids) {
        targets = *act_ids;
    } else {
        for (const auto& [id, n] : g.nodes()) {
            if (n.op != OpKind::Activation) continue;
            const Node& pred = g.node(n.inputs.at(0));
            if (pred.op != OpKind::BatchNorm) continue;
            const Node& lin = g.node(pred.inputs.at(0));
            if (lin.op != OpKind::Conv2d && lin.op != OpKind::FullyConnected) continue;
            targets.push_back(id);
        }
    }

    for (const std::string& act_id : targets) {
        const Node act = g.node(act_id);
        if (act.op != OpKind::Activation)
            throw NotFoldableError("node " + act_id + " is not an activation");
        const Node bn = g.node(act.inputs.at(0));
        if (bn.op != OpKind::BatchNorm)
            throw NotFoldableError("activation " + act_id + " does not follow a batch norm");
        const Node& lin = g.node(bn.inputs.at(0));
        if (lin.op != OpKind::Conv2d && lin.op != OpKind::FullyConnected)
            throw NotFoldableError("batch norm " + bn.id + " does not follow a linear op");
        if (!lin.out_spec) throw MissingQuantParamsError("linear op " + lin.id + " has no deployment spec");

        const auto& aat = act.act();
        if (!aat.has_params()) throw MissingQuantParamsError("activation " + act_id + " has no quantizer");
        int bits = *aat.bits;
        if (bits > 8) throw UnsupportedOpError("threshold tables above 8 bits are rejected");
        std::int64_t n_levels = (std::int64_t(1) << bits) - 1;
        double eps_y = aat.params().eps();
        double eps_phi = lin.out_spec->eps;

        const auto& bat = bn.bn();
        std::size_t channels = bat.gamma.size();
        Tensor th = Tensor::integer({static_cast<std::int64_t>(channels), n_levels + 1});
        for (std::size_t c = 0; c < channels; ++c) {
            std::vector<std::int64_t> row =
                build_thresholds(bat.gamma.reals()[c], bat.sigma.reals()[c], bat.mu.reals()[c],
                                 bat.beta.reals()[c], eps_phi, eps_y, n_levels);
            std::copy(row.begin(), row.end(),
                      th.ints().begin() + static_cast<std::ptrdiff_t>(c * (static_cast<std::size_t>(n_levels) + 1)));
        }

        Node merged;
        merged.id = act.id;
        merged.op = OpKind::ThresholdActivation;
        merged.inputs = {lin.id};
        merged.attrs = ThreshActAttrs{std::move(th), n_levels};
        merged.out_spec = act.out_spec;
        g.replace_node(merged);
        g.remove_node(bn.id);
    }
    return g;
}

/// Checks that every edge's producer quantum matches what the consumer's
/// parameters assume. Returns one violation per mismatch; empty means the
/// deployment is internally consistent.
inline std::vector<Violation> check_eps_consistency(const Graph& g) {
    std::vector<Violation> out;
    auto mismatch = [&](const std::string& id, const std::string& rule, const std::string& detail) {
        out.push_back({id, rule, detail});
    };
    for (const auto& [id, n] : g.nodes()) {
        if (!n.out_spec) continue;
        auto spec_of = [&](std::size_t i) -> const QuantSpec* {
            const auto& s = g.node(n.inputs.at(i)).out_spec;
            return s ? &*s : nullptr;
        };
        switch (n.op) {
            case OpKind::Conv2d:
            case OpKind::FullyConnected: {
                const auto* x = spec_of(0);
                if (x && n.linear().wq && n.out_spec->eps != n.linear().wq->eps() * x->eps)
                    mismatch(id, "eps-product", "output quantum is not eps_w * eps_x");
                if (n.linear().bias_rq && n.linear().bias_rq->rq.target_eps != n.out_spec->eps)
                    mismatch(id, "bias-target", "bias requantizer does not target the accumulator lattice");
                break;
            }
            case OpKind::BatchNorm: {
                const auto* x = spec_of(0);
                if (x && n.bn().q && n.out_spec->eps != n.bn().q->eps_kappa * x->eps)
                    mismatch(id, "eps-product", "output quantum is not eps_kappa * eps_phi");
                break;
            }
            case OpKind::Activation: {
                const auto* x = spec_of(0);
                if (n.act().rq) {
                    if (x && n.act().rq->source_eps != x->eps)
                        mismatch(id, "rq-source", "requantizer source quantum differs from the producer");
                    if (n.act().rq->target_eps != n.out_spec->eps)
                        mismatch(id, "rq-target", "requantizer target quantum differs from the output");
                }
                break;
            }
            case OpKind::Add: {
                const auto* ref = spec_of(0);
                if (ref && n.out_spec->eps != ref->eps)
                    mismatch(id, "add-ref", "output quantum differs from the reference branch");
                const auto& rqs = n.add().branch_rq;
                for (std::size_t i = 1; i < n.inputs.size() && i - 1 < rqs.size(); ++i) {
                    const auto* b = spec_of(i);
                    if (b && rqs[i - 1].source_eps != b->eps)
                        mismatch(id, "add-branch", "branch requantizer source differs from its producer");
                    if (ref && rqs[i - 1].target_eps != ref->eps)
                        mismatch(id, "add-branch", "branch requantizer target differs from the reference");
                }
                break;
            }
            case OpKind::MaxPool2d:
            case OpKind::AvgPool2d:
            case OpKind::Output: {
                const auto* x = spec_of(0);
                if (x && n.out_spec->eps != x->eps)
                    mismatch(id, "eps-passthrough", "pooling and output must preserve the quantum");
                break;
            }
            default:
                break;
        }
    }
    return out;
}

/// How batch norms are eliminated (or kept) during lowering.
enum class BnStrategy { Fold, Integer, Thresholds };

inline BnStrategy bn_strategy_from_string(const std::string& s) {
    if (s == "fold") return BnStrategy::Fold;
    if (s == "integer") return BnStrategy::Integer;
    if (s == "thresholds") return BnStrategy::Thresholds;
    throw ParseError("unknown bn strategy: " + s);
}

/// Canonical FakeQuantized -> QuantizedDeployable pipeline used by the CLI.
inline Graph lower(Graph g, double eps_in, int bits_bn, BnStrategy strategy) {
    switch (strategy) {
        case BnStrategy::Fold:
            g = fold_bn(std::move(g));
            break;
        case BnStrategy::Integer:
        case BnStrategy::Thresholds:
            g = bn_quantizer(std::move(g), bits_bn);
            break;
    }
    g = harden_weights(std::move(g));
    g = set_deployment(std::move(g), eps_in);
    if (strategy == BnStrategy::Thresholds) g = merge_bn_thresholds(std::move(g));
    return g;
}

}  // namespace qlower
