#pragma once

// Soundness checking between representations. The integer graph carries
// enough information (quanta, requantizer defects, integer bounds) to derive,
// per node, a bound on how far its dequantized integer output can drift from
// the real-valued deployable graph. compare_representations measures the
// actual drift on concrete inputs and checks it against those bounds.

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
#include "qlower/requant.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

/// Deviation budget for one node, split by cause. total is what the
/// measured deviation is checked against; exact claims the two
/// representations produce bit-identical doubles.
struct NodeBound {
    double total = 0.0;
    double upstream_term = 0.0;
    double requant_term = 0.0;
    double lattice_term = 0.0;
    double fp_term = 0.0;
    bool exact = false;
};

namespace detail {

inline bool is_pow2(double x) {
    int e;
    return std::frexp(x, &e) == 0.5;
}

inline std::int64_t spec_mag(const QuantSpec& s) { return std::max(std::abs(s.lo), std::abs(s.hi)); }

/// Residual of a requantizer: eps_src/eps_dst - m/2^d, known to sit in
/// [0, 2^-d). Evaluated in doubles with a relative pad so the result stays
/// an upper bound.
inline double requant_defect(const RequantParams& rq) {
    double ratio = rq.source_eps / rq.target_eps;
    double e = ratio - std::ldexp(static_cast<double>(rq.m), -rq.d);
    if (e < 0.0) e = 0.0;
    return e * (1.0 + 0x1p-40) + ratio * 0x1p-50;
}

inline bool requant_is_exact(const RequantParams& rq) {
    RatioParts parts = ratio_parts(rq.source_eps, rq.d, rq.target_eps);
    return parts.exact() && parts.m == rq.m;
}

/// Rounding headroom for a node that accumulates len products of combined
/// magnitude at most mag. Generous relative to IEEE error analysis; the
/// budgets here dwarf it anyway.
inline double fp_slack(std::size_t len, double mag) {
    return static_cast<double>(len + 4) * mag * 0x1p-51;
}

}  // namespace detail

/// Per-node deviation bounds between the real deployable graph and the
/// dequantized integer graph, composed in topological order. Takes the
/// integer graph; everything needed is recorded on it.
inline std::map<std::string, NodeBound> derive_bounds(const Graph& g) {
    if (g.representation() != Representation::IntegerDeployable)
        throw PassOrderError("bounds derive from an IntegerDeployable graph");

    std::map<std::string, NodeBound> out;
    for (const std::string& id : g.topo_order()) {
        const Node& n = g.node(id);
        NodeBound b;
        auto in_bound = [&](std::size_t i) -> const NodeBound& { return out.at(n.inputs.at(i)); };
        auto in_spec = [&](std::size_t i) -> const QuantSpec& { return *g.node(n.inputs.at(i)).out_spec; };

        switch (n.op) {
            case OpKind::Input: {
                b.exact = true;
                break;
            }
            case OpKind::Conv2d:
            case OpKind::FullyConnected: {
                const auto& at = n.linear();
                const QuantSpec& x = in_spec(0);
                double eps_w = at.wq->eps();
                double eps_phi = n.out_spec->eps;

                std::size_t oc = static_cast<std::size_t>(at.w.shape()[0]);
                std::size_t per = at.w.size() / oc;
                double max_l1 = 0.0;
                for (std::size_t c = 0; c < oc; ++c) {
                    double l1 = 0.0;
                    for (std::size_t i = 0; i < per; ++i)
                        l1 += std::abs(static_cast<double>(at.w.ints()[c * per + i]));
                    max_l1 = std::max(max_l1, l1);
                }
                b.upstream_term = eps_w * max_l1 * in_bound(0).total;

                bool zero_bias = true;
                double qb_max = 0.0;
                if (at.b) {
                    for (std::int64_t v : at.b->ints()) qb_max = std::max(qb_max, std::abs(static_cast<double>(v)));
                    zero_bias = qb_max == 0.0 && !at.bias_rq;
                }
                if (at.bias_rq) {
                    double qb0_max = static_cast<double>(std::int64_t(1) << (at.wq->bits - 1));
                    b.requant_term = eps_phi * detail::requant_defect(at.bias_rq->rq) * qb0_max;
                    b.lattice_term = at.bias_rq->eps_b + eps_phi;
                }

                double qx_mag = static_cast<double>(detail::spec_mag(x));
                double mag = eps_phi * (max_l1 * qx_mag + qb_max);
                b.fp_term = detail::fp_slack(per, mag);

                b.exact = in_bound(0).exact && zero_bias &&
                          detail::is_pow2(eps_w) && detail::is_pow2(x.eps) && max_l1 * qx_mag < 0x1p52;
                break;
            }
            case OpKind::BatchNorm: {
                const auto& at = n.bn();
                const QuantSpec& x = in_spec(0);
                double eps_out = n.out_spec->eps;
                double kappa_hat_max = 0.0;
                for (std::int64_t v : at.q->q_kappa.ints())
                    kappa_hat_max = std::max(kappa_hat_max, at.q->eps_kappa * std::abs(static_cast<double>(v)));
                b.upstream_term = kappa_hat_max * in_bound(0).total;

                double dev_lambda = 0.0;
                double lam_mag = 0.0;
                bool lambda_exact = true;
                std::int64_t m_lambda = at.q->lambda_m.value_or(0);
                for (std::int64_t v : at.q->q_lambda.ints()) {
                    double ideal = at.q->eps_lambda * static_cast<double>(v);
                    double got = eps_out * static_cast<double>(m_lambda) * static_cast<double>(v);
                    dev_lambda = std::max(dev_lambda, std::abs(ideal - got));
                    lam_mag = std::max(lam_mag, std::abs(ideal));
                    if (v != 0) lambda_exact = false;
                }
                if (!lambda_exact && ratio_parts(at.q->eps_lambda, 0, eps_out).exact())
                    lambda_exact = true;
                b.requant_term = dev_lambda * (1.0 + 0x1p-40);

                double qx_mag = static_cast<double>(detail::spec_mag(x));
                b.fp_term = detail::fp_slack(4, kappa_hat_max * x.eps * qx_mag + lam_mag);

                b.exact = in_bound(0).exact && lambda_exact &&
                          detail::is_pow2(at.q->eps_kappa) && detail::is_pow2(x.eps) && qx_mag < 0x1p52;
                break;
            }
            case OpKind::Activation: {
                const auto& at = n.act();
                const QuantSpec& x = in_spec(0);
                double eps_y = n.out_spec->eps;
                double qmax = static_cast<double>(detail::spec_mag(x));
                b.upstream_term = in_bound(0).total;
                b.requant_term = eps_y * detail::requant_defect(*at.rq) * qmax;
                b.lattice_term = eps_y;
                b.fp_term = detail::fp_slack(4, x.eps * qmax + eps_y);
                b.exact = in_bound(0).exact && detail::requant_is_exact(*at.rq) &&
                          detail::is_pow2(x.eps) && detail::is_pow2(eps_y) && qmax < 0x1p52;
                break;
            }
            case OpKind::ThresholdActivation: {
                const auto& at = n.thresh();
                const QuantSpec& x = in_spec(0);
                double eps_y = n.out_spec->eps;
                double d_in = in_bound(0).total;
                std::size_t width = static_cast<std::size_t>(at.n_levels + 1);
                std::size_t channels = at.thresholds.size() / width;
                if (d_in < 0.49 * x.eps) {
                    // llround snaps the recovered level exactly; both sides
                    // count the same thresholds.
                    b.fp_term = detail::fp_slack(2, eps_y * static_cast<double>(at.n_levels));
                    b.exact = in_bound(0).exact && static_cast<double>(detail::spec_mag(x)) < 0x1p52;
                } else {
                    std::int64_t dq = static_cast<std::int64_t>(std::ceil(d_in / x.eps + 0.5));
                    std::int64_t window = checked_mul(std::int64_t(2), dq);
                    std::int64_t worst = 0;
                    for (std::size_t c = 0; c < channels; ++c) {
                        const std::int64_t* row = at.thresholds.ints().data() + c * width;
                        std::size_t lo = 1;
                        for (std::size_t hi = 1; hi < width; ++hi) {
                            while (row[hi] - row[lo] > window) ++lo;
                            worst = std::max<std::int64_t>(worst, static_cast<std::int64_t>(hi - lo + 1));
                        }
                    }
                    b.requant_term = eps_y * static_cast<double>(worst);
                    b.fp_term = detail::fp_slack(2, eps_y * static_cast<double>(at.n_levels));
                }
                break;
            }
            case OpKind::Add: {
                const QuantSpec& ref = in_spec(0);
                b.upstream_term = in_bound(0).total;
                double mag = ref.eps * static_cast<double>(detail::spec_mag(ref));
                for (std::size_t i = 1; i < n.inputs.size(); ++i) {
                    const QuantSpec& s = in_spec(i);
                    const RequantParams& rq = n.add().branch_rq.at(i - 1);
                    double qmax = static_cast<double>(detail::spec_mag(s));
                    b.upstream_term += in_bound(i).total;
                    b.requant_term += ref.eps * detail::requant_defect(rq) * qmax;
                    b.lattice_term += ref.eps;
                    mag += s.eps * qmax;
                }
                b.fp_term = detail::fp_slack(n.inputs.size(), mag);
                break;
            }
            case OpKind::MaxPool2d: {
                b.upstream_term = in_bound(0).total;
                b.exact = in_bound(0).exact;
                break;
            }
            case OpKind::AvgPool2d: {
                const auto& at = n.pool();
                const QuantSpec& x = in_spec(0);
                std::int64_t k = static_cast<std::int64_t>(at.kh) * at.kw;
                std::int64_t r = (std::int64_t(1) << *at.d) - checked_mul(*at.m, k);
                double defect = static_cast<double>(r) / std::ldexp(static_cast<double>(k), *at.d);
                double qmax = static_cast<double>(detail::spec_mag(x));
                b.upstream_term = in_bound(0).total;
                b.requant_term = x.eps * defect * static_cast<double>(k) * qmax;
                b.lattice_term = x.eps;
                b.fp_term = detail::fp_slack(static_cast<std::size_t>(k), x.eps * qmax);
                break;
            }
            case OpKind::Output: {
                b.upstream_term = in_bound(0).total;
                b.exact = in_bound(0).exact;
                break;
            }
        }
        b.total = b.upstream_term + b.requant_term + b.lattice_term + b.fp_term;
        out[id] = b;
    }
    return out;
}

/// One node's measured drift against its budget. bound is absent when the
/// pairing has no derivable budget (for example float vs fake-quantized).
struct NodeCheck {
    std::string node_id;
    double deviation = 0.0;
    std::optional<NodeBound> bound;
    bool ok = true;
};

struct VerifyReport {
    std::vector<NodeCheck> checks;
    bool all_ok = true;
    /// Smallest bound-minus-deviation over bounded nodes; negative means a
    /// violation.
    double worst_margin = std::numeric_limits<double>::infinity();
};

namespace detail {

inline void require_same_structure(const Graph& a, const Graph& b) {
    if (a.nodes().size() != b.nodes().size())
        throw GraphMismatchError("graphs have different node counts");
    for (const auto& [id, na] : a.nodes()) {
        if (!b.has_node(id)) throw GraphMismatchError("node " + id + " is missing from one graph");
        const Node& nb = b.node(id);
        if (na.op != nb.op)
            throw GraphMismatchError("node " + id + " has different ops across graphs");
        if (na.inputs != nb.inputs)
            throw GraphMismatchError("node " + id + " has different inputs across graphs");
    }
}

}  // namespace detail

/// Runs both graphs over the given inputs and reports the per-node maximum
/// deviation between their outputs. When b is integer-deployable the inputs
/// are integer images: b consumes them directly, a consumes their dequantized
/// values, b's outputs are dequantized before comparison, and each node's
/// deviation is checked against its derived budget.
inline VerifyReport compare_representations(const Graph& a, const Graph& b,
                                            const std::vector<Tensor>& inputs) {
    detail::require_same_structure(a, b);
    const bool integer_side = b.representation() == Representation::IntegerDeployable;

    std::map<std::string, NodeBound> bounds;
    if (integer_side) bounds = derive_bounds(b);

    std::map<std::string, double> worst;
    for (const Tensor& in : inputs) {
        Tensor a_in = in;
        if (integer_side) {
            const Node& bin = b.node(b.input_id());
            a_in = dequantize(in, *bin.out_spec);
        }
        RunResult ra = run(a, a_in);
        RunResult rb = run(b, in);
        for (const auto& [id, tb] : rb.trace.per_node) {
            const Tensor& out_b = tb.output;
            Tensor deq = out_b;
            if (out_b.kind() == ValueKind::Integer) {
                const auto& spec = b.node(id).out_spec;
                if (!spec) throw MissingQuantParamsError("node " + id + " has no deployment spec");
                deq = dequantize(out_b, *spec);
            }
            const Tensor& out_a = ra.trace.per_node.at(id).output;
            if (!out_a.same_shape(deq)) throw ShapeMismatchError("node " + id + " shapes differ across graphs");
            double dev = 0.0;
            for (std::size_t i = 0; i < deq.size(); ++i)
                dev = std::max(dev, std::abs(out_a.reals()[i] - deq.reals()[i]));
            auto it = worst.find(id);
            if (it == worst.end())
                worst[id] = dev;
            else
                it->second = std::max(it->second, dev);
        }
    }

    VerifyReport report;
    for (const std::string& id : b.topo_order()) {
        NodeCheck c;
        c.node_id = id;
        c.deviation = worst.count(id) ? worst.at(id) : 0.0;
        if (integer_side) {
            c.bound = bounds.at(id);
            c.ok = c.deviation <= c.bound->total;
            report.worst_margin = std::min(report.worst_margin, c.bound->total - c.deviation);
        }
        report.all_ok = report.all_ok && c.ok;
        report.checks.push_back(std::move(c));
    }
    return report;
}

}  // namespace qlower
