#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "qlower/errors.hpp"
#include "qlower/pact.hpp"
#include "qlower/requant.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

// ---------------------------------------------------------------------------
// Operators and per-op attributes
// ---------------------------------------------------------------------------

enum class OpKind {
    Input,
    Conv2d,
    FullyConnected,
    BatchNorm,
    Activation,
    ThresholdActivation,
    Add,
    MaxPool2d,
    AvgPool2d,
    Output,
};

inline const char* to_string(OpKind op) {
    switch (op) {
        case OpKind::Input: return "Input";
        case OpKind::Conv2d: return "Conv2d";
        case OpKind::FullyConnected: return "FullyConnected";
        case OpKind::BatchNorm: return "BatchNorm";
        case OpKind::Activation: return "Activation";
        case OpKind::ThresholdActivation: return "ThresholdActivation";
        case OpKind::Add: return "Add";
        case OpKind::MaxPool2d: return "MaxPool2d";
        case OpKind::AvgPool2d: return "AvgPool2d";
        case OpKind::Output: return "Output";
    }
    return "?";
}

inline OpKind op_from_string(const std::string& s) {
    if (s == "Input") return OpKind::Input;
    if (s == "Conv2d") return OpKind::Conv2d;
    if (s == "FullyConnected") return OpKind::FullyConnected;
    if (s == "BatchNorm") return OpKind::BatchNorm;
    if (s == "Activation") return OpKind::Activation;
    if (s == "ThresholdActivation") return OpKind::ThresholdActivation;
    if (s == "Add") return OpKind::Add;
    if (s == "MaxPool2d") return OpKind::MaxPool2d;
    if (s == "AvgPool2d") return OpKind::AvgPool2d;
    if (s == "Output") return OpKind::Output;
    throw ParseError("unknown operator \"" + s + "\"");
}

struct InputAttrs {
    std::vector<std::int64_t> shape;
    int bits = 8; // width of the quantized input image; the usable range is [0, 2^bits - 1]
};

/// Audit record of how a real-valued bias became an integer image in the
/// accumulator space: the bias was first placed on its own symmetric lattice
/// (quantum eps_b), then moved into the accumulator space by rq.
struct BiasQuant {
    double eps_b = 1.0;
    RequantParams rq;
};

/// Shared by Conv2d and FullyConnected. stride/pad are ignored for
/// FullyConnected. w_min/w_max are the calibrated clip bounds before a bit
/// width is chosen. After integerize, w and b hold integer images and bias_rq
/// records their derivation.
struct LinearAttrs {
    Tensor w;
    std::optional<Tensor> b;
    int stride = 1;
    int pad = 0;
    std::optional<double> w_min;
    std::optional<double> w_max;
    std::optional<WeightQuantParams> wq;
    std::optional<BiasQuant> bias_rq;
};

/// Quantized batch-norm parameters: kappa = gamma/sigma and
/// lambda = beta - kappa*mu on their own symmetric lattices. lambda_m is the
/// shiftless multiplier that moves lambda into the output accumulator space;
/// q_lambda_out caches m * q_lambda.
struct BnQuantParams {
    int bits = 8;
    double eps_kappa = 1.0;
    double eps_lambda = 1.0;
    Tensor q_kappa;
    Tensor q_lambda;
    std::optional<std::int64_t> lambda_m;
    std::optional<Tensor> q_lambda_out;
};

struct BnAttrs {
    Tensor gamma; // per-channel scale, > 0
    Tensor sigma; // per-channel running std-dev, > 0
    Tensor mu;    // per-channel running mean
    Tensor beta;  // per-channel shift
    std::optional<BnQuantParams> q;
};

struct ActAttrs {
    std::optional<double> beta_y; // calibrated clip ceiling
    std::optional<int> bits;
    std::optional<RequantParams> rq;

    bool has_params() const { return beta_y.has_value() && bits.has_value(); }
    ActQuantParams params() const {
        if (!has_params()) throw MissingQuantParamsError("activation has no quantization parameters");
        return ActQuantParams{*beta_y, *bits};
    }
};

/// Merged batch-norm + activation. thresholds is an integer tensor of shape
/// [C, n_levels + 1], rows non-decreasing; the output for input q in channel c
/// counts how many of thresholds[c][1..n_levels] are <= q.
struct ThreshActAttrs {
    Tensor thresholds;
    std::int64_t n_levels = 0;
};

struct AddAttrs {
    // One entry per non-reference input (inputs[1..]), filled at integerize.
    std::vector<RequantParams> branch_rq;
};

struct PoolAttrs {
    int kh = 2;
    int kw = 2;
    int stride = 2;
    // Average pooling only: (m * sum) >> d replaces the division by the
    // window size on the integer path.
    std::optional<std::int64_t> m;
    std::optional<int> d;
};

struct OutputAttrs {};

using NodeAttrs = std::variant<InputAttrs, LinearAttrs, BnAttrs, ActAttrs, ThreshActAttrs, AddAttrs,
                               PoolAttrs, OutputAttrs>;

// ---------------------------------------------------------------------------
// Nodes and graphs
// ---------------------------------------------------------------------------

struct Node {
    std::string id;
    OpKind op = OpKind::Input;
    std::vector<std::string> inputs;
    NodeAttrs attrs;
    // Quantized space of this node's output; populated by set_deployment and
    // kept through integerize.
    std::optional<QuantSpec> out_spec;

    const LinearAttrs& linear() const { return std::get<LinearAttrs>(attrs); }
    LinearAttrs& linear() { return std::get<LinearAttrs>(attrs); }
    const BnAttrs& bn() const { return std::get<BnAttrs>(attrs); }
    BnAttrs& bn() { return std::get<BnAttrs>(attrs); }
    const ActAttrs& act() const { return std::get<ActAttrs>(attrs); }
    ActAttrs& act() { return std::get<ActAttrs>(attrs); }
    const ThreshActAttrs& thresh() const { return std::get<ThreshActAttrs>(attrs); }
    const PoolAttrs& pool() const { return std::get<PoolAttrs>(attrs); }
    PoolAttrs& pool() { return std::get<PoolAttrs>(attrs); }
    const InputAttrs& input() const { return std::get<InputAttrs>(attrs); }
    const AddAttrs& add() const { return std::get<AddAttrs>(attrs); }
    AddAttrs& add() { return std::get<AddAttrs>(attrs); }
};

/// Lowering stages, strictly ordered. Passes may only move a graph forward.
enum class Representation {
    FullPrecision = 0,
    FakeQuantized = 1,
    QuantizedDeployable = 2,
    IntegerDeployable = 3,
};

inline const char* to_string(Representation r) {
    switch (r) {
        case Representation::FullPrecision: return "FullPrecision";
        case Representation::FakeQuantized: return "FakeQuantized";
        case Representation::QuantizedDeployable: return "QuantizedDeployable";
        case Representation::IntegerDeployable: return "IntegerDeployable";
    }
    return "?";
}

inline Representation representation_from_string(const std::string& s) {
    if (s == "FullPrecision") return Representation::FullPrecision;
    if (s == "FakeQuantized") return Representation::FakeQuantized;
    if (s == "QuantizedDeployable") return Representation::QuantizedDeployable;
    if (s == "IntegerDeployable") return Representation::IntegerDeployable;
    throw ParseError("unknown representation \"" + s + "\"");
}

/// Single-input single-output DAG. Node ids are unique; iteration over
/// nodes() and topo_order() is deterministic (ids sort lexicographically,
/// Kahn ties broken by id).
class Graph {
public:
    Representation representation() const { return rep_; }
    void set_representation(Representation r) { rep_ = r; }

    double eps_in() const { return eps_in_; }
    void set_eps_in(double e) { eps_in_ = e; }

    bool has_node(const std::string& id) const { return nodes_.count(id) != 0; }

    const Node& node(const std::string& id) const {
        auto it = nodes_.find(id);
        if (it == nodes_.end()) throw UnknownNodeError("no node \"" + id + "\"");
        return it->second;
    }
    Node& node(const std::string& id) {
        auto it = nodes_.find(id);
        if (it == nodes_.end()) throw UnknownNodeError("no node \"" + id + "\"");
        return it->second;
    }

    void add_node(Node n) {
        if (n.id.empty()) throw InvalidGraphError("node id must not be empty");
        if (has_node(n.id)) throw InvalidGraphError("duplicate node id \"" + n.id + "\"");
        nodes_.emplace(n.id, std::move(n));
        topo_cache_.clear();
    }

    void remove_node(const std::string& id) {
        if (nodes_.erase(id) == 0) throw UnknownNodeError("no node \"" + id + "\"");
        topo_cache_.clear();
    }

    void replace_node(Node n) {
        auto it = nodes_.find(n.id);
        if (it == nodes_.end()) throw UnknownNodeError("no node \"" + n.id + "\"");
        it->second = std::move(n);
        topo_cache_.clear();
    }

    const std::map<std::string, Node>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

    std::vector<std::string> consumers(const std::string& id) const {
        std::vector<std::string> out;
        for (const auto& [nid, n] : nodes_)
            if (std::find(n.inputs.begin(), n.inputs.end(), id) != n.inputs.end()) out.push_back(nid);
        return out;
    }

    /// Kahn's algorithm with lexicographic tie-break; cached until mutation.
    /// Throws InvalidGraph on cycles or dangling references.
    const std::vector<std::string>& topo_order() const {
        if (!topo_cache_.empty() || nodes_.empty()) return topo_cache_;
        std::map<std::string, int> pending;
        for (const auto& [id, n] : nodes_) {
            pending[id] += 0;
            for (const auto& in : n.inputs) {
                if (!has_node(in)) throw InvalidGraphError("node \"" + id + "\" references missing \"" + in + "\"");
                ++pending[id];
            }
        }
        std::set<std::string> ready;
        for (const auto& [id, cnt] : pending)
            if (cnt == 0) ready.insert(id);
        std::vector<std::string> order;
        order.reserve(nodes_.size());
        while (!ready.empty()) {
            std::string id = *ready.begin();
            ready.erase(ready.begin());
            order.push_back(id);
            for (const auto& cid : consumers(id))
                if (--pending[cid] == 0) ready.insert(cid);
        }
        if (order.size() != nodes_.size()) throw InvalidGraphError("graph contains a cycle");
        topo_cache_ = std::move(order);
        return topo_cache_;
    }

    std::string input_id() const { return single_node_of(OpKind::Input, "input"); }
    std::string output_id() const { return single_node_of(OpKind::Output, "output"); }

private:
    std::string single_node_of(OpKind op, const char* what) const {
        std::string found;
        for (const auto& [id, n] : nodes_) {
            if (n.op != op) continue;
            if (!found.empty()) throw InvalidGraphError(std::string("graph has more than one ") + what + " node");
            found = id;
        }
        if (found.empty()) throw InvalidGraphError(std::string("graph has no ") + what + " node");
        return found;
    }

    std::map<std::string, Node> nodes_;
    Representation rep_ = Representation::FullPrecision;
    double eps_in_ = 1.0 / 255.0;
    mutable std::vector<std::string> topo_cache_;
};

// ---------------------------------------------------------------------------
// Structural validation
// ---------------------------------------------------------------------------

struct Violation {
    std::string node_id;
    std::string rule;
    std::string detail;
};

namespace detail {

inline int expected_arity(OpKind op) {
    switch (op) {
        case OpKind::Input: return 0;
        case OpKind::Add: return -2; // at least two
        default: return 1;
    }
}

inline bool produces_boundary(OpKind op) {
    // Branch points and layer boundaries: only these ops (and the input) may
    // feed more than one consumer.
    return op == OpKind::Input || op == OpKind::Activation || op == OpKind::ThresholdActivation;
}

inline bool is_linear_op(OpKind op) { return op == OpKind::Conv2d || op == OpKind::FullyConnected; }

} // namespace detail

/// Structural checks. Returns violations as data instead of throwing so a
/// caller can report all problems at once. An empty result means the graph is
/// executable.
inline std::vector<Violation> validate(const Graph& g) {
    std::vector<Violation> out;
    auto flag = [&](const std::string& id, const std::string& rule, const std::string& detail) {
        out.push_back({id, rule, detail});
    };

    int inputs = 0, outputs = 0;
    for (const auto& [id, n] : g.nodes()) {
        if (n.op == OpKind::Input) ++inputs;
        if (n.op == OpKind::Output) ++outputs;

        int arity = detail::expected_arity(n.op);
        if (arity >= 0 && static_cast<int>(n.inputs.size()) != arity)
            flag(id, "arity", std::string(to_string(n.op)) + " takes " + std::to_string(arity) + " input(s), has " +
                                  std::to_string(n.inputs.size()));
        if (arity == -2 && n.inputs.size() < 2)
            flag(id, "arity", "Add takes at least two inputs");

        for (const auto& in : n.inputs)
            if (!g.has_node(in)) flag(id, "missing-input", "references missing node \"" + in + "\"");

        if (n.op == OpKind::BatchNorm) {
            const auto& bn = n.bn();
            auto same_len = bn.gamma.size() == bn.sigma.size() && bn.gamma.size() == bn.mu.size() &&
                            bn.gamma.size() == bn.beta.size();
            if (!same_len) flag(id, "bn-params", "per-channel parameter lengths differ");
            for (double v : bn.gamma.reals())
                if (!(v > 0.0)) flag(id, "bn-positive", "gamma must be positive");
            for (double v : bn.sigma.reals())
                if (!(v > 0.0)) flag(id, "bn-positive", "sigma must be positive");
        }
        if (n.op == OpKind::Conv2d || n.op == OpKind::FullyConnected) {
            const auto& la = n.linear();
            std::size_t want_rank = n.op == OpKind::Conv2d ? 4 : 2;
            if (la.w.shape().size() != want_rank)
                flag(id, "weight-rank", "weight tensor must have rank " + std::to_string(want_rank));
            if (n.op == OpKind::Conv2d && (la.stride < 1 || la.pad < 0))
                flag(id, "conv-geometry", "stride must be >= 1 and pad >= 0");
        }
        if (n.op == OpKind::MaxPool2d || n.op == OpKind::AvgPool2d) {
            const auto& pa = n.pool();
            if (pa.kh < 1 || pa.kw < 1 || pa.stride < 1) flag(id, "pool-geometry", "window and stride must be >= 1");
        }
        if (n.op == OpKind::Input && Tensor::numel(n.input().shape) <= 0)
            flag(id, "input-shape", "input shape must be non-empty");
    }
    if (inputs != 1)
        flag("", "single-input", "graph must have exactly one Input node, has " + std::to_string(inputs));
    if (outputs != 1)
        flag("", "single-output", "graph must have exactly one Output node, has " + std::to_string(outputs));

    // Branching is only allowed from Input/Activation/ThresholdActivation.
    for (const auto& [id, n] : g.nodes()) {
        if (detail::produces_boundary(n.op)) continue;
        if (g.consumers(id).size() > 1)
            flag(id, "branch-point", std::string(to_string(n.op)) + " feeds multiple consumers; only activation "
                                     "or input outputs may branch");
    }

    try {
        g.topo_order();
    } catch (const InvalidGraphError& e) {
        flag("", "acyclic", e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer segmentation
// ---------------------------------------------------------------------------

/// A maximal run of compute nodes ending at (and including) an activation.
/// Trailing spans without an activation (e.g. a final pool or classifier) are
/// legal and have no act_id.
struct LayerSpan {
    std::vector<std::string> node_ids;
    std::optional<std::string> act_id;
};

/// Partition the compute nodes into canonical layers. Spans grow from
/// boundary producers (Input/Activation/ThresholdActivation outputs) and
/// close at the next activation; an Add merges the spans of its branches.
/// Throws NonCanonical when two linear ops meet inside one span with no
/// activation between them.
inline std::vector<LayerSpan> segment_layers(const Graph& g) {
    auto violations = validate(g);
    if (!violations.empty())
        throw InvalidGraphError("cannot segment an invalid graph: " + violations.front().rule + " at \"" +
                                violations.front().node_id + "\"");

    // span id per node; -1 for non-members (Input/Output)
    std::map<std::string, int> span_of;
    std::vector<std::vector<std::string>> spans;
    std::vector<std::optional<std::string>> span_act;

    auto merge_spans = [&](int a, int b) {
        if (a == b) return a;
        int keep = std::min(a, b), drop = std::max(a, b);
        for (const auto& id : spans[drop]) span_of[id] = keep;
        spans[keep].insert(spans[keep].end(), spans[drop].begin(), spans[drop].end());
        spans[drop].clear();
        return keep;
    };

    for (const auto& id : g.topo_order()) {
        const Node& n = g.node(id);
        if (n.op == OpKind::Input || n.op == OpKind::Output) continue;

        int span = -1;
        for (const auto& in : n.inputs) {
            const Node& p = g.node(in);
            if (detail::produces_boundary(p.op)) continue; // upstream span is closed
            int ps = span_of.at(in);
            span = span < 0 ? ps : merge_spans(span, ps);
        }
        if (span < 0) {
            span = static_cast<int>(spans.size());
            spans.emplace_back();
            span_act.emplace_back();
        }
        spans[static_cast<std::size_t>(span)].push_back(id);
        span_of[id] = span;
        if (n.op == OpKind::Activation || n.op == OpKind::ThresholdActivation)
            span_act[static_cast<std::size_t>(span)] = id;
    }

    // Canonical form: no linear op may feed another linear op inside a span.
    for (const auto& [id, n] : g.nodes()) {
        if (!detail::is_linear_op(n.op)) continue;
        // walk forward within the span
        std::vector<std::string> frontier{id};
        while (!frontier.empty()) {
            std::string cur = frontier.back();
            frontier.pop_back();
            for (const auto& cid : g.consumers(cur)) {
                const Node& c = g.node(cid);
                if (c.op == OpKind::Output || detail::produces_boundary(c.op)) continue;
                if (detail::is_linear_op(c.op))
                    throw NonCanonicalError("linear op \"" + cid + "\" is reachable from linear op \"" + id +
                                            "\" with no activation in between");
                frontier.push_back(cid);
            }
        }
    }

    std::vector<LayerSpan> out;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (spans[i].empty()) continue;
        LayerSpan ls;
        ls.node_ids = spans[i];
        std::sort(ls.node_ids.begin(), ls.node_ids.end());
        ls.act_id = span_act[i];
        out.push_back(std::move(ls));
    }
    return out;
}

} // namespace qlower
