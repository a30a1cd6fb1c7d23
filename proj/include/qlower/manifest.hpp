#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "qlower/graph.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

// Manifest format, version 1
//
// A model is a JSON manifest next to a blob directory. The manifest holds the
// structure and scalar attributes; every tensor lives in its own blob file
// referenced by a path relative to the manifest:
//
//   { "version": 1,
//     "representation": "FullPrecision" | ... | "IntegerDeployable",
//     "eps_in": <double>,
//     "nodes": [ { "id", "op", "inputs": [...], "attrs": {...},
//                  "out_spec": {"eps","alpha","bits","lo","hi"}? }, ... ] }
//
// Tensor attributes serialize as {"blob": <relative path>, "kind", "shape"};
// kind and shape are validated against the blob header on load. Nodes are
// written in topological order and keys sort alphabetically, so saving the
// same graph twice produces byte-identical files.

namespace detail {

using json = nlohmann::json;

inline json spec_to_json(const QuantSpec& s) {
    return json{{"eps", s.eps}, {"alpha", s.alpha}, {"bits", s.bits}, {"lo", s.lo}, {"hi", s.hi}};
}

inline QuantSpec spec_from_json(const json& j) {
    QuantSpec s;
    s.eps = j.at("eps").get<double>();
    s.alpha = j.at("alpha").get<double>();
    s.bits = j.at("bits").get<int>();
    s.lo = j.at("lo").get<std::int64_t>();
    s.hi = j.at("hi").get<std::int64_t>();
    return s;
}

inline json rq_to_json(const RequantParams& p) {
    return json{{"m", p.m}, {"d", p.d}, {"source_eps", p.source_eps}, {"target_eps", p.target_eps}};
}

inline RequantParams rq_from_json(const json& j) {
    RequantParams p;
    p.m = j.at("m").get<std::int64_t>();
    p.d = j.at("d").get<int>();
    p.source_eps = j.at("source_eps").get<double>();
    p.target_eps = j.at("target_eps").get<double>();
    return p;
}

class BlobWriter {
public:
    BlobWriter(std::filesystem::path manifest_path)
        : base_(manifest_path.parent_path()),
          dir_(manifest_path.stem().string() + ".blobs") {}

    json tensor_ref(const std::string& node_id, const std::string& attr, const Tensor& t) {
        std::filesystem::create_directories(base_ / dir_);
        std::string rel = (std::filesystem::path(dir_) / (node_id + "." + attr + ".bin")).generic_string();
        write_tensor_blob(base_ / rel, t);
        return json{{"blob", rel}, {"kind", to_string(t.kind())}, {"shape", t.shape()}};
    }

private:
    std::filesystem::path base_;
    std::string dir_;
};

inline Tensor tensor_from_ref(const json& j, const std::filesystem::path& base) {
    std::string rel = j.at("blob").get<std::string>();
    Tensor t = read_tensor_blob(base / rel);
    std::string kind = j.at("kind").get<std::string>();
    if (kind != to_string(t.kind()))
        throw KindMismatchError("blob " + rel + " holds " + to_string(t.kind()) + " data, manifest says " + kind);
    auto shape = j.at("shape").get<std::vector<std::int64_t>>();
    if (shape != t.shape()) throw ShapeMismatchError("blob " + rel + " extents disagree with the manifest");
    return t;
}

inline json attrs_to_json(const Node& n, BlobWriter& blobs) {
    json a = json::object();
    switch (n.op) {
        case OpKind::Input: {
            const auto& at = n.input();
            a["shape"] = at.shape;
            a["bits"] = at.bits;
            break;
        }
        case OpKind::Conv2d:
        case OpKind::FullyConnected: {
            const auto& at = n.linear();
            a["w"] = blobs.tensor_ref(n.id, "w", at.w);
            if (at.b) a["b"] = blobs.tensor_ref(n.id, "b", *at.b);
            if (n.op == OpKind::Conv2d) {
                a["stride"] = at.stride;
                a["pad"] = at.pad;
            }
            if (at.w_min) a["w_min"] = *at.w_min;
            if (at.w_max) a["w_max"] = *at.w_max;
            if (at.wq)
                a["wq"] = json{{"alpha_w", at.wq->alpha_w}, {"beta_w", at.wq->beta_w}, {"bits", at.wq->bits}};
            if (at.bias_rq) a["bias_rq"] = json{{"eps_b", at.bias_rq->eps_b}, {"rq", rq_to_json(at.bias_rq->rq)}};
            break;
        }
        case OpKind::BatchNorm: {
            const auto& at = n.bn();
            a["gamma"] = blobs.tensor_ref(n.id, "gamma", at.gamma);
            a["sigma"] = blobs.tensor_ref(n.id, "sigma", at.sigma);
            a["mu"] = blobs.tensor_ref(n.id, "mu", at.mu);
            a["beta"] = blobs.tensor_ref(n.id, "beta", at.beta);
            if (at.q) {
                json q{{"bits", at.q->bits},
                       {"eps_kappa", at.q->eps_kappa},
                       {"eps_lambda", at.q->eps_lambda},
                       {"q_kappa", blobs.tensor_ref(n.id, "q_kappa", at.q->q_kappa)},
                       {"q_lambda", blobs.tensor_ref(n.id, "q_lambda", at.q->q_lambda)}};
                if (at.q->lambda_m) q["lambda_m"] = *at.q->lambda_m;
                if (at.q->q_lambda_out) q["q_lambda_out"] = blobs.tensor_ref(n.id, "q_lambda_out", *at.q->q_lambda_out);
                a["bnq"] = std::move(q);
            }
            break;
        }
        case OpKind::Activation: {
            const auto& at = n.act();
            if (at.beta_y) a["beta_y"] = *at.beta_y;
            if (at.bits) a["bits"] = *at.bits;
            if (at.rq) a["rq"] = rq_to_json(*at.rq);
            break;
        }
        case OpKind::ThresholdActivation: {
            const auto& at = n.thresh();
            a["thresholds"] = blobs.tensor_ref(n.id, "thresholds", at.thresholds);
            a["n_levels"] = at.n_levels;
            break;
        }
        case OpKind::Add: {
            const auto& at = n.add();
            if (!at.branch_rq.empty()) {
                json arr = json::array();
                for (const auto& rq : at.branch_rq) arr.push_back(rq_to_json(rq));
                a["branch_rq"] = std::move(arr);
            }
            break;
        }
        case OpKind::MaxPool2d:
        case OpKind::AvgPool2d: {
            const auto& at = n.pool();
            a["kh"] = at.kh;
            a["kw"] = at.kw;
            a["stride"] = at.stride;
            if (at.m) a["m"] = *at.m;
            if (at.d) a["d"] = *at.d;
            break;
        }
        case OpKind::Output:
            break;
    }
    return a;
}

inline NodeAttrs attrs_from_json(OpKind op, const json& a, const std::filesystem::path& base) {
    switch (op) {
        case OpKind::Input: {
            InputAttrs at;
            at.shape = a.at("shape").get<std::vector<std::int64_t>>();
            at.bits = a.at("bits").get<int>();
            return at;
        }
        case OpKind::Conv2d:
        case OpKind::FullyConnected: {
            LinearAttrs at;
            at.w = tensor_from_ref(a.at("w"), base);
            if (a.contains("b")) at.b = tensor_from_ref(a.at("b"), base);
            if (op == OpKind::Conv2d) {
                at.stride = a.at("stride").get<int>();
                at.pad = a.at("pad").get<int>();
            }
            if (a.contains("w_min")) at.w_min = a.at("w_min").get<double>();
            if (a.contains("w_max")) at.w_max = a.at("w_max").get<double>();
            if (a.contains("wq")) {
                const auto& w = a.at("wq");
                at.wq = WeightQuantParams{w.at("alpha_w").get<double>(), w.at("beta_w").get<double>(),
                                          w.at("bits").get<int>()};
            }
            if (a.contains("bias_rq")) {
                const auto& b = a.at("bias_rq");
                at.bias_rq = BiasQuant{b.at("eps_b").get<double>(), rq_from_json(b.at("rq"))};
            }
            return at;
        }
        case OpKind::BatchNorm: {
            BnAttrs at;
            at.gamma = tensor_from_ref(a.at("gamma"), base);
            at.sigma = tensor_from_ref(a.at("sigma"), base);
            at.mu = tensor_from_ref(a.at("mu"), base);
            at.beta = tensor_from_ref(a.at("beta"), base);
            if (a.contains("bnq")) {
                const auto& q = a.at("bnq");
                BnQuantParams bq;
                bq.bits = q.at("bits").get<int>();
                bq.eps_kappa = q.at("eps_kappa").get<double>();
                bq.eps_lambda = q.at("eps_lambda").get<double>();
                bq.q_kappa = tensor_from_ref(q.at("q_kappa"), base);
                bq.q_lambda = tensor_from_ref(q.at("q_lambda"), base);
                if (q.contains("lambda_m")) bq.lambda_m = q.at("lambda_m").get<std::int64_t>();
                if (q.contains("q_lambda_out")) bq.q_lambda_out = tensor_from_ref(q.at("q_lambda_out"), base);
                at.q = std::move(bq);
            }
            return at;
        }
        case OpKind::Activation: {
            ActAttrs at;
            if (a.contains("beta_y")) at.beta_y = a.at("beta_y").get<double>();
            if (a.contains("bits")) at.bits = a.at("bits").get<int>();
            if (a.contains("rq")) at.rq = rq_from_json(a.at("rq"));
            return at;
        }
        case OpKind::ThresholdActivation: {
            ThreshActAttrs at;
            at.thresholds = tensor_from_ref(a.at("thresholds"), base);
            at.n_levels = a.at("n_levels").get<std::int64_t>();
            return at;
        }
        case OpKind::Add: {
            AddAttrs at;
            if (a.contains("branch_rq"))
                for (const auto& r : a.at("branch_rq")) at.branch_rq.push_back(rq_from_json(r));
            return at;
        }
        case OpKind::MaxPool2d:
        case OpKind::AvgPool2d: {
            PoolAttrs at;
            at.kh = a.at("kh").get<int>();
            at.kw = a.at("kw").get<int>();
            at.stride = a.at("stride").get<int>();
            if (a.contains("m")) at.m = a.at("m").get<std::int64_t>();
            if (a.contains("d")) at.d = a.at("d").get<int>();
            return at;
        }
        case OpKind::Output:
            return OutputAttrs{};
    }
    throw ParseError("unhandled operator in manifest");
}

} // namespace detail

/// Write the manifest plus a "<stem>.blobs/" directory next to it.
inline void save_manifest(const Graph& g, const std::filesystem::path& path) {
    using detail::json;
    detail::BlobWriter blobs(path);
    json doc;
    doc["version"] = 1;
    doc["representation"] = to_string(g.representation());
    doc["eps_in"] = g.eps_in();
    json nodes = json::array();
    for (const auto& id : g.topo_order()) {
        const Node& n = g.node(id);
        json jn{{"id", n.id}, {"op", to_string(n.op)}, {"inputs", n.inputs},
                {"attrs", detail::attrs_to_json(n, blobs)}};
        if (n.out_spec) jn["out_spec"] = detail::spec_to_json(*n.out_spec);
        nodes.push_back(std::move(jn));
    }
    doc["nodes"] = std::move(nodes);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ParseError("cannot open manifest for writing: " + path.string());
    os << doc.dump(2) << "\n";
}

inline Graph load_manifest(const std::filesystem::path& path) {
    using detail::json;
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open manifest: " + path.string());
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw ParseError("malformed manifest " + path.string() + ": " + e.what());
    }
    Graph g;
    try {
        if (doc.at("version").get<int>() != 1)
            throw ParseError("unsupported manifest version in " + path.string());
        g.set_representation(representation_from_string(doc.at("representation").get<std::string>()));
        g.set_eps_in(doc.at("eps_in").get<double>());
        const auto base = path.parent_path();
        for (const auto& jn : doc.at("nodes")) {
            Node n;
            n.id = jn.at("id").get<std::string>();
            n.op = op_from_string(jn.at("op").get<std::string>());
            n.inputs = jn.at("inputs").get<std::vector<std::string>>();
            n.attrs = detail::attrs_from_json(n.op, jn.at("attrs"), base);
            if (jn.contains("out_spec")) n.out_spec = detail::spec_from_json(jn.at("out_spec"));
            g.add_node(std::move(n));
        }
    } catch (const json::exception& e) {
        throw ParseError("malformed manifest " + path.string() + ": " + e.what());
    }

    // An integer-deployable model must carry integer parameter blobs.
    if (g.representation() == Representation::IntegerDeployable) {
        for (const auto& [id, n] : g.nodes()) {
            if ((n.op == OpKind::Conv2d || n.op == OpKind::FullyConnected)) {
                if (n.linear().w.kind() != ValueKind::Integer)
                    throw KindMismatchError("node \"" + id + "\": integer-deployable weights must be integer blobs");
                if (n.linear().b && n.linear().b->kind() != ValueKind::Integer)
                    throw KindMismatchError("node \"" + id + "\": integer-deployable bias must be an integer blob");
            }
        }
    }
    return g;
}

} // namespace qlower
