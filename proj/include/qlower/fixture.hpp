#pragma once

// Reproducible models and datasets used by the CLI's genfixture subcommand
// and by the test suite. Everything is driven by the splitmix generator so a
// seed pins the fixture exactly.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qlower/graph.hpp"
#include "qlower/rng.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

namespace detail {

inline Tensor random_real(Rng& rng, std::vector<std::int64_t> shape, double scale) {
    Tensor t = Tensor::real(std::move(shape));
    for (double& v : t.reals()) v = scale * rng.normal();
    return t;
}

inline Tensor random_uniform(Rng& rng, std::vector<std::int64_t> shape, double lo, double hi) {
    Tensor t = Tensor::real(std::move(shape));
    for (double& v : t.reals()) v = rng.uniform(lo, hi);
    return t;
}

inline Node make_input(std::string id, std::vector<std::int64_t> shape, int bits = 8) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::Input;
    n.attrs = InputAttrs{std::move(shape), bits};
    return n;
}

inline Node make_conv(std::string id, std::string in, Tensor w, std::optional<Tensor> b, int stride,
                      int pad) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::Conv2d;
    n.inputs = {std::move(in)};
    LinearAttrs at;
    at.w = std::move(w);
    at.b = std::move(b);
    at.stride = stride;
    at.pad = pad;
    n.attrs = std::move(at);
    return n;
}

inline Node make_fc(std::string id, std::string in, Tensor w, std::optional<Tensor> b) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::FullyConnected;
    n.inputs = {std::move(in)};
    LinearAttrs at;
    at.w = std::move(w);
    at.b = std::move(b);
    n.attrs = std::move(at);
    return n;
}

inline Node make_bn(std::string id, std::string in, Tensor gamma, Tensor sigma, Tensor mu, Tensor beta) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::BatchNorm;
    n.inputs = {std::move(in)};
    n.attrs = BnAttrs{std::move(gamma), std::move(sigma), std::move(mu), std::move(beta), std::nullopt};
    return n;
}

inline Node make_act(std::string id, std::string in) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::Activation;
    n.inputs = {std::move(in)};
    n.attrs = ActAttrs{};
    return n;
}

inline Node make_pool(std::string id, std::string in, OpKind kind, int k, int stride) {
    Node n;
    n.id = std::move(id);
    n.op = kind;
    n.inputs = {std::move(in)};
    PoolAttrs at;
    at.kh = k;
    at.kw = k;
    at.stride = stride;
    n.attrs = std::move(at);
    return n;
}

inline Node make_add(std::string id, std::vector<std::string> ins) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::Add;
    n.inputs = std::move(ins);
    n.attrs = AddAttrs{};
    return n;
}

inline Node make_output(std::string id, std::string in) {
    Node n;
    n.id = std::move(id);
    n.op = OpKind::Output;
    n.inputs = {std::move(in)};
    n.attrs = OutputAttrs{};
    return n;
}

/// Batch-norm parameters with the positive gamma/sigma the lowering passes
/// require; mu and beta stay small so activations keep firing.
inline Node random_bn(Rng& rng, std::string id, std::string in, std::int64_t channels) {
    Tensor gamma = random_uniform(rng, {channels}, 0.5, 1.5);
    Tensor sigma = random_uniform(rng, {channels}, 0.5, 2.0);
    Tensor mu = random_real(rng, {channels}, 0.2);
    Tensor beta = random_uniform(rng, {channels}, 0.0, 0.3);
    return make_bn(std::move(id), std::move(in), std::move(gamma), std::move(sigma), std::move(mu),
                   std::move(beta));
}

}  // namespace detail

/// Small convolutional classifier over 12x12 single-channel images:
/// conv(1->4) -> bn -> act -> maxpool -> conv(4->8) -> bn -> act -> avgpool
/// -> fc(72->4). Weights are drawn from the seed.
inline Graph make_lenet_tiny(std::uint64_t seed = 0) {
    Rng rng(seed);
    Graph g;
    g.add_node(detail::make_input("in", {1, 12, 12}));
    g.add_node(detail::make_conv("conv1", "in", detail::random_real(rng, {4, 1, 3, 3}, 0.5), std::nullopt,
                                 1, 1));
    g.add_node(detail::random_bn(rng, "bn1", "conv1", 4));
    g.add_node(detail::make_act("act1", "bn1"));
    g.add_node(detail::make_pool("pool1", "act1", OpKind::MaxPool2d, 2, 2));
    g.add_node(detail::make_conv("conv2", "pool1", detail::random_real(rng, {8, 4, 3, 3}, 0.25),
                                 std::nullopt, 1, 1));
    g.add_node(detail::random_bn(rng, "bn2", "conv2", 8));
    g.add_node(detail::make_act("act2", "bn2"));
    g.add_node(detail::make_pool("pool2", "act2", OpKind::AvgPool2d, 2, 2));
    g.add_node(detail::make_fc("fc", "pool2", detail::random_real(rng, {4, 72}, 0.2),
                               detail::random_real(rng, {4}, 0.1)));
    g.add_node(detail::make_output("out", "fc"));
    return g;
}

/// Two-layer perceptron for the two-cluster toy problem: fc(2->16) -> act ->
/// fc(16->2).
inline Graph make_mlp2(std::uint64_t seed = 0) {
    Rng rng(seed);
    Graph g;
    g.add_node(detail::make_input("in", {2}));
    g.add_node(detail::make_fc("fc1", "in", detail::random_real(rng, {16, 2}, 0.7),
                               detail::random_real(rng, {16}, 0.1)));
    g.add_node(detail::make_act("act1", "fc1"));
    g.add_node(detail::make_fc("fc2", "act1", detail::random_real(rng, {2, 16}, 0.4),
                               detail::random_real(rng, {2}, 0.1)));
    g.add_node(detail::make_output("out", "fc2"));
    return g;
}

struct Dataset {
    std::vector<Tensor> inputs;
    std::vector<int> labels;
};

/// Two gaussian clusters at (-1,-1) and (1,1), sigma 0.3, alternating labels.
inline Dataset make_two_cluster_dataset(std::size_t n = 200, std::uint64_t seed = 0) {
    Rng rng(seed);
    Dataset d;
    for (std::size_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % 2);
        double cx = label == 0 ? -1.0 : 1.0;
        Tensor x = Tensor::real({2});
        x.reals()[0] = cx + 0.3 * rng.normal();
        x.reals()[1] = cx + 0.3 * rng.normal();
        d.inputs.push_back(std::move(x));
        d.labels.push_back(label);
    }
    return d;
}

/// Random convolutional graph for soundness sweeps: two to four conv blocks
/// with optional batch norm, bias, residual adds and pools. The result is a
/// valid float graph ready for the full pipeline.
inline Graph make_random_graph(Rng& rng) {
    Graph g;
    std::int64_t channels = rng.range(1, 3);
    std::int64_t hw = 16;
    g.add_node(detail::make_input("in", {channels, hw, hw}));
    std::string cur = "in";

    struct BoundaryOut {
        std::string id;
        std::vector<std::int64_t> shape;
    };
    std::vector<BoundaryOut> boundaries;

    int blocks = static_cast<int>(rng.range(2, 4));
    for (int bi = 1; bi <= blocks; ++bi) {
        std::string tag = std::to_string(bi);
        std::int64_t cout = rng.range(2, 8);
        Tensor w = detail::random_real(rng, {cout, channels, 3, 3}, 0.4 / std::sqrt(double(channels)));
        std::optional<Tensor> b;
        if (rng.uniform() < 0.5) b = detail::random_real(rng, {cout}, 0.1);
        g.add_node(detail::make_conv("conv" + tag, cur, std::move(w), std::move(b), 1, 1));
        cur = "conv" + tag;
        channels = cout;

        if (rng.uniform() < 0.7) {
            g.add_node(detail::random_bn(rng, "bn" + tag, cur, channels));
            cur = "bn" + tag;
        }
        g.add_node(detail::make_act("act" + tag, cur));
        cur = "act" + tag;

        std::vector<std::int64_t> shape = {channels, hw, hw};
        if (rng.uniform() < 0.3) {
            for (std::size_t i = 0; i < boundaries.size(); ++i) {
                if (boundaries[i].shape == shape) {
                    g.add_node(detail::make_add("add" + tag, {cur, boundaries[i].id}));
                    cur = "add" + tag;
                    break;
                }
            }
        }
        boundaries.push_back({std::string("act") + tag, shape});

        if (rng.uniform() < 0.3 && hw % 2 == 0) {
            OpKind kind = rng.uniform() < 0.5 ? OpKind::MaxPool2d : OpKind::AvgPool2d;
            g.add_node(detail::make_pool("pool" + tag, cur, kind, 2, 2));
            cur = "pool" + tag;
            hw /= 2;
        }
    }
    g.add_node(detail::make_output("out", cur));
    return g;
}

/// Random integer input image lying on the given spec's lattice window.
inline Tensor random_integer_input(Rng& rng, const std::vector<std::int64_t>& shape, const QuantSpec& spec) {
    Tensor t = Tensor::integer(shape);
    for (auto& v : t.ints()) v = rng.range(spec.lo, spec.hi);
    return t;
}

/// Random real input for calibration, uniform over the input window.
inline Tensor random_real_input(Rng& rng, const std::vector<std::int64_t>& shape, double lo = 0.0,
                                double hi = 1.0) {
    return detail::random_uniform(rng, shape, lo, hi);
}

}  // namespace qlower
