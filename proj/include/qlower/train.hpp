#pragma once

// Quantization-aware training for fully-connected classifier graphs. The
// forward pass runs through the fake quantizers; gradients flow through them
// with the straight-through estimator (the clip masks from pact.hpp). Master
// weights stay in float and are re-quantized every step.
//
// Only chains of (FullyConnected -> optional Activation) between Input and
// Output are trainable; anything else is rejected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "qlower/errors.hpp"
#include "qlower/graph.hpp"
#include "qlower/pact.hpp"
#include "qlower/rng.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

/// How quantizers participate in the forward pass. Full is real training;
/// ClipOnly keeps the clamp but drops the lattice rounding, which makes the
/// loss differentiable so gradients can be checked against finite
/// differences; Off is a plain float network.
enum class FqMode { Full, ClipOnly, Off };

struct TrainConfig {
    int epochs = 200;
    double lr = 0.05;
    std::uint64_t seed = 0;
};

namespace detail {

struct MlpLayer {
    std::string fc_id;
    std::optional<std::string> act_id;
};

/// Flattens the graph into an ordered layer list, rejecting anything that is
/// not a pure fully-connected chain.
inline std::vector<MlpLayer> mlp_layers(const Graph& g) {
    std::vector<MlpLayer> layers;
    std::string cur = g.input_id();
    while (true) {
        auto next = g.consumers(cur);
        if (next.size() != 1) throw UnsupportedOpError("trainable graphs must be a single chain");
        const Node& n = g.node(next[0]);
        if (n.op == OpKind::Output) break;
        if (n.op != OpKind::FullyConnected)
            throw UnsupportedOpError(std::string("only fully-connected chains are trainable, found ") + to_string(n.op));
        MlpLayer layer;
        layer.fc_id = n.id;
        cur = n.id;
        auto after = g.consumers(cur);
        if (after.size() != 1) throw UnsupportedOpError("trainable graphs must be a single chain");
        const Node& m = g.node(after[0]);
        if (m.op == OpKind::Activation) {
            layer.act_id = m.id;
            cur = m.id;
        } else if (m.op != OpKind::Output && m.op != OpKind::FullyConnected) {
            throw UnsupportedOpError(std::string("only fully-connected chains are trainable, found ") + to_string(m.op));
        }
        layers.push_back(std::move(layer));
    }
    if (layers.empty()) throw UnsupportedOpError("nothing to train");
    return layers;
}

inline std::vector<double> quantized_weights(const std::vector<double>& w, const WeightQuantParams* wq,
                                             FqMode mode) {
    std::vector<double> out = w;
    if (!wq || mode == FqMode::Off) return out;
    if (mode == FqMode::ClipOnly) {
        for (double& v : out) v = std::clamp(v, wq->alpha_w, wq->beta_w);
        return out;
    }
    Tensor t = Tensor::real({static_cast<std::int64_t>(w.size())});
    t.reals() = w;
    return fq_weight_forward(t, *wq).reals();
}

inline double quantized_act(double x, const ActQuantParams& p, FqMode mode) {
    if (mode == FqMode::Off) return std::max(0.0, x);
    if (mode == FqMode::ClipOnly) return std::clamp(x, 0.0, p.beta_y);
    Tensor t = Tensor::real({1});
    t.reals()[0] = x;
    return fq_act_forward(t, p).reals()[0];
}

}  // namespace detail

/// Loss and parameter gradients for one sample. Keys are the
/// fully-connected node ids.
struct MlpGrads {
    double loss = 0.0;
    std::vector<double> logits;
    std::map<std::string, Tensor> dw;
    std::map<std::string, Tensor> db;
};

/// Softmax cross-entropy forward/backward through the quantizers with
/// straight-through gradients.
inline MlpGrads mlp_loss_and_grads(const Graph& g, const Tensor& x, int label, FqMode mode = FqMode::Full) {
    auto layers = detail::mlp_layers(g);
    MlpGrads grads;

    std::vector<std::vector<double>> acts;       // layer inputs
    std::vector<std::vector<double>> preacts;    // fc outputs before activation
    std::vector<std::vector<double>> wq_cache;   // quantized weights actually used
    acts.push_back(x.reals());

    for (const auto& layer : layers) {
        const auto& at = g.node(layer.fc_id).linear();
        std::size_t out_n = static_cast<std::size_t>(at.w.shape()[0]);
        std::size_t in_n = static_cast<std::size_t>(at.w.shape()[1]);
        if (acts.back().size() != in_n) throw ShapeMismatchError("sample does not match the first layer");

        std::vector<double> wq = detail::quantized_weights(at.w.reals(), at.wq ? &*at.wq : nullptr, mode);
        std::vector<double> z(out_n, 0.0);
        for (std::size_t o = 0; o < out_n; ++o) {
            double acc = at.b ? at.b->reals()[o] : 0.0;
            for (std::size_t i = 0; i < in_n; ++i) acc += wq[o * in_n + i] * acts.back()[i];
            z[o] = acc;
        }
        preacts.push_back(z);
        wq_cache.push_back(std::move(wq));

        std::vector<double> a = z;
        if (layer.act_id) {
            const auto& aat = g.node(*layer.act_id).act();
            if (!aat.has_params() && mode != FqMode::Off)
                throw MissingQuantParamsError("activation " + *layer.act_id + " has no quantizer");
            for (double& v : a)
                v = aat.has_params() ? detail::quantized_act(v, aat.params(), mode) : std::max(0.0, v);
        }
        acts.push_back(std::move(a));
    }

    const std::vector<double>& logits = acts.back();
    grads.logits = logits;
    double zmax = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - zmax);
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logits[i] - zmax) / denom;
    grads.loss = -std::log(std::max(p.at(static_cast<std::size_t>(label)), 1e-300));

    std::vector<double> d = p;
    d.at(static_cast<std::size_t>(label)) -= 1.0;

    for (std::size_t li = layers.size(); li-- > 0;) {
        const auto& layer = layers[li];
        const auto& at = g.node(layer.fc_id).linear();
        std::size_t out_n = static_cast<std::size_t>(at.w.shape()[0]);
        std::size_t in_n = static_cast<std::size_t>(at.w.shape()[1]);

        if (layer.act_id) {
            const auto& aat = g.node(*layer.act_id).act();
            for (std::size_t o = 0; o < out_n; ++o) {
                double zv = preacts[li][o];
                bool pass = aat.has_params() && mode != FqMode::Off
                                ? (zv >= 0.0 && zv < aat.params().beta_y)
                                : zv > 0.0;
                if (!pass) d[o] = 0.0;
            }
        }

        Tensor dw = Tensor::real(at.w.shape());
        Tensor db = Tensor::real({static_cast<std::int64_t>(out_n)});
        for (std::size_t o = 0; o < out_n; ++o) {
            db.reals()[o] = d[o];
            for (std::size_t i = 0; i < in_n; ++i) {
                double raw = at.w.reals()[o * in_n + i];
                bool inside = !at.wq || mode == FqMode::Off ||
                              (raw >= at.wq->alpha_w && raw < at.wq->beta_w);
                dw.reals()[o * in_n + i] = inside ? d[o] * acts[li][i] : 0.0;
            }
        }

        std::vector<double> dprev(in_n, 0.0);
        for (std::size_t i = 0; i < in_n; ++i)
            for (std::size_t o = 0; o < out_n; ++o) dprev[i] += wq_cache[li][o * in_n + i] * d[o];
        d = std::move(dprev);

        grads.dw[layer.fc_id] = std::move(dw);
        grads.db[layer.fc_id] = std::move(db);
    }
    return grads;
}

struct TrainResult {
    Graph graph;
    std::vector<double> epoch_loss;
    double accuracy = 0.0;
};

/// Fraction of samples whose argmax logit matches the label.
inline double evaluate_accuracy(const Graph& g, const std::vector<Tensor>& xs, const std::vector<int>& ys,
                                FqMode mode = FqMode::Full) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        MlpGrads r = mlp_loss_and_grads(g, xs[i], ys[i], mode);
        std::size_t arg = static_cast<std::size_t>(
            std::max_element(r.logits.begin(), r.logits.end()) - r.logits.begin());
        if (arg == static_cast<std::size_t>(ys[i])) ++hits;
    }
    return xs.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(xs.size());
}

/// Per-sample SGD over shuffled epochs. Deterministic for a fixed seed.
inline TrainResult train_mlp(Graph g, const std::vector<Tensor>& xs, const std::vector<int>& ys,
                             const TrainConfig& cfg, FqMode mode = FqMode::Full) {
    if (xs.size() != ys.size()) throw ShapeMismatchError("inputs and labels differ in length");
    if (xs.empty()) throw EmptyCalibrationSetError("training needs at least one sample");
    auto layers = detail::mlp_layers(g);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t idx : order) {
            MlpGrads grads = mlp_loss_and_grads(g, xs[idx], ys[idx], mode);
            loss_sum += grads.loss;
            for (const auto& layer : layers) {
                Node n = g.node(layer.fc_id);
                auto& at = n.linear();
                const auto& dw = grads.dw.at(layer.fc_id).reals();
                for (std::size_t i = 0; i < dw.size(); ++i) at.w.reals()[i] -= cfg.lr * dw[i];
                if (!at.b) at.b = Tensor::real({at.w.shape()[0]});
                const auto& db = grads.db.at(layer.fc_id).reals();
                for (std::size_t i = 0; i < db.size(); ++i) at.b->reals()[i] -= cfg.lr * db[i];
                g.replace_node(n);
            }
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(xs.size()));
    }
    result.accuracy = evaluate_accuracy(g, xs, ys, mode);
    result.graph = std::move(g);
    return result;
}

}  // namespace qlower
