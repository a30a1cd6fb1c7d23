#pragma once

#include <cmath>
#include <cstdint>

#include "qlower/errors.hpp"
#include "qlower/tensor.hpp"

namespace qlower {

/// Clipped-activation quantizer state. The activation lattice is
/// { k * eps_y : 0 <= k <= 2^bits - 1 } with eps_y = beta_y / (2^bits - 1),
/// so the clip ceiling beta_y itself is representable.
struct ActQuantParams {
    double beta_y = 1.0;
    int bits = 8;

    double eps() const { return beta_y / static_cast<double>((std::int64_t(1) << bits) - 1); }
    QuantSpec spec() const { return QuantSpec::activation(eps(), bits); }

    bool operator==(const ActQuantParams&) const = default;
};

/// Clipped-weight quantizer state. Weights keep a zero lattice offset; the
/// clip interval [alpha_w, beta_w) only selects which 2^bits consecutive
/// lattice points are usable, starting at floor(alpha_w / eps_w).
struct WeightQuantParams {
    double alpha_w = -1.0;
    double beta_w = 1.0;
    int bits = 8;

    double eps() const { return (beta_w - alpha_w) / static_cast<double>((std::int64_t(1) << bits) - 1); }
    QuantSpec spec() const {
        double e = eps();
        auto lo = static_cast<std::int64_t>(std::floor(alpha_w / e));
        return QuantSpec{e, 0.0, bits, lo, lo + (std::int64_t(1) << bits) - 1};
    }

    bool operator==(const WeightQuantParams&) const = default;
};

/// Fake-quantized activation: y = eps_y * clip(floor(phi / eps_y), 0, 2^Q-1).
/// Values at or above beta_y saturate to the top lattice point; negatives
/// collapse to zero, which also covers the ReLU.
inline Tensor fq_act_forward(const Tensor& phi, const ActQuantParams& p) {
    QuantSpec s = p.spec();
    return dequantize(quantize_linear(phi, s), s);
}

/// Fake-quantized weight: w_hat = eps_w * clip(floor(w / eps_w), lo, hi) with
/// [lo, hi] the usable window of WeightQuantParams::spec().
inline Tensor fq_weight_forward(const Tensor& w, const WeightQuantParams& p) {
    QuantSpec s = p.spec();
    return dequantize(quantize_linear(w, s), s);
}

/// Straight-through estimator for the activation clip: the gradient passes
/// where 0 <= phi < beta_y and is zero elsewhere. The interval is half-open:
/// the lower clip boundary belongs to the pass-through region, the upper one
/// does not.
inline Tensor ste_act_backward(const Tensor& upstream, const Tensor& phi, const ActQuantParams& p) {
    if (!upstream.same_shape(phi)) throw ShapeMismatchError("gradient and activation shapes differ");
    const auto& g = upstream.reals();
    const auto& x = phi.reals();
    std::vector<double> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = (x[i] >= 0.0 && x[i] < p.beta_y) ? g[i] : 0.0;
    return Tensor::real(upstream.shape(), std::move(out));
}

/// Straight-through estimator for the weight clip: pass-through on
/// [alpha_w, beta_w), zero outside.
inline Tensor ste_weight_backward(const Tensor& upstream, const Tensor& w, const WeightQuantParams& p) {
    if (!upstream.same_shape(w)) throw ShapeMismatchError("gradient and weight shapes differ");
    const auto& g = upstream.reals();
    const auto& x = w.reals();
    std::vector<double> out(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = (x[i] >= p.alpha_w && x[i] < p.beta_w) ? g[i] : 0.0;
    return Tensor::real(upstream.shape(), std::move(out));
}

} // namespace qlower
