#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "qlower/fixture.hpp"
#include "qlower/interpreter.hpp"
#include "qlower/lowering.hpp"
#include "qlower/rng.hpp"

using namespace qlower;

namespace {

Graph single_fc_graph(Tensor w, std::optional<Tensor> b = std::nullopt) {
    Graph g;
    g.add_node(detail::make_input("in", {w.shape()[1]}));
    g.add_node(detail::make_fc("fc", "in", std::move(w), std::move(b)));
    g.add_node(detail::make_act("act", "fc"));
    g.add_node(detail::make_output("out", "act"));
    return g;
}

Graph conv_bn_act_graph(Tensor w, Tensor gamma, Tensor sigma, Tensor mu, Tensor beta,
                        std::vector<std::int64_t> in_shape) {
    Graph g;
    g.add_node(detail::make_input("in", std::move(in_shape)));
    g.add_node(detail::make_conv("conv", "in", std::move(w), std::nullopt, 1, 0));
    g.add_node(detail::make_bn("bn", "conv", std::move(gamma), std::move(sigma), std::move(mu),
                               std::move(beta)));
    g.add_node(detail::make_act("act", "bn"));
    g.add_node(detail::make_output("out", "act"));
    return g;
}

std::vector<Tensor> lenet_batches(std::uint64_t seed, int count = 4) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (int i = 0; i < count; ++i) out.push_back(random_real_input(rng, {1, 12, 12}));
    return out;
}

Graph lowered_lenet(BnStrategy strategy, double eps_in, std::uint64_t seed = 3) {
    Graph g = make_lenet_tiny(seed);
    g = calibrate(std::move(g), lenet_batches(seed + 1));
    g = to_fakequantized(std::move(g), 8, 8);
    return lower(std::move(g), eps_in, 8, strategy);
}

bool has_note(const PassNotes& notes, const std::string& code) {
    return std::any_of(notes.begin(), notes.end(), [&](const PassNote& n) { return n.code == code; });
}

} // namespace

TEST(Calibrate, RecordsActivationCeilingAndWeightRange) {
    Graph g = single_fc_graph(Tensor::real({1, 2}, {0.5, -0.25}));
    std::vector<Tensor> batches = {Tensor::real({2}, {1.0, 1.0}), Tensor::real({2}, {-2.0, -2.0})};
    PassNotes notes;
    g = calibrate(std::move(g), batches, &notes);
    EXPECT_DOUBLE_EQ(*g.node("act").act().beta_y, 0.25);
    EXPECT_DOUBLE_EQ(*g.node("fc").linear().w_min, -0.25);
    EXPECT_DOUBLE_EQ(*g.node("fc").linear().w_max, 0.5);
    EXPECT_TRUE(notes.empty());
}

TEST(Calibrate, FlagsDeadActivationsAndDegenerateWeights) {
    Graph g = single_fc_graph(Tensor::real({1, 2}, {-1.0, -1.0}));
    std::vector<Tensor> batches = {Tensor::real({2}, {1.0, 2.0})};
    PassNotes notes;
    g = calibrate(std::move(g), batches, &notes);
    EXPECT_TRUE(has_note(notes, "DeadActivation"));
    EXPECT_TRUE(has_note(notes, "DegenerateWeightRange"));
    EXPECT_DOUBLE_EQ(*g.node("act").act().beta_y, 0x1p-20);
    EXPECT_DOUBLE_EQ(*g.node("fc").linear().w_min, -1.0);
    EXPECT_DOUBLE_EQ(*g.node("fc").linear().w_max, -1.0 + 0x1p-20);
}

TEST(Calibrate, NeedsBatchesAndFloatRepresentation) {
    Graph g = single_fc_graph(Tensor::real({1, 2}, {0.5, -0.25}));
    EXPECT_THROW(calibrate(g, {}), EmptyCalibrationSetError);
    g.set_representation(Representation::FakeQuantized);
    EXPECT_THROW(calibrate(g, {Tensor::real({2}, {0.0, 0.0})}), PassOrderError);
}

TEST(ToFakeQuantized, AttachesQuantizers) {
    Graph g = single_fc_graph(Tensor::real({1, 2}, {0.5, -0.25}));
    EXPECT_THROW(to_fakequantized(g, 4, 4), NotCalibratedError);
    g = calibrate(std::move(g), {Tensor::real({2}, {1.0, 1.0})});
    g = to_fakequantized(std::move(g), 4, 3);
    EXPECT_EQ(g.representation(), Representation::FakeQuantized);
    EXPECT_EQ(*g.node("act").act().bits, 4);
    ASSERT_TRUE(g.node("fc").linear().wq.has_value());
    EXPECT_EQ(g.node("fc").linear().wq->bits, 3);
    EXPECT_DOUBLE_EQ(g.node("fc").linear().wq->alpha_w, -0.25);
    EXPECT_DOUBLE_EQ(g.node("fc").linear().wq->beta_w, 0.5);
}

TEST(FoldBn, FoldsScaleAndShiftIntoTheLinearOp) {
    Graph g = conv_bn_act_graph(Tensor::real({1, 1, 1, 1}, {1.0}), Tensor::real({1}, {2.0}),
                                Tensor::real({1}, {4.0}), Tensor::real({1}, {1.0}),
                                Tensor::real({1}, {0.5}), {1, 2, 2});
    g = fold_bn(std::move(g));
    EXPECT_FALSE(g.has_node("bn"));
    const auto& la = g.node("conv").linear();
    EXPECT_DOUBLE_EQ(la.w.reals()[0], 0.5);
    ASSERT_TRUE(la.b.has_value());
    EXPECT_DOUBLE_EQ(la.b->reals()[0], 0.0); // 0.5*(0-1)+0.5
    EXPECT_EQ(g.node("act").inputs, std::vector<std::string>{"conv"});
    EXPECT_DOUBLE_EQ(*la.w_min, 0.5);
    EXPECT_DOUBLE_EQ(*la.w_max, 0.5 + 0x1p-20);
    EXPECT_TRUE(validate(g).empty());
}

TEST(FoldBn, FoldedGraphComputesTheSameFunction) {
    Rng rng(21);
    for (int trial = 0; trial < 8; ++trial) {
        Graph g = make_random_graph(rng);
        Graph folded = fold_bn(g);
        for (const auto& [id, n] : folded.nodes()) EXPECT_NE(n.op, OpKind::BatchNorm);
        for (int k = 0; k < 5; ++k) {
            Tensor x = random_real_input(rng, g.node(g.input_id()).input().shape);
            Tensor a = run(g, x).output;
            Tensor b = run(folded, x).output;
            ASSERT_TRUE(a.same_shape(b));
            for (std::int64_t i = 0; i < a.size(); ++i) {
                double av = a.reals()[static_cast<std::size_t>(i)];
                double bv = b.reals()[static_cast<std::size_t>(i)];
                ASSERT_NEAR(av, bv, 1e-9 * std::max(1.0, std::abs(av)));
            }
        }
    }
}

TEST(FoldBn, RejectsUnfoldablePlacements) {
    // Batch norm after a pool, not after the linear op.
    Graph g;
    g.add_node(detail::make_input("in", {1, 4, 4}));
    g.add_node(detail::make_conv("conv", "in", Tensor::real({1, 1, 3, 3}), std::nullopt, 1, 1));
    g.add_node(detail::make_act("act", "conv"));
    g.add_node(detail::make_pool("pool", "act", OpKind::MaxPool2d, 2, 2));
    g.add_node(detail::make_bn("bn", "pool", Tensor::real({1}, {1.0}), Tensor::real({1}, {1.0}),
                               Tensor::real({1}, {0.0}), Tensor::real({1}, {0.0})));
    g.add_node(detail::make_output("out", "bn"));
    EXPECT_THROW(fold_bn(g), NotFoldableError);

    // Linear op that feeds the batch norm and somebody else.
    Graph h;
    h.add_node(detail::make_input("in", {1, 4, 4}));
    h.add_node(detail::make_conv("conv", "in", Tensor::real({1, 1, 3, 3}), std::nullopt, 1, 1));
    h.add_node(detail::make_bn("bn", "conv", Tensor::real({1}, {1.0}), Tensor::real({1}, {1.0}),
                               Tensor::real({1}, {0.0}), Tensor::real({1}, {0.0})));
    Node extra = detail::make_act("extra", "conv");
    h.add_node(std::move(extra));
    h.add_node(detail::make_act("act", "bn"));
    Node add = detail::make_add("add", {"act", "extra"});
    h.add_node(std::move(add));
    h.add_node(detail::make_output("out", "add"));
    EXPECT_THROW(fold_bn(h), NotFoldableError);
}

TEST(BnQuantizer, SymmetricLatticesFromTheLargestMagnitude) {
    Graph g = conv_bn_act_graph(Tensor::real({1, 1, 1, 1}, {1.0}), Tensor::real({1}, {2.0}),
                                Tensor::real({1}, {1.0}), Tensor::real({1}, {0.0}),
                                Tensor::real({1}, {0.0}), {1, 2, 2});
    g.set_representation(Representation::FakeQuantized);
    g = bn_quantizer(std::move(g), 8);
    const auto& q = g.node("bn").bn().q;
    ASSERT_TRUE(q.has_value());
    EXPECT_DOUBLE_EQ(q->eps_kappa, 4.0 / 255.0);
    EXPECT_EQ(q->q_kappa.ints()[0], 127); // kappa = 2 sits on the top lattice point
    EXPECT_DOUBLE_EQ(q->eps_lambda, 2.0 / 255.0); // all-zero lambda falls back to bound 1
    EXPECT_EQ(q->q_lambda.ints()[0], 0);
    EXPECT_EQ(q->bits, 8);
}

TEST(HardenWeights, SnapsOntoTheLatticeOnce) {
    Graph g = single_fc_graph(Tensor::real({1, 2}, {0.3, -0.1}));
    g = calibrate(std::move(g), {Tensor::real({2}, {1.0, 1.0})});
    g = to_fakequantized(std::move(g), 8, 4);
    Graph h1 = harden_weights(g);
    Graph h2 = harden_weights(h1);
    EXPECT_TRUE(bitwise_equal(h1.node("fc").linear().w, h2.node("fc").linear().w));
    // and the snapped weights live on the quantizer lattice
    const auto& la = h1.node("fc").linear();
    double eps = la.wq->eps();
    for (double v : la.w.reals()) EXPECT_NEAR(v / eps, std::round(v / eps), 1e-9);

    Graph bare = single_fc_graph(Tensor::real({1, 2}, {0.3, -0.1}));
    bare.set_representation(Representation::FakeQuantized);
    EXPECT_THROW(harden_weights(bare), MissingQuantParamsError);
}

TEST(Passes, EnforceRepresentationOrder) {
    Graph fp = single_fc_graph(Tensor::real({1, 2}, {0.5, -0.25}));
    Graph fq = fp;
    fq.set_representation(Representation::FakeQuantized);
    Graph qd = fp;
    qd.set_representation(Representation::QuantizedDeployable);

    EXPECT_THROW(calibrate(fq, {Tensor::real({2})}), PassOrderError);
    EXPECT_THROW(to_fakequantized(fq, 8, 8), PassOrderError);
    EXPECT_THROW(fold_bn(qd), PassOrderError);
    EXPECT_THROW(bn_quantizer(fp, 8), PassOrderError);
    EXPECT_THROW(bn_quantizer(qd, 8), PassOrderError);
    EXPECT_THROW(harden_weights(fp), PassOrderError);
    EXPECT_THROW(set_deployment(fp, 0.5), PassOrderError);
    EXPECT_THROW(set_deployment(qd, 0.5), PassOrderError);
    EXPECT_THROW(add_input_bias(qd, 0.1), PassOrderError);
    EXPECT_THROW(integerize(fq, 0.5), PassOrderError);
    EXPECT_THROW(merge_bn_thresholds(fq), PassOrderError);
}

TEST(SetDeployment, PropagatesQuantaAndExactAccumulatorBounds) {
    Graph g;
    g.add_node(detail::make_input("in", {2}, 4));
    g.add_node(detail::make_fc("fc", "in", Tensor::real({1, 2}, {0.25, -0.5}), std::nullopt));
    g.add_node(detail::make_act("act", "fc"));
    g.add_node(detail::make_output("out", "act"));
    g.node("fc").linear().wq = WeightQuantParams{-0.5, 0.25, 2}; // eps 0.25, window [-2, 1]
    g.node("act").act().beta_y = 0.875;
    g.node("act").act().bits = 3;
    g.set_representation(Representation::FakeQuantized);

    g = set_deployment(std::move(g), 0.5);
    EXPECT_EQ(g.representation(), Representation::QuantizedDeployable);
    EXPECT_DOUBLE_EQ(g.eps_in(), 0.5);

    const QuantSpec& si = *g.node("in").out_spec;
    EXPECT_DOUBLE_EQ(si.eps, 0.5);
    EXPECT_EQ(si.lo, 0);
    EXPECT_EQ(si.hi, 15);

    const QuantSpec& sf = *g.node("fc").out_spec;
    EXPECT_DOUBLE_EQ(sf.eps, 0.125); // eps_w * eps_in
    EXPECT_EQ(sf.lo, -30);           // most negative: q_w=-2 against q_x=15
    EXPECT_EQ(sf.hi, 15);            // most positive: q_w=1 against q_x=15
    EXPECT_EQ(sf.bits, 6);

    const QuantSpec& sa = *g.node("act").out_spec;
    EXPECT_DOUBLE_EQ(sa.eps, 0.125);
    EXPECT_EQ(sa.lo, 0);
    EXPECT_EQ(sa.hi, 7);
    EXPECT_DOUBLE_EQ(g.node("out").out_spec->eps, sa.eps);

    // The identity requantizer the activation gets at integerize is exact.
    Graph id = integerize(std::move(g), 0.5);
    const auto& rq = *id.node("act").act().rq;
    EXPECT_EQ(rq.m, 16);
    EXPECT_EQ(rq.d, 4);
    EXPECT_TRUE(bitwise_equal(id.node("fc").linear().w, Tensor::integer({1, 2}, {1, -2})));
}

TEST(SetDeployment, RejectsBadInputsAndUnhardenedWeights) {
    Graph g = single_fc_graph(Tensor::real({1, 2}, {0.3, -0.1}));
    g = calibrate(std::move(g), {Tensor::real({2}, {1.0, 1.0})});
    g = to_fakequantized(std::move(g), 8, 4);
    EXPECT_THROW(set_deployment(g, 0.0), OutOfRangeError);
    EXPECT_THROW(set_deployment(g, std::numeric_limits<double>::infinity()), OutOfRangeError);
    // weights were never hardened: they are off-lattice
    EXPECT_THROW(set_deployment(g, 1.0 / 255.0), PassOrderError);
}

TEST(AddInputBias, FoldsTheOffsetIntoTheLeadingBias) {
    Graph g;
    g.add_node(detail::make_input("in", {2}));
    g.add_node(detail::make_fc("fc", "in", Tensor::real({2, 2}, {1.0, 2.0, 3.0, 4.0}), std::nullopt));
    g.add_node(detail::make_act("act", "fc"));
    g.add_node(detail::make_output("out", "act"));
    g = add_input_bias(std::move(g), 0.5);
    const auto& b = g.node("fc").linear().b;
    ASSERT_TRUE(b.has_value());
    EXPECT_DOUBLE_EQ(b->reals()[0], 1.5); // 0.5 * (1 + 2)
    EXPECT_DOUBLE_EQ(b->reals()[1], 3.5); // 0.5 * (3 + 4)
}

TEST(AddInputBias, RejectsNonAbsorbableShapes) {
    Graph g;
    g.add_node(detail::make_input("in", {2}));
    g.add_node(detail::make_act("act", "in"));
    g.add_node(detail::make_output("out", "act"));
    EXPECT_THROW(add_input_bias(g, 0.5), NoLeadingLinearError);

    Graph h;
    h.add_node(detail::make_input("in", {1, 4, 4}));
    h.add_node(detail::make_conv("conv", "in", Tensor::real({1, 1, 3, 3}), std::nullopt, 1, 1));
    h.add_node(detail::make_output("out", "conv"));
    EXPECT_THROW(add_input_bias(h, 0.5), UnsupportedOpError); // pad would break the offset

    Graph two;
    two.add_node(detail::make_input("in", {2}));
    two.add_node(detail::make_fc("fc_a", "in", Tensor::real({2, 2}), std::nullopt));
    two.add_node(detail::make_fc("fc_b", "in", Tensor::real({2, 2}), std::nullopt));
    two.add_node(detail::make_act("act_a", "fc_a"));
    two.add_node(detail::make_act("act_b", "fc_b"));
    Node add = detail::make_add("add", {"act_a", "act_b"});
    two.add_node(std::move(add));
    two.add_node(detail::make_output("out", "add"));
    EXPECT_THROW(add_input_bias(two, 0.5), NoLeadingLinearError);
}

TEST(Integerize, RequiresTheDeployedInputQuantum) {
    Graph g = lowered_lenet(BnStrategy::Integer, 1.0 / 255.0);
    EXPECT_THROW(integerize(g, 1.0 / 128.0), PassOrderError);
    EXPECT_NO_THROW(integerize(g, 1.0 / 255.0));
}

TEST(Integerize, BiasLandsInTheAccumulatorSpaceWithinTheAuditBound) {
    Graph g = lowered_lenet(BnStrategy::Fold, 1.0 / 255.0); // folding creates biases
    std::map<std::string, Tensor> real_bias;
    for (const auto& [id, n] : g.nodes())
        if ((n.op == OpKind::Conv2d || n.op == OpKind::FullyConnected) && n.linear().b)
            real_bias.emplace(id, *n.linear().b);

    Graph id_graph = integerize(std::move(g), 1.0 / 255.0);
    int checked = 0;
    for (const auto& [id, b] : real_bias) {
        const auto& la = id_graph.node(id).linear();
        ASSERT_TRUE(la.b.has_value());
        ASSERT_EQ(la.b->kind(), ValueKind::Integer);
        ASSERT_TRUE(la.bias_rq.has_value());
        double eps_phi = id_graph.node(id).out_spec->eps;
        double eps_b = la.bias_rq->eps_b;
        EXPECT_DOUBLE_EQ(la.bias_rq->rq.target_eps, eps_phi);
        for (std::int64_t c = 0; c < b.size(); ++c) {
            double want = b.reals()[static_cast<std::size_t>(c)];
            double got = eps_phi * static_cast<double>(la.b->ints()[static_cast<std::size_t>(c)]);
            double qb0 = std::abs(want) / eps_b + 1.0;
            double bound = eps_b * (1.0 + qb0 / 16.0) + eps_phi;
            ASSERT_LE(std::abs(got - want), bound) << id << " channel " << c;
            ++checked;
        }
    }
    EXPECT_GT(checked, 0);
}

TEST(Integerize, ZeroBiasBecomesIntegerZerosWithoutARequantizer) {
    Graph g;
    g.add_node(detail::make_input("in", {2}));
    g.add_node(detail::make_fc("fc", "in", Tensor::real({1, 2}, {0.25, -0.5}),
                               Tensor::real({1}, {0.0})));
    g.add_node(detail::make_act("act", "fc"));
    g.add_node(detail::make_output("out", "act"));
    g.node("fc").linear().wq = WeightQuantParams{-0.5, 0.25, 2};
    g.node("act").act().beta_y = 0.875;
    g.node("act").act().bits = 3;
    g.set_representation(Representation::FakeQuantized);
    g = set_deployment(std::move(g), 0.5);
    g = integerize(std::move(g), 0.5);
    const auto& la = g.node("fc").linear();
    ASSERT_TRUE(la.b.has_value());
    EXPECT_EQ(la.b->kind(), ValueKind::Integer);
    EXPECT_EQ(la.b->ints()[0], 0);
    EXPECT_FALSE(la.bias_rq.has_value());
}

TEST(Integerize, EveryNodeStaysInsideItsDeclaredBounds) {
    for (BnStrategy strategy : {BnStrategy::Fold, BnStrategy::Integer, BnStrategy::Thresholds}) {
        Graph g = integerize(lowered_lenet(strategy, 1.0 / 255.0), 1.0 / 255.0);
        Rng rng(55);
        for (int k = 0; k < 10; ++k) {
            Tensor x = random_integer_input(rng, {1, 12, 12}, *g.node("in").out_spec);
            RunResult res = run(g, x);
            EXPECT_TRUE(res.trace.integer_pure());
            for (const auto& [id, nt] : res.trace.per_node) {
                const QuantSpec& spec = *g.node(id).out_spec;
                for (std::int64_t v : nt.output.ints()) {
                    ASSERT_GE(v, spec.lo) << id;
                    ASSERT_LE(v, spec.hi) << id;
                }
            }
        }
    }
}

TEST(Integerize, FlagsUnderflowingBatchNormOffsets) {
    Graph g;
    g.add_node(detail::make_input("in", {1, 1, 2}));
    g.add_node(detail::make_conv("conv", "in", Tensor::real({1, 1, 1, 2}, {-1.0, 1.0}), std::nullopt, 1, 0));
    g.add_node(detail::make_bn("bn", "conv", Tensor::real({1}, {1.0}), Tensor::real({1}, {1.0}),
                               Tensor::real({1}, {0.0}), Tensor::real({1}, {0.0001})));
    g.add_node(detail::make_act("act", "bn"));
    g.add_node(detail::make_output("out", "act"));

    g = calibrate(std::move(g), {Tensor::real({1, 1, 2}, {0.5, 1.0})});
    g = to_fakequantized(std::move(g), 8, 2);
    g = bn_quantizer(std::move(g), 8);
    g = harden_weights(std::move(g));
    g = set_deployment(std::move(g), 0.25);

    PassNotes notes;
    g = integerize(std::move(g), 0.25, 16, 256, &notes);
    EXPECT_TRUE(has_note(notes, "LambdaUnderflow"));
    const auto& q = *g.node("bn").bn().q;
    EXPECT_EQ(*q.lambda_m, 0);
    EXPECT_NE(q.q_lambda.ints()[0], 0);
    EXPECT_EQ(q.q_lambda_out->ints()[0], 0);
}

TEST(Integerize, AveragePoolMultiplierIsMinimalForTheErrorFactor) {
    Graph g;
    g.add_node(detail::make_input("in", {1, 6, 6}));
    g.add_node(detail::make_conv("conv", "in", Tensor::real({1, 1, 1, 1}, {0.25}), std::nullopt, 1, 0));
    g.add_node(detail::make_act("act", "conv"));
    g.add_node(detail::make_pool("pool", "act", OpKind::AvgPool2d, 3, 3));
    g.add_node(detail::make_output("out", "pool"));
    g.node("conv").linear().wq = WeightQuantParams{-0.5, 0.25, 2};
    g.node("act").act().beta_y = 0.875;
    g.node("act").act().bits = 3;
    g.set_representation(Representation::FakeQuantized);
    g = set_deployment(std::move(g), 0.5);
    g = integerize(std::move(g), 0.5);

    // 9-element window: smallest d with 16*(2^d mod 9) <= 2^d is 6, m = 7.
    EXPECT_EQ(*g.node("pool").pool().d, 6);
    EXPECT_EQ(*g.node("pool").pool().m, 7);

    Graph h;
    h.add_node(detail::make_input("in", {1, 4, 4}));
    h.add_node(detail::make_conv("conv", "in", Tensor::real({1, 1, 1, 1}, {0.25}), std::nullopt, 1, 0));
    h.add_node(detail::make_act("act", "conv"));
    h.add_node(detail::make_pool("pool", "act", OpKind::AvgPool2d, 2, 2));
    h.add_node(detail::make_output("out", "pool"));
    h.node("conv").linear().wq = WeightQuantParams{-0.5, 0.25, 2};
    h.node("act").act().beta_y = 0.875;
    h.node("act").act().bits = 3;
    h.set_representation(Representation::FakeQuantized);
    h = set_deployment(std::move(h), 0.5);
    h = integerize(std::move(h), 0.5);

    // power-of-two windows divide exactly: m/2^d == 1/4
    EXPECT_EQ(*h.node("pool").pool().d, 2);
    EXPECT_EQ(*h.node("pool").pool().m, 1);
}

TEST(BuildThresholds, MatchesTheClosedForm) {
    auto th = build_thresholds(1.0, 2.0, 0.1, 0.5, 0.01, 0.25, 4);
    EXPECT_EQ(th, (std::vector<std::int64_t>{-90, -40, 10, 60, 110}));
    EXPECT_THROW(build_thresholds(-1.0, 2.0, 0.1, 0.5, 0.01, 0.25, 4), NonMonotoneThresholdsError);
    EXPECT_THROW(build_thresholds(1.0, 0.0, 0.1, 0.5, 0.01, 0.25, 4), NonMonotoneThresholdsError);
    EXPECT_THROW(build_thresholds(1.0, 2.0, 0.1, 0.5, 1e-300, 0.25, 4), OverflowError);
}

TEST(MergeBnThresholds, ReplacesTheBnActPairInPlace) {
    Graph g = lowered_lenet(BnStrategy::Thresholds, 1.0 / 255.0);
    EXPECT_FALSE(g.has_node("bn1"));
    EXPECT_FALSE(g.has_node("bn2"));
    const Node& th = g.node("act1"); // keeps the activation's id
    EXPECT_EQ(th.op, OpKind::ThresholdActivation);
    EXPECT_EQ(th.inputs, std::vector<std::string>{"conv1"});
    EXPECT_EQ(th.thresh().n_levels, 255);
    EXPECT_EQ(th.thresh().thresholds.shape(), (std::vector<std::int64_t>{4, 256}));
    ASSERT_TRUE(th.out_spec.has_value());
    EXPECT_EQ(th.out_spec->lo, 0);
    EXPECT_EQ(th.out_spec->hi, 255);
    EXPECT_TRUE(validate(g).empty());
}

TEST(MergeBnThresholds, RejectsBadTargetsAndWideTables) {
    Graph g = lowered_lenet(BnStrategy::Integer, 1.0 / 255.0);
    EXPECT_THROW(merge_bn_thresholds(g, std::vector<std::string>{"pool1"}), NotFoldableError);

    // act after conv without a batch norm in between
    Graph h;
    h.add_node(detail::make_input("in", {2}));
    h.add_node(detail::make_fc("fc", "in", Tensor::real({1, 2}, {0.25, -0.5}), std::nullopt));
    h.add_node(detail::make_act("act", "fc"));
    h.add_node(detail::make_output("out", "act"));
    h.node("fc").linear().wq = WeightQuantParams{-0.5, 0.25, 2};
    h.node("act").act().beta_y = 0.875;
    h.node("act").act().bits = 3;
    h.set_representation(Representation::FakeQuantized);
    h = set_deployment(std::move(h), 0.5);
    EXPECT_THROW(merge_bn_thresholds(h, std::vector<std::string>{"act"}), NotFoldableError);

    Graph wide = make_lenet_tiny(3);
    wide = calibrate(std::move(wide), lenet_batches(4));
    wide = to_fakequantized(std::move(wide), 9, 8); // 9-bit activations
    wide = bn_quantizer(std::move(wide), 8);
    wide = harden_weights(std::move(wide));
    wide = set_deployment(std::move(wide), 1.0 / 255.0);
    EXPECT_THROW(merge_bn_thresholds(wide), UnsupportedOpError);
}

TEST(CheckEpsConsistency, CleanPipelinePassesAndTamperingIsCaught) {
    Graph g = integerize(lowered_lenet(BnStrategy::Integer, 1.0 / 255.0), 1.0 / 255.0);
    EXPECT_TRUE(check_eps_consistency(g).empty());

    g.node("act1").act().rq->target_eps *= 2.0;
    auto v = check_eps_consistency(g);
    ASSERT_FALSE(v.empty());
    EXPECT_EQ(v.front().rule, "rq-target");
}

TEST(Lower, AllThreeStrategiesProduceRunnableIntegerGraphs) {
    Rng rng(66);
    for (BnStrategy strategy : {BnStrategy::Fold, BnStrategy::Integer, BnStrategy::Thresholds}) {
        Graph g = integerize(lowered_lenet(strategy, 1.0 / 255.0), 1.0 / 255.0);
        EXPECT_EQ(g.representation(), Representation::IntegerDeployable);
        EXPECT_TRUE(check_eps_consistency(g).empty());
        Tensor x = random_integer_input(rng, {1, 12, 12}, *g.node("in").out_spec);
        RunResult res = run(g, x);
        EXPECT_TRUE(res.trace.integer_pure());
        EXPECT_EQ(res.output.size(), 4);
    }
    EXPECT_EQ(bn_strategy_from_string("fold"), BnStrategy::Fold);
    EXPECT_EQ(bn_strategy_from_string("integer"), BnStrategy::Integer);
    EXPECT_EQ(bn_strategy_from_string("thresholds"), BnStrategy::Thresholds);
    EXPECT_THROW(bn_strategy_from_string("none"), ParseError);
}
