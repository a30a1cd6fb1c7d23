#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "qlower/fixture.hpp"
#include "qlower/interpreter.hpp"
#include "qlower/lowering.hpp"
#include "qlower/rng.hpp"
#include "qlower/verify.hpp"

using namespace qlower;

namespace {

// input -> activation -> output, deployed with a deliberately inexact
// requantizer (0.01 into 0.1 has no finite binary representation).
Graph act_only_qd() {
    Graph g;
    g.add_node(detail::make_input("in", {1}));
    g.add_node(detail::make_act("act", "in"));
    g.add_node(detail::make_output("out", "act"));
    g.node("act").act().beta_y = 1.5;
    g.node("act").act().bits = 4;
    g.set_representation(Representation::FakeQuantized);
    return set_deployment(std::move(g), 0.01);
}

// Every quantum a power of two and no biases: the integer path loses nothing.
Graph pow2_chain_qd() {
    Graph g;
    g.add_node(detail::make_input("in", {2}));
    g.add_node(detail::make_fc("fc", "in", Tensor::real({1, 2}, {0.5, -0.25}), std::nullopt));
    g.add_node(detail::make_act("act", "fc"));
    g.add_node(detail::make_output("out", "act"));
    g.node("fc").linear().wq = WeightQuantParams{-1.0, 0.75, 3}; // eps 0.25
    g.node("act").act().beta_y = 0.875;
    g.node("act").act().bits = 3; // eps 0.125
    g.set_representation(Representation::FakeQuantized);
    return set_deployment(std::move(g), 1.0 / 256.0);
}

Graph quantized_lenet(BnStrategy strategy, std::uint64_t seed = 3) {
    Graph g = make_lenet_tiny(seed);
    Rng rng(seed + 1);
    std::vector<Tensor> batches;
    for (int i = 0; i < 4; ++i) batches.push_back(random_real_input(rng, {1, 12, 12}));
    g = calibrate(std::move(g), batches);
    g = to_fakequantized(std::move(g), 8, 8);
    return lower(std::move(g), 1.0 / 255.0, 8, strategy);
}

const NodeCheck& check_for(const VerifyReport& r, const std::string& id) {
    for (const NodeCheck& c : r.checks)
        if (c.node_id == id) return c;
    throw std::logic_error("no check for " + id);
}

} // namespace

TEST(DeriveBounds, WantsAnIntegerGraph) {
    EXPECT_THROW(derive_bounds(act_only_qd()), PassOrderError);
}

TEST(DeriveBounds, ActivationBudgetCoversEveryInputExactly) {
    Graph qd = act_only_qd();
    Graph id = integerize(qd, 0.01);

    auto bounds = derive_bounds(id);
    const NodeBound& act = bounds.at("act");
    EXPECT_GT(act.requant_term, 0.0);
    EXPECT_DOUBLE_EQ(act.lattice_term, 0.1); // one activation quantum
    EXPECT_DOUBLE_EQ(act.total,
                     act.upstream_term + act.requant_term + act.lattice_term + act.fp_term);
    EXPECT_FALSE(act.exact);
    EXPECT_TRUE(bounds.at("in").exact);

    std::vector<Tensor> inputs;
    for (std::int64_t q = 0; q <= 255; ++q) inputs.push_back(Tensor::integer({1}, {q}));
    VerifyReport report = compare_representations(qd, id, inputs);
    EXPECT_TRUE(report.all_ok);
    EXPECT_GE(report.worst_margin, 0.0);
    // the requantizer really does drift: a full lattice step shows up somewhere
    EXPECT_GT(check_for(report, "act").deviation, 0.09);
    EXPECT_LE(check_for(report, "act").deviation, act.total);
}

TEST(DeriveBounds, PowerOfTwoChainIsExact) {
    Graph qd = pow2_chain_qd();
    Graph id = integerize(qd, 1.0 / 256.0);

    auto bounds = derive_bounds(id);
    for (const std::string& node : {"in", "fc", "act", "out"}) EXPECT_TRUE(bounds.at(node).exact) << node;

    Rng rng(31);
    std::vector<Tensor> inputs;
    for (int i = 0; i < 40; ++i)
        inputs.push_back(random_integer_input(rng, {2}, *id.node("in").out_spec));
    VerifyReport report = compare_representations(qd, id, inputs);
    EXPECT_TRUE(report.all_ok);
    for (const NodeCheck& c : report.checks) EXPECT_EQ(c.deviation, 0.0) << c.node_id;
}

TEST(CompareRepresentations, AcceptsTheLoweredPipelines) {
    Rng rng(47);
    for (BnStrategy strategy : {BnStrategy::Fold, BnStrategy::Integer, BnStrategy::Thresholds}) {
        Graph qd = quantized_lenet(strategy);
        Graph id = integerize(qd, 1.0 / 255.0);
        std::vector<Tensor> inputs;
        for (int i = 0; i < 8; ++i)
            inputs.push_back(random_integer_input(rng, {1, 12, 12}, *id.node("in").out_spec));
        VerifyReport report = compare_representations(qd, id, inputs);
        EXPECT_TRUE(report.all_ok);
        EXPECT_GE(report.worst_margin, 0.0);
        EXPECT_EQ(report.checks.size(), id.size());
    }
}

TEST(CompareRepresentations, AcceptsRandomGraphs) {
    Rng rng(91);
    for (int trial = 0; trial < 4; ++trial) {
        Graph g = make_random_graph(rng);
        std::vector<std::int64_t> in_shape = g.node(g.input_id()).input().shape;
        std::vector<Tensor> batches;
        for (int i = 0; i < 3; ++i) batches.push_back(random_real_input(rng, in_shape));
        g = calibrate(std::move(g), batches);
        g = to_fakequantized(std::move(g), 8, 8);
        Graph qd = lower(std::move(g), 1.0 / 255.0, 8, BnStrategy::Integer);
        Graph id = integerize(qd, 1.0 / 255.0);
        std::vector<Tensor> inputs;
        for (int i = 0; i < 5; ++i)
            inputs.push_back(random_integer_input(rng, in_shape, *id.node("in").out_spec));
        VerifyReport report = compare_representations(qd, id, inputs);
        EXPECT_TRUE(report.all_ok) << "trial " << trial;
    }
}

TEST(CompareRepresentations, CatchesATamperedRequantizer) {
    Graph qd = act_only_qd();
    Graph id = integerize(qd, 0.01);
    id.node("act").act().rq->m *= 2;

    std::vector<Tensor> inputs = {Tensor::integer({1}, {100})};
    VerifyReport report = compare_representations(qd, id, inputs);
    EXPECT_FALSE(report.all_ok);
    EXPECT_LT(report.worst_margin, 0.0);
    EXPECT_FALSE(check_for(report, "act").ok);
}

TEST(CompareRepresentations, ThresholdSnapCaseStaysExact) {
    Graph qd = quantized_lenet(BnStrategy::Thresholds);
    Graph id = integerize(qd, 1.0 / 255.0);
    auto bounds = derive_bounds(id);
    // act1 was merged into a threshold node fed by an exact input, so the
    // recovered level snaps and no threshold can be miscounted.
    EXPECT_EQ(id.node("act1").op, OpKind::ThresholdActivation);
    EXPECT_EQ(bounds.at("act1").requant_term, 0.0);
    EXPECT_GT(bounds.at("act1").fp_term, 0.0);
}

TEST(CompareRepresentations, FloatAgainstFakeQuantizedHasNoBudget) {
    Graph fp = make_mlp2(0);
    Rng rng(5);
    std::vector<Tensor> batches = {random_real_input(rng, {2}), random_real_input(rng, {2})};
    Graph fq = to_fakequantized(calibrate(fp, batches), 4, 4);

    std::vector<Tensor> inputs = {random_real_input(rng, {2})};
    VerifyReport report = compare_representations(fp, fq, inputs);
    EXPECT_TRUE(report.all_ok);
    EXPECT_EQ(report.worst_margin, std::numeric_limits<double>::infinity());
    bool any_dev = false;
    for (const NodeCheck& c : report.checks) {
        EXPECT_FALSE(c.bound.has_value());
        any_dev = any_dev || c.deviation > 0.0;
    }
    EXPECT_TRUE(any_dev);
}

TEST(CompareRepresentations, RejectsStructurallyDifferentGraphs) {
    Graph a = act_only_qd();
    Graph b;
    b.add_node(detail::make_input("in", {1}));
    b.add_node(detail::make_act("other", "in"));
    b.add_node(detail::make_output("out", "other"));
    b.node("other").act().beta_y = 1.5;
    b.node("other").act().bits = 4;
    b.set_representation(Representation::FakeQuantized);
    b = set_deployment(std::move(b), 0.01);
    EXPECT_THROW(compare_representations(a, b, {}), GraphMismatchError);

    Graph c = act_only_qd();
    c.node("act").op = OpKind::MaxPool2d;
    c.node("act").attrs = PoolAttrs{};
    EXPECT_THROW(compare_representations(a, c, {}), GraphMismatchError);
}
