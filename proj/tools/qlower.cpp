// Command line driver for the lowering toolchain. Models move between
// stages as JSON manifests plus tensor blobs; see manifest.hpp for the
// format. Subcommands mirror the pass pipeline one to one, plus run/compare
// for execution and genfixture for reproducible demo models.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qlower/qlower.hpp"

namespace {

using nlohmann::json;

int log_level() {
    const char* v = std::getenv("QLOWER_LOG");
    if (!v) return 1;
    std::string s(v);
    if (s == "quiet") return 0;
    if (s == "debug") return 2;
    return 1;
}

void print_notes(const qlower::PassNotes& notes) {
    if (log_level() < 1) return;
    for (const auto& n : notes)
        std::cerr << "warning: [" << n.code << "] " << n.node_id << ": " << n.message << "\n";
}

std::vector<qlower::Tensor> load_batches(const std::vector<std::string>& paths) {
    std::vector<qlower::Tensor> out;
    for (const auto& p : paths) out.push_back(qlower::read_tensor_blob(p));
    return out;
}

json tally_json(const qlower::OpTally& t) {
    return json{{"integer_ops", t.integer_ops},
                {"real_ops", t.real_ops},
                {"peak_int_magnitude", t.peak_int_magnitude}};
}

void write_json(const std::string& path, const json& j) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw qlower::ParseError("cannot open " + path + " for writing");
    f << j.dump(2) << "\n";
}

int cmd_calibrate(const std::string& model, const std::vector<std::string>& data, const std::string& out) {
    qlower::Graph g = qlower::load_manifest(model);
    qlower::PassNotes notes;
    g = qlower::calibrate(std::move(g), load_batches(data), &notes);
    print_notes(notes);
    qlower::save_manifest(g, out);
    return 0;
}

int cmd_quantize(const std::string& model, int bits_a, int bits_w, const std::string& out) {
    qlower::Graph g = qlower::load_manifest(model);
    g = qlower::to_fakequantized(std::move(g), bits_a, bits_w);
    qlower::save_manifest(g, out);
    return 0;
}

int cmd_lower(const std::string& model, double eps_in, int bits_bn, const std::string& strategy,
              const std::string& out) {
    qlower::Graph g = qlower::load_manifest(model);
    g = qlower::lower(std::move(g), eps_in, bits_bn, qlower::bn_strategy_from_string(strategy));
    qlower::save_manifest(g, out);
    return 0;
}

int cmd_integerize(const std::string& model, std::optional<double> eps_in, std::int64_t rqf_act,
                   std::int64_t rqf_add, const std::string& out) {
    qlower::Graph g = qlower::load_manifest(model);
    double e = eps_in ? *eps_in : g.eps_in();
    qlower::PassNotes notes;
    g = qlower::integerize(std::move(g), e, rqf_act, rqf_add, &notes);
    print_notes(notes);
    qlower::save_manifest(g, out);
    return 0;
}

int cmd_run(const std::string& model, const std::string& data, const std::string& out,
            const std::string& report) {
    qlower::Graph g = qlower::load_manifest(model);
    qlower::Tensor input = qlower::read_tensor_blob(data);
    qlower::RunResult res = qlower::run(g, input);
    if (!out.empty()) qlower::write_tensor_blob(out, res.output);
    if (log_level() >= 2) {
        for (const auto& [id, t] : res.trace.per_node)
            std::cerr << id << ": int_ops=" << t.tally.integer_ops << " real_ops=" << t.tally.real_ops
                      << "\n";
    }
    if (!report.empty()) {
        json per = json::object();
        for (const auto& [id, t] : res.trace.per_node) per[id] = tally_json(t.tally);
        write_json(report, json{{"representation", qlower::to_string(g.representation())},
                                {"total_integer_ops", res.trace.total_integer_ops()},
                                {"total_real_ops", res.trace.total_real_ops()},
                                {"integer_pure", res.trace.integer_pure()},
                                {"per_node", per}});
    }
    std::cout << "ran " << qlower::to_string(g.representation()) << " graph, "
              << res.trace.total_integer_ops() << " integer ops, " << res.trace.total_real_ops()
              << " real ops\n";
    return 0;
}

int cmd_compare(const std::string& model, const std::string& ref, const std::vector<std::string>& data,
                const std::string& report) {
    qlower::Graph a = qlower::load_manifest(model);
    qlower::Graph b = qlower::load_manifest(ref);
    qlower::VerifyReport rep = qlower::compare_representations(a, b, load_batches(data));
    json checks = json::array();
    for (const auto& c : rep.checks) {
        json jc{{"node", c.node_id}, {"deviation", c.deviation}, {"ok", c.ok}};
        if (c.bound) {
            jc["bound"] = json{{"total", c.bound->total},
                               {"upstream", c.bound->upstream_term},
                               {"requant", c.bound->requant_term},
                               {"lattice", c.bound->lattice_term},
                               {"fp", c.bound->fp_term},
                               {"exact", c.bound->exact}};
        }
        checks.push_back(std::move(jc));
    }
    if (!report.empty())
        write_json(report, json{{"all_ok", rep.all_ok}, {"worst_margin", rep.worst_margin},
                                {"checks", checks}});
    for (const auto& c : rep.checks)
        if (!c.ok)
            std::cerr << "violation: " << c.node_id << " deviated " << c.deviation << " against bound "
                      << c.bound->total << "\n";
    std::cout << (rep.all_ok ? "comparison ok" : "comparison FAILED") << " over " << data.size()
              << " input(s)\n";
    return rep.all_ok ? 0 : 1;
}

int cmd_train(const std::string& model, const std::string& data, int epochs, double lr,
              std::uint64_t seed, int bits_a, int bits_w, const std::string& out) {
    qlower::Graph g = qlower::load_manifest(model);
    qlower::Tensor xs = qlower::read_tensor_blob(data + ".x.bin");
    qlower::Tensor ys = qlower::read_tensor_blob(data + ".y.bin");
    if (xs.shape().size() != 2 || ys.shape().size() != 1 || xs.shape()[0] != ys.shape()[0])
        throw qlower::ShapeMismatchError("training data must be x:[n,features], y:[n]");
    std::vector<qlower::Tensor> inputs;
    std::vector<int> labels;
    std::int64_t n = xs.shape()[0], f = xs.shape()[1];
    for (std::int64_t i = 0; i < n; ++i) {
        qlower::Tensor x = qlower::Tensor::real({f});
        for (std::int64_t j = 0; j < f; ++j)
            x.reals()[static_cast<std::size_t>(j)] = xs.reals()[static_cast<std::size_t>(i * f + j)];
        inputs.push_back(std::move(x));
        labels.push_back(static_cast<int>(ys.ints()[static_cast<std::size_t>(i)]));
    }

    qlower::PassNotes notes;
    g = qlower::calibrate(std::move(g), inputs, &notes);
    print_notes(notes);
    g = qlower::to_fakequantized(std::move(g), bits_a, bits_w);
    qlower::TrainResult res = qlower::train_mlp(std::move(g), inputs, labels, {epochs, lr, seed});
    if (!out.empty()) qlower::save_manifest(res.graph, out);
    std::cout << "trained " << epochs << " epoch(s), accuracy " << res.accuracy * 100.0 << "%\n";
    return 0;
}

int cmd_genfixture(const std::string& model, std::uint64_t seed, const std::string& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out);
    fs::path dir(out);
    qlower::Rng rng(seed + 1);

    if (model == "lenet_tiny" || model == "random") {
        qlower::Graph g = model == "lenet_tiny" ? qlower::make_lenet_tiny(seed)
                                                : [&] {
                                                      qlower::Rng r(seed);
                                                      return qlower::make_random_graph(r);
                                                  }();
        qlower::save_manifest(g, (dir / "model.json").string());
        const auto& shape = g.node(g.input_id()).input().shape;
        for (int i = 0; i < 4; ++i)
            qlower::write_tensor_blob((dir / ("calib" + std::to_string(i) + ".bin")).string(),
                                      qlower::random_real_input(rng, shape));
        int bits = g.node(g.input_id()).input().bits;
        qlower::QuantSpec in_spec{1.0, 0.0, bits, 0, (std::int64_t(1) << bits) - 1};
        qlower::write_tensor_blob((dir / "input.q.bin").string(),
                                  qlower::random_integer_input(rng, shape, in_spec));
    } else if (model == "mlp2") {
        qlower::Graph g = qlower::make_mlp2(seed);
        qlower::save_manifest(g, (dir / "model.json").string());
        qlower::Dataset d = qlower::make_two_cluster_dataset(200, seed);
        qlower::Tensor xs = qlower::Tensor::real({static_cast<std::int64_t>(d.inputs.size()), 2});
        qlower::Tensor ys = qlower::Tensor::integer({static_cast<std::int64_t>(d.labels.size())});
        for (std::size_t i = 0; i < d.inputs.size(); ++i) {
            xs.reals()[2 * i] = d.inputs[i].reals()[0];
            xs.reals()[2 * i + 1] = d.inputs[i].reals()[1];
            ys.ints()[i] = d.labels[i];
        }
        qlower::write_tensor_blob((dir / "train.x.bin").string(), xs);
        qlower::write_tensor_blob((dir / "train.y.bin").string(), ys);
    } else {
        throw qlower::ParseError("unknown fixture: " + model + " (expected lenet_tiny, mlp2 or random)");
    }
    std::cout << "wrote fixture '" << model << "' to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantization lowering toolchain"};
    app.require_subcommand(1);

    std::string model, out, ref, report, strategy = "integer";
    std::vector<std::string> data;
    int bits_a = 8, bits_w = 8, bits_bn = 8, epochs = 200;
    double eps_in = 1.0 / 255.0, lr = 0.05;
    std::int64_t rqf_act = 16, rqf_add = 256;
    std::uint64_t seed = 0;

    auto* c_cal = app.add_subcommand("calibrate", "record activation and weight ranges from data");
    c_cal->add_option("--model", model)->required();
    c_cal->add_option("--data", data)->required();
    c_cal->add_option("--out", out)->required();

    auto* c_q = app.add_subcommand("quantize", "attach fake quantizers to a calibrated graph");
    c_q->add_option("--model", model)->required();
    c_q->add_option("--bits-a", bits_a);
    c_q->add_option("--bits-w", bits_w);
    c_q->add_option("--out", out)->required();

    auto* c_low = app.add_subcommand("lower", "produce the quantized deployable graph");
    c_low->add_option("--model", model)->required();
    c_low->add_option("--eps-in", eps_in);
    c_low->add_option("--bits-bn", bits_bn);
    c_low->add_option("--bn-strategy", strategy)->check(CLI::IsMember({"fold", "integer", "thresholds"}));
    c_low->add_option("--out", out)->required();

    auto* c_int = app.add_subcommand("integerize", "rewrite a deployable graph into pure integers");
    c_int->add_option("--model", model)->required();
    auto* eps_opt = c_int->add_option("--eps-in", eps_in);
    c_int->add_option("--rqf-act", rqf_act);
    c_int->add_option("--rqf-add", rqf_add);
    c_int->add_option("--out", out)->required();

    auto* c_run = app.add_subcommand("run", "execute a graph on one input blob");
    c_run->add_option("--model", model)->required();
    c_run->add_option("--data", data)->required()->expected(1);
    c_run->add_option("--out", out);
    c_run->add_option("--report", report);

    auto* c_cmp = app.add_subcommand("compare", "run two graphs and check per-node deviations");
    c_cmp->add_option("--model", model)->required();
    c_cmp->add_option("--ref", ref)->required();
    c_cmp->add_option("--data", data)->required();
    c_cmp->add_option("--report", report);

    auto* c_tr = app.add_subcommand("train", "quantization-aware training for fc chains");
    c_tr->add_option("--model", model)->required();
    c_tr->add_option("--data", data)->required()->expected(1);
    c_tr->add_option("--epochs", epochs);
    c_tr->add_option("--lr", lr);
    c_tr->add_option("--seed", seed);
    c_tr->add_option("--bits-a", bits_a);
    c_tr->add_option("--bits-w", bits_w);
    c_tr->add_option("--out", out);

    auto* c_fix = app.add_subcommand("genfixture", "write a reproducible demo model");
    c_fix->add_option("--model", model)->required()->check(CLI::IsMember({"lenet_tiny", "mlp2", "random"}));
    c_fix->add_option("--seed", seed);
    c_fix->add_option("--out", out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(c_cal)) return cmd_calibrate(model, data, out);
        if (app.got_subcommand(c_q)) return cmd_quantize(model, bits_a, bits_w, out);
        if (app.got_subcommand(c_low)) return cmd_lower(model, eps_in, bits_bn, strategy, out);
        if (app.got_subcommand(c_int))
            return cmd_integerize(model, eps_opt->count() ? std::optional<double>(eps_in) : std::nullopt,
                                  rqf_act, rqf_add, out);
        if (app.got_subcommand(c_run)) return cmd_run(model, data.at(0), out, report);
        if (app.got_subcommand(c_cmp)) return cmd_compare(model, ref, data, report);
        if (app.got_subcommand(c_tr))
            return cmd_train(model, data.at(0), epochs, lr, seed, bits_a, bits_w, out);
        if (app.got_subcommand(c_fix)) return cmd_genfixture(model, seed, out);
    } catch (const qlower::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
