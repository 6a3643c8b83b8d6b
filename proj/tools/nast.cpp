// Command-line front end for the negation-aware selective training lab.
//
// Subcommands: gen-data, gen-benchmark, trace, train, eval, report.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error, 5 internal.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nast/pipeline.hpp"

namespace {

std::vector<uint64_t> pick_seeds(const nast::RunConfig& cfg, int64_t seed_override) {
    if (seed_override >= 0) return {static_cast<uint64_t>(seed_override)};
    return cfg.seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"negation-aware selective training laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    int64_t seed_override = -1;
    std::string arm_override;

    auto add_common = [&](CLI::App* cmd, bool with_arm) {
        cmd->add_option("--config", config_path, "run configuration JSON")->required();
        cmd->add_option("--seed", seed_override, "run a single seed instead of the config list");
        if (with_arm) cmd->add_option("--arm", arm_override, "nast, uniform, or both");
    };

    auto* gen_data = app.add_subcommand("gen-data", "generate the synthetic corpus");
    add_common(gen_data, false);
    auto* gen_benchmark =
        app.add_subcommand("gen-benchmark", "build the polarity-paired MCQ benchmark");
    add_common(gen_benchmark, false);
    auto* trace = app.add_subcommand("trace", "causal tracing and layer weights");
    add_common(trace, false);
    auto* train = app.add_subcommand("train", "fine-tune the experiment arms");
    add_common(train, true);
    auto* eval = app.add_subcommand("eval", "evaluate trained checkpoints");
    add_common(eval, true);
    auto* report = app.add_subcommand("report", "consolidate per-seed evaluations");
    add_common(report, false);

    CLI11_PARSE(app, argc, argv);

    try {
        nast::RunConfig cfg = nast::load_run_config(config_path);
        if (!arm_override.empty()) {
            if (arm_override != "nast" && arm_override != "uniform" && arm_override != "both")
                throw nast::ConfigError("--arm must be nast, uniform, or both");
            cfg.arm = arm_override;
        }
        auto seeds = pick_seeds(cfg, seed_override);

        if (gen_data->parsed()) nast::cmd_gen_data(cfg);
        if (gen_benchmark->parsed()) nast::cmd_gen_benchmark(cfg);
        if (trace->parsed()) nast::cmd_trace(cfg, seeds);
        if (train->parsed()) nast::cmd_train(cfg, seeds);
        if (eval->parsed()) nast::cmd_eval(cfg, seeds);
        if (report->parsed()) nast::cmd_report(cfg, seeds);
        return 0;
    } catch (const nast::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nast::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const nast::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    }
}
