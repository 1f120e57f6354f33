// rwmeta command-line entry point.
//
//   rwmeta <train-maml|train-rwmaml|sweep|gradcheck|eval> [--config <path>]
//          [--key=value ...]
//
// Any config key can be overridden with --key=value. Exit codes: 0 success,
// 2 configuration error, 3 divergence.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rwmeta/harness.hpp"
#include "rwmeta/meta.hpp"

using namespace rwmeta;

namespace {

int usage() {
    std::cerr << "usage: rwmeta <subcommand> [--config <path>] [--key=value ...]\n"
                 "subcommands:\n"
                 "  train-maml    plain MAML baseline (run.baseline=skyline for the\n"
                 "                ground-truth-filtered skyline)\n"
                 "  train-rwmaml  reweighted training (task or instance scheme)\n"
                 "  sweep         one run per value of a config key\n"
                 "                (--axis=<key> --values=v1,v2,...)\n"
                 "  gradcheck     derivative verification report\n"
                 "  eval          post-adaptation test metric of stored parameters\n"
                 "                (--params=<path>)\n";
    return 2;
}

struct CliArgs {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::string axis;
    std::vector<double> values;
    std::string params_path;
};

bool parse_args(int argc, char** argv, CliArgs& args) {
    for (int i = 2; i < argc; ++i) {
        std::string arg = argv[i];
        if (arg == "--config") {
            if (++i >= argc) return false;
            args.config_path = argv[i];
            continue;
        }
        if (arg.rfind("--config=", 0) == 0) {
            args.config_path = arg.substr(9);
            continue;
        }
        if (arg.rfind("--", 0) != 0) return false;
        const auto eq = arg.find('=');
        if (eq == std::string::npos) return false;
        const std::string key = arg.substr(2, eq - 2);
        const std::string value = arg.substr(eq + 1);
        if (key == "axis") {
            args.axis = value;
        } else if (key == "values") {
            std::string item;
            std::stringstream ss(value);
            while (std::getline(ss, item, ',')) args.values.push_back(std::stod(item));
        } else if (key == "params") {
            args.params_path = value;
        } else {
            args.overrides.emplace_back(key, value);
        }
    }
    return true;
}

harness::ExperimentConfig build_config(const CliArgs& args) {
    harness::ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = harness::load_config_file(args.config_path);
    for (const auto& [k, v] : args.overrides) harness::apply_override(cfg, k, v);
    return cfg;
}

void print_run(const harness::RunOutput& out) {
    for (const auto& r : out.metrics)
        std::printf("iter %ld  train %.6g  val %.6g  test %.6g  |hg|^2 %.3g  wall %.1fs\n", r.iter,
                    r.train_meta_loss, r.val_meta_loss, r.test_metric, r.hypergrad_norm_sq,
                    r.wallclock_seconds);
    if (out.diverged)
        std::printf("DIVERGED at iteration %ld; partial results in %s\n", out.diverged_at,
                    out.dir.c_str());
    else
        std::printf("done: %s\n", out.dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) return usage();
    const std::string cmd = argv[1];
    CliArgs args;
    if (!parse_args(argc, argv, args)) return usage();

    try {
        if (cmd == "train-maml" || cmd == "train-rwmaml") {
            harness::ExperimentConfig cfg = build_config(args);
            bool baseline_overridden = false;
            for (const auto& [k, v] : args.overrides) baseline_overridden |= k == "run.baseline";
            if (cmd == "train-rwmaml")
                cfg.run.baseline = harness::Baseline::rwmaml;
            else if (!baseline_overridden)
                cfg.run.baseline = harness::Baseline::maml;
            const auto out = harness::run_experiment(cfg);
            print_run(out);
            return out.diverged ? 3 : 0;
        }
        if (cmd == "sweep") {
            if (args.axis.empty()) return usage();
            harness::ExperimentConfig cfg = build_config(args);
            const auto sweep = harness::run_sweep(cfg, args.axis, args.values);
            std::printf("%s,test_metric,wallclock_seconds\n", sweep.axis.c_str());
            for (const auto& row : sweep.rows)
                std::printf("%g,%.6g,%.1f%s\n", row.value, row.test_metric, row.train_seconds,
                            row.diverged ? ",DIVERGED" : "");
            std::printf("summary: %s\n", sweep.summary_path.c_str());
            return 0;
        }
        if (cmd == "gradcheck") {
            harness::ExperimentConfig cfg = build_config(args);
            const auto report = harness::gradcheck(cfg);
            std::fputs(report.to_string().c_str(), stdout);
            return report.all_pass() ? 0 : 1;
        }
        if (cmd == "eval") {
            if (args.params_path.empty()) return usage();
            harness::ExperimentConfig cfg = build_config(args);
            harness::validate(cfg);
            const auto params = harness::read_params(args.params_path);
            const auto model = harness::resolve_model(cfg);
            if (params.size() != static_cast<size_t>(models::param_count(model.spec)))
                throw ConfigError("eval: parameter file does not match model.widths");
            const auto pool = tasks::build_pool(harness::pool_spec(cfg));
            const double metric = meta::pool_test_metric(model, params, pool.test, cfg.adapt);
            std::printf("test_metric %.10g over %zu tasks\n", metric, pool.test.size());
            return 0;
        }
        return usage();
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
}
