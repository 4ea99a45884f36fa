// roal — command-line front end for the robust active-learning harness.
//
//   roal run      --config PATH [--out DIR] [--seed N] [--repetitions N] [--workers N] [--force]
//   roal ablate   --config PATH --sweep NAME --values LIST [--out DIR] [--force]
//   roal plot-data --run DIR
//
// Exit codes: 0 success, 1 config error, 2 runtime error, 3 I/O error.
// ROAL_OUTPUT_DIR overrides the config's output directory (--out wins over both).

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "roal/experiment.hpp"

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kRuntime = 2, kIo = 3 };

int report(const char* kind, const std::exception& e, int code) {
    std::cerr << "roal: " << kind << ": " << e.what() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    namespace ex = roal::experiment;

    CLI::App app{"Robust active learning under scheduled adversarial attacks"};
    app.set_version_flag("--version", std::string(roal::kVersion));
    app.require_subcommand(1);

    std::string config_path, out_dir, sweep, values, run_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> repetitions, workers;
    bool force = false;

    auto* run = app.add_subcommand("run", "Run a multi-seed experiment");
    run->add_option("--config", config_path, "Experiment config file")->required();
    run->add_option("--out", out_dir, "Output directory");
    run->add_option("--seed", seed, "Base seed (overrides [experiment] base_seed)");
    run->add_option("--repetitions", repetitions, "Number of repetitions")->check(CLI::PositiveNumber);
    run->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
    run->add_flag("--force", force, "Overwrite existing results");

    auto* ablate = app.add_subcommand("ablate", "Sweep one setting, all else fixed");
    ablate->add_option("--config", config_path, "Experiment config file")->required();
    ablate->add_option("--sweep", sweep, "lambda | acquisition | initial_labeled")->required();
    ablate->add_option("--values", values, "Comma-separated sweep values")->required();
    ablate->add_option("--out", out_dir, "Output directory");
    ablate->add_option("--seed", seed, "Base seed");
    ablate->add_flag("--force", force, "Overwrite existing results");

    auto* plot = app.add_subcommand("plot-data", "Write long-format plot CSVs for a finished run");
    plot->add_option("--run", run_dir, "Run directory holding aggregate.csv")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*plot) {
            for (const auto& f : ex::emit_plot_data(run_dir)) std::cout << f.string() << "\n";
            return kOk;
        }
        auto cfg = ex::load_config(config_path);
        if (seed) cfg.base_seed = *seed;
        if (repetitions) cfg.repetitions = *repetitions;
        ex::RunOptions opts;
        opts.output_dir = out_dir;
        opts.force = force;
        if (workers) opts.workers = *workers;

        if (*run) {
            const auto result = ex::run_experiment(cfg, opts);
            std::cout << "wrote " << result.runs.size() << " run(s) to " << result.directory.string() << "\n";
            for (const auto& it : result.summary.iterations) {
                std::printf("t=%zu %-6s labeled=%zu clean=%.4f robust=%.4f drop=%.4f\n", it.iteration, it.attack.c_str(),
                            it.labeled_count, it.clean_accuracy.mean, it.robust_accuracy.mean, it.forgetting_drop.mean);
            }
            return kOk;
        }
        const auto result = ex::run_ablation(cfg, ex::parse_sweep(sweep), ex::detail::split_list(values), opts);
        std::cout << "wrote " << result.table.string() << "\n";
        return kOk;
    } catch (const roal::ConfigError& e) {
        return report("config error", e, kConfig);
    } catch (const roal::IoError& e) {
        return report("I/O error", e, kIo);
    } catch (const roal::FormatError& e) {
        return report("I/O error", e, kIo);
    } catch (const std::exception& e) {
        return report("runtime error", e, kRuntime);
    }
}
