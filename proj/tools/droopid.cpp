// droopid: command-line front end for the identification workbench.
//
// Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "droopid/pipeline.hpp"

namespace {

using namespace droopid;

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::string data_dir, model_dir, report_dir, out_dir;
};

void add_common(CLI::App& cmd, CommonFlags& f) {
    cmd.add_option("-c,--config", f.config_path, "TOML-style run configuration; flags override it")
        ->check(CLI::ExistingFile);
    cmd.add_option("--seed", f.seed, "Master seed (dataset, initialization and search streams derive from it)");
    cmd.add_option("--jobs", f.jobs, "Worker threads for independent trainings and rollouts (default 1)")
        ->check(CLI::PositiveNumber);
    cmd.add_option("--out", f.out_dir, "Run directory; sets data/, models/ and reports/ below it");
    cmd.add_option("--data-dir", f.data_dir, "Dataset directory");
    cmd.add_option("--model-dir", f.model_dir, "Checkpoint directory");
    cmd.add_option("--report-dir", f.report_dir, "Report directory");
}

RunConfig base_config(const std::string& preset) {
    if (preset.empty() || preset == "desk") return desk_preset();
    if (preset == "full") {
        RunConfig cfg = desk_preset();
        cfg.scenario.counts = {1, 1, 1, 1000};
        cfg.train.max_epochs = 10000;
        cfg.selection = {true, 150};
        return cfg;
    }
    throw ConfigError("unknown run preset '" + preset + "' (expected desk or full)");
}

RunConfig resolve(const CommonFlags& f, const std::string& preset = "desk") {
    RunConfig cfg = base_config(preset);
    if (!f.config_path.empty()) apply_config(ConfigFile::load(f.config_path), cfg);
    if (f.seed) cfg.seed = *f.seed;
    if (f.jobs) cfg.jobs = *f.jobs;
    if (!f.out_dir.empty()) {
        const std::filesystem::path out = f.out_dir;
        cfg.paths = {out / "data", out / "models", out / "reports"};
    }
    if (!f.data_dir.empty()) cfg.paths.dataset = f.data_dir;
    if (!f.model_dir.empty()) cfg.paths.checkpoints = f.model_dir;
    if (!f.report_dir.empty()) cfg.paths.reports = f.report_dir;
    return cfg;
}

int run(int argc, char** argv) {
    CLI::App app{"Identification workbench for droop-controlled power systems: data generation, neural ODE "
                 "training, sparse regression and closed-loop evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    // gen-data
    CommonFlags gen_flags;
    std::optional<int> eval_count;
    auto* gen = app.add_subcommand("gen-data", "Simulate the reference system and write a dataset directory");
    add_common(*gen, gen_flags);
    gen->add_option("--eval-count", eval_count, "Number of evaluation trajectories")->check(CLI::NonNegativeNumber);

    // train-node
    CommonFlags train_flags;
    std::string scheme_name;
    std::string node_preset = "best-known";
    std::optional<int> search_budget;
    std::optional<int> max_epochs, patience;
    std::optional<double> rtol, atol;
    auto* train_cmd = app.add_subcommand("train-node", "Train one neural ODE and write its checkpoint");
    add_common(*train_cmd, train_flags);
    train_cmd->add_option("--scheme", scheme_name, "Integration scheme used in training and rollout")
        ->required()
        ->check(CLI::IsMember({"euler", "rk4", "dopri5"}));
    auto* preset_opt = train_cmd->add_option("--preset", node_preset, "Fixed best-known hyperparameters")
                           ->check(CLI::IsMember({"best-known"}));
    auto* search_opt =
        train_cmd->add_option("--search", search_budget, "Random hyperparameter search with this many trials")
            ->check(CLI::PositiveNumber);
    preset_opt->excludes(search_opt);
    train_cmd->add_option("--max-epochs", max_epochs, "Epoch limit")->check(CLI::PositiveNumber);
    train_cmd->add_option("--patience", patience, "Early-stopping patience in epochs")->check(CLI::PositiveNumber);
    train_cmd->add_option("--rtol", rtol, "dopri5 relative tolerance")->check(CLI::PositiveNumber);
    train_cmd->add_option("--atol", atol, "dopri5 absolute tolerance")->check(CLI::PositiveNumber);

    // fit-sindy
    CommonFlags sindy_flags;
    std::optional<double> lambda, threshold;
    bool exact = false;
    auto* sindy_cmd = app.add_subcommand("fit-sindy", "Fit the sparse regression model on the training split");
    add_common(*sindy_cmd, sindy_flags);
    sindy_cmd->add_option("--lambda", lambda, "Ridge weight")->check(CLI::NonNegativeNumber);
    sindy_cmd->add_option("--threshold", threshold, "Sparsity cutoff")->check(CLI::NonNegativeNumber);
    sindy_cmd->add_flag("--exact-derivatives", exact,
                        "Use the reference vector field for derivatives instead of finite differences");

    // evaluate
    CommonFlags eval_flags;
    bool all_predictions = false;
    auto* eval_cmd = app.add_subcommand("evaluate", "Roll out every model on the eval split and write RMSE reports");
    add_common(*eval_cmd, eval_flags);
    eval_cmd->add_flag("--all-predictions", all_predictions,
                       "Write predicted trajectories for every eval trajectory, not only the median one");

    // reproduce
    CommonFlags repro_flags;
    std::string run_preset = "desk";
    auto* repro = app.add_subcommand("reproduce", "Run gen-data, train-node (all schemes), fit-sindy and evaluate");
    add_common(*repro, repro_flags);
    repro->add_option("--preset", run_preset, "Run scale")->check(CLI::IsMember({"desk", "full"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorKind::config);
    }

    if (gen->parsed()) {
        RunConfig cfg = resolve(gen_flags);
        if (eval_count) cfg.scenario.counts.eval = *eval_count;
        const auto data = run_gen_data(cfg);
        std::cout << "wrote " << data.trajectories.size() << " trajectories to " << cfg.paths.dataset.string() << '\n';
    } else if (train_cmd->parsed()) {
        RunConfig cfg = resolve(train_flags);
        if (search_budget) cfg.selection = {true, *search_budget};
        if (preset_opt->count() > 0) cfg.selection.search = false;
        if (max_epochs) cfg.train.max_epochs = *max_epochs;
        if (patience) cfg.train.patience = *patience;
        if (rtol) cfg.node_solver.rtol = *rtol;
        if (atol) cfg.node_solver.atol = *atol;
        const auto data = load_run_dataset(cfg);
        const auto r = run_train_node(cfg, parse_scheme(scheme_name), data);
        std::cout << model_name(r.scheme) << ": " << r.report.train_loss.size() << " epochs ("
                  << to_string(r.report.status) << "), best epoch " << r.report.best_epoch << ", val "
                  << r.report.best_val_loss << ", test MSE " << r.report.test_mse << '\n';
        if (!r.report.failure.empty()) std::cerr << "warning: " << r.report.failure << '\n';
    } else if (sindy_cmd->parsed()) {
        RunConfig cfg = resolve(sindy_flags);
        if (lambda) cfg.sindy.lambda = *lambda;
        if (threshold) cfg.sindy.threshold = *threshold;
        if (exact) cfg.sindy.exact_derivatives = true;
        const auto data = load_run_dataset(cfg);
        const auto model = run_fit_sindy(cfg, data);
        std::cout << "sindy: " << (model.theta.array() != 0.0).count() << " nonzero coefficients, written to "
                  << sindy_model_path(cfg).string() << '\n';
    } else if (eval_cmd->parsed()) {
        const RunConfig cfg = resolve(eval_flags);
        const auto data = load_run_dataset(cfg);
        const auto result = run_evaluate(cfg, data, {all_predictions});
        for (const auto& s : result.stats) {
            std::cout << s.model << ' ' << to_string(s.group) << " median RMSE " << s.stats.median << '\n';
        }
    } else if (repro->parsed()) {
        const RunConfig cfg = resolve(repro_flags, run_preset);
        const auto result = run_reproduce(cfg);
        for (const auto& s : result.evaluation.stats) {
            std::cout << s.model << ' ' << to_string(s.group) << " median RMSE " << s.stats.median << '\n';
        }
        std::cout << "reports in " << cfg.paths.reports.string() << '\n';
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
    // training allocates many short-lived batch matrices; keep them off mmap
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    try {
        return run(argc, argv);
    } catch (const droopid::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(droopid::ErrorKind::config);
    }
}
