#pragma once

// End-to-end workbench stages behind the command-line tool. Every stage reads
// and writes plain files, so stages can be run separately or chained.
//
//   <dataset>/      manifest.json, traj_NNNN.csv
//   <checkpoints>/  node_<scheme>.json, node_<scheme>_loss.csv, [node_<scheme>_search.csv],
//                   sindy.csv, manifest.json
//   <reports>/      rmse_long.csv, boxplot_stats.csv, rmse_<group>.csv, training_summary.csv,
//                   predictions/<model>_traj_NNNN.csv, manifest.json

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "droopid/config.hpp"
#include "droopid/datagen.hpp"
#include "droopid/dataset_io.hpp"
#include "droopid/errors.hpp"
#include "droopid/evalbench.hpp"
#include "droopid/grid_model.hpp"
#include "droopid/neural_field.hpp"
#include "droopid/node_ident.hpp"
#include "droopid/ode_solve.hpp"
#include "droopid/sindy.hpp"

namespace droopid {

inline constexpr const char* kToolVersion = "1.0.0";

struct RunPaths {
    std::filesystem::path dataset = "run/data";
    std::filesystem::path checkpoints = "run/models";
    std::filesystem::path reports = "run/reports";
};

struct SindyParams {
    double lambda = 1e-6;
    double threshold = 1e-3;
    bool exact_derivatives = false;
    int max_iterations = 10000;
};

/// How NODE hyperparameters are chosen: the fixed best-known preset per
/// scheme, or a seeded random search with the given trial budget.
struct NodeSelection {
    bool search = false;
    int budget = 10;
};

struct RunConfig {
    RunPaths paths;
    ScenarioSpec scenario;
    SolverConfig data_solver{Scheme::rk4, 0.01, 1e-6, 1e-8, 100000};
    SolverConfig node_solver{Scheme::euler, 0.01, 1e-6, 1e-8, 100000};  // scheme set per model
    TrainConfig train;
    NodeSelection selection;
    SindyParams sindy;
    std::uint64_t seed = 1;
    NetworkModel network = reference_network();
    nlohmann::json network_source = "reference";
    int jobs = 1;

    void validate() const {
        scenario.validate();
        data_solver.validate();
        node_solver.validate();
        TrainConfig t = train;
        t.solver = node_solver;
        t.validate();
        if (selection.search && selection.budget < 1) throw ConfigError("search budget must be at least 1");
        if (!(sindy.lambda >= 0.0) || !(sindy.threshold >= 0.0) || sindy.max_iterations < 1) {
            throw ConfigError("sindy: lambda and threshold must be non-negative, max_iterations >= 1");
        }
        if (jobs < 1) throw ConfigError("jobs must be at least 1");
    }
};

/// Desk-scale protocol: one trajectory each for train/val/test, ten for
/// evaluation, best-known NODE hyperparameters, at most 2000 epochs.
[[nodiscard]] inline RunConfig desk_preset() {
    RunConfig cfg;
    cfg.scenario.counts = {1, 1, 1, 10};
    cfg.train.max_epochs = 2000;
    cfg.train.patience = 100;
    cfg.selection.search = false;
    return cfg;
}

[[nodiscard]] inline std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) noexcept {
    return mix_seed(mix_seed(master) ^ fnv1a(purpose));
}

namespace detail {

inline void check_keys(const ConfigSection& s, std::initializer_list<std::string_view> allowed) {
    for (const auto& [key, value] : s.values()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError("line " + std::to_string(value.line) + ": unknown key '" + key + "' in [" + s.name() +
                              "]");
        }
    }
}

inline void read_solver(const ConfigSection& s, SolverConfig& cfg) {
    check_keys(s, {"scheme", "fixed_step", "rtol", "atol", "max_steps"});
    if (s.has("scheme")) cfg.scheme = parse_scheme(s.get_string("scheme", ""));
    cfg.fixed_step = s.get_double("fixed_step", cfg.fixed_step);
    cfg.rtol = s.get_double("rtol", cfg.rtol);
    cfg.atol = s.get_double("atol", cfg.atol);
    cfg.max_steps = static_cast<int>(s.get_int("max_steps", cfg.max_steps));
}

}  // namespace detail

/// Applies a parsed config file on top of `cfg`. Recognized sections:
/// [run] [paths] [scenario] [datagen.solver] [solver] [train] [sindy], plus the
/// network sections [network] [line.ij] [unit.i] [load.i].
inline void apply_config(const ConfigFile& file, RunConfig& cfg) {
    static const std::set<std::string> known{"run", "paths", "scenario", "datagen.solver", "solver", "train", "sindy",
                                             "network"};
    for (const auto& name : file.section_names()) {
        if (known.count(name) || name.rfind("line.", 0) == 0 || name.rfind("unit.", 0) == 0 ||
            name.rfind("load.", 0) == 0) {
            continue;
        }
        throw ConfigError("line " + std::to_string(file.section(name).line()) + ": unknown section [" + name + "]");
    }
    if (file.has("run")) {
        const auto& s = file.section("run");
        detail::check_keys(s, {"seed", "jobs"});
        if (s.has("seed")) {
            const auto seed = s.get_int("seed");
            if (seed < 0) throw ConfigError("line " + std::to_string(s.require("seed").line) + ": seed must be >= 0");
            cfg.seed = static_cast<std::uint64_t>(seed);
        }
        cfg.jobs = static_cast<int>(s.get_int("jobs", cfg.jobs));
    }
    if (file.has("paths")) {
        const auto& s = file.section("paths");
        detail::check_keys(s, {"dataset", "checkpoints", "reports"});
        cfg.paths.dataset = s.get_string("dataset", cfg.paths.dataset.string());
        cfg.paths.checkpoints = s.get_string("checkpoints", cfg.paths.checkpoints.string());
        cfg.paths.reports = s.get_string("reports", cfg.paths.reports.string());
    }
    if (file.has("scenario")) {
        const auto& s = file.section("scenario");
        detail::check_keys(s, {"horizon", "sample_dt", "step_count", "vd_min", "vd_max", "freq_min", "freq_max",
                               "train", "val", "test", "eval"});
        auto& sc = cfg.scenario;
        sc.horizon = s.get_double("horizon", sc.horizon);
        sc.sample_dt = s.get_double("sample_dt", sc.sample_dt);
        sc.step_count = static_cast<int>(s.get_int("step_count", sc.step_count));
        sc.vd_min = s.get_double("vd_min", sc.vd_min);
        sc.vd_max = s.get_double("vd_max", sc.vd_max);
        constexpr double two_pi = 2.0 * std::numbers::pi;
        if (s.has("freq_min")) sc.wd_min = two_pi * s.get_double("freq_min");
        if (s.has("freq_max")) sc.wd_max = two_pi * s.get_double("freq_max");
        sc.counts.train = static_cast<int>(s.get_int("train", sc.counts.train));
        sc.counts.val = static_cast<int>(s.get_int("val", sc.counts.val));
        sc.counts.test = static_cast<int>(s.get_int("test", sc.counts.test));
        sc.counts.eval = static_cast<int>(s.get_int("eval", sc.counts.eval));
    }
    if (file.has("datagen.solver")) detail::read_solver(file.section("datagen.solver"), cfg.data_solver);
    if (file.has("solver")) detail::read_solver(file.section("solver"), cfg.node_solver);
    if (file.has("train")) {
        const auto& s = file.section("train");
        detail::check_keys(s, {"max_epochs", "patience", "search_budget"});
        cfg.train.max_epochs = static_cast<int>(s.get_int("max_epochs", cfg.train.max_epochs));
        cfg.train.patience = static_cast<int>(s.get_int("patience", cfg.train.patience));
        if (s.has("search_budget")) {
            cfg.selection.search = true;
            cfg.selection.budget = static_cast<int>(s.get_int("search_budget"));
        }
    }
    if (file.has("sindy")) {
        const auto& s = file.section("sindy");
        detail::check_keys(s, {"lambda", "threshold", "exact_derivatives", "max_iterations"});
        cfg.sindy.lambda = s.get_double("lambda", cfg.sindy.lambda);
        cfg.sindy.threshold = s.get_double("threshold", cfg.sindy.threshold);
        cfg.sindy.exact_derivatives = s.get_bool("exact_derivatives", cfg.sindy.exact_derivatives);
        cfg.sindy.max_iterations = static_cast<int>(s.get_int("max_iterations", cfg.sindy.max_iterations));
    }
    if (file.has("network")) {
        cfg.network = network_from_config(file);
        cfg.network_source = "config";
    }
}

[[nodiscard]] inline nlohmann::json network_json(const NetworkModel& net) {
    nlohmann::json j;
    j["nodes"] = net.node_count();
    auto& lines = j["lines"] = nlohmann::json::array();
    for (const auto& l : net.lines()) {
        lines.push_back({{"from", l.from + 1},
                         {"to", l.to + 1},
                         {"g", l.params.g},
                         {"b", l.params.b},
                         {"g_shunt", l.params.g_shunt},
                         {"b_shunt", l.params.b_shunt}});
    }
    auto& units = j["units"] = nlohmann::json::array();
    for (std::size_t i = 0; i < net.units().size(); ++i) {
        const auto& u = net.units()[i];
        const auto& ld = net.loads()[i];
        units.push_back({{"k_p", u.k_p},
                         {"k_q", u.k_q},
                         {"tau_p", u.tau_p},
                         {"tau_q", u.tau_q},
                         {"p_d", u.p_d},
                         {"q_d", u.q_d},
                         {"g_load", ld.g_load},
                         {"b_load", ld.b_load}});
    }
    return j;
}

/// Canonical description of everything that influences results; paths and the
/// degree of parallelism are excluded.
[[nodiscard]] inline nlohmann::json run_config_json(const RunConfig& cfg) {
    return {{"seed", cfg.seed},
            {"scenario", to_json(cfg.scenario)},
            {"datagen_solver", to_json(cfg.data_solver)},
            {"node_solver", to_json(cfg.node_solver)},
            {"train",
             {{"max_epochs", cfg.train.max_epochs},
              {"patience", cfg.train.patience},
              {"learning_rate", cfg.train.learning_rate},
              {"selection", cfg.selection.search ? "search" : "preset"},
              {"search_budget", cfg.selection.budget}}},
            {"sindy",
             {{"lambda", cfg.sindy.lambda},
              {"threshold", cfg.sindy.threshold},
              {"exact_derivatives", cfg.sindy.exact_derivatives},
              {"max_iterations", cfg.sindy.max_iterations}}},
            {"network", network_json(cfg.network)}};
}

[[nodiscard]] inline std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a(run_config_json(cfg).dump())); }

/// Manifest written into every output directory; enough to regenerate it.
[[nodiscard]] inline nlohmann::json run_manifest(const RunConfig& cfg, std::string_view stage) {
    return {{"tool", "droopid"},
            {"version", kToolVersion},
            {"stage", std::string(stage)},
            {"seed", cfg.seed},
            {"config_hash", config_hash(cfg)},
            {"config", run_config_json(cfg)}};
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

/// Merges `entry` under key `stage` of <dir>/manifest.json, keeping other stages.
inline void update_manifest(const std::filesystem::path& dir, const std::string& stage, nlohmann::json entry) {
    const auto path = dir / "manifest.json";
    nlohmann::json manifest = nlohmann::json::object();
    if (std::ifstream in(path); in) {
        try {
            manifest = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error&) {
            manifest = nlohmann::json::object();
        }
    }
    manifest[stage] = std::move(entry);
    write_text(path, manifest.dump(2) + "\n");
}

/// Runs task(i) for i in [0, count) on up to `jobs` threads. The first
/// exception, by index, is rethrown after all tasks finish.
inline void parallel_for(int count, int jobs, const std::function<void(int)>& task) {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
    if (jobs <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) {
            try {
                task(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < std::min(jobs, count); ++w) {
            pool.emplace_back([&] {
                for (int i = next++; i < count; i = next++) {
                    try {
                        task(i);
                    } catch (...) {
                        errors[static_cast<std::size_t>(i)] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data

inline Dataset run_gen_data(const RunConfig& cfg) {
    cfg.validate();
    RunConfig run = cfg;
    run.scenario.seed = cfg.seed;
    Dataset data = generate_dataset(run.scenario, run.network, run.data_solver);
    save_dataset(run.paths.dataset, data);
    // the dataset manifest is rewritten with the run block appended
    const auto path = run.paths.dataset / "manifest.json";
    std::ifstream in(path);
    auto manifest = nlohmann::json::parse(in);
    manifest["run"] = run_manifest(run, "gen-data");
    manifest["run"]["datagen_solver"] = to_json(run.data_solver);
    detail::write_text(path, manifest.dump(2) + "\n");
    return data;
}

[[nodiscard]] inline Dataset load_run_dataset(const RunConfig& cfg) {
    Dataset data = load_dataset(cfg.paths.dataset);
    if (data.trajectories.empty()) throw DataError("dataset " + cfg.paths.dataset.string() + " is empty");
    const int n = static_cast<int>(data.trajectories.front().inputs.cols()) / 2;
    if (n != cfg.network.node_count()) {
        throw DataError("dataset has " + std::to_string(n) + " nodes, network has " +
                        std::to_string(cfg.network.node_count()));
    }
    return data;
}

// ---------------------------------------------------------------------------
// train-node

[[nodiscard]] inline std::filesystem::path node_checkpoint_path(const RunConfig& cfg, Scheme scheme) {
    return cfg.paths.checkpoints / ("node_" + std::string(to_string(scheme)) + ".json");
}

[[nodiscard]] inline std::string loss_curve_csv(const TrainReport& report) {
    std::string out = "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
        out += std::to_string(e + 1) + "," + format_double(report.train_loss[e]) + "," +
               format_double(report.val_loss[e]) + "\n";
    }
    return out;
}

[[nodiscard]] inline nlohmann::json training_json(const TrainReport& r, double learning_rate, std::uint64_t seed) {
    return {{"epochs", r.train_loss.size()},
            {"best_epoch", r.best_epoch},
            {"best_val_loss", r.best_val_loss},
            {"test_mse", std::isfinite(r.test_mse) ? nlohmann::json(r.test_mse) : nlohmann::json(nullptr)},
            {"status", std::string(to_string(r.status))},
            {"failure", r.failure},
            {"learning_rate", learning_rate},
            {"init_seed", seed},
            // wall time lives only in JSON so the CSV reports stay byte-reproducible
            {"wall_seconds", r.epoch_seconds.empty() ? 0.0 : r.epoch_seconds.back()}};
}

struct NodeRunResult {
    Scheme scheme = Scheme::euler;
    TrainReport report;
    double learning_rate = 0.0;
};

/// Trains one NODE for `scheme` and writes its checkpoint and loss curve.
inline NodeRunResult run_train_node(const RunConfig& cfg, Scheme scheme, const Dataset& data) {
    cfg.validate();
    const auto splits = DataSplits::from(data);
    if (splits.train.empty() || splits.val.empty()) throw DataError("dataset needs train and val trajectories");
    TrainConfig tc = cfg.train;
    tc.solver = cfg.node_solver;
    tc.solver.scheme = scheme;
    const std::string tag = "node_" + std::string(to_string(scheme));
    NodeRunResult result;
    result.scheme = scheme;
    std::optional<MlpModel> model;
    if (cfg.selection.search) {
        tc.seed = derive_seed(cfg.seed, tag + "-search");
        auto search = random_search(SearchSpace{}, splits, cfg.selection.budget, tc.seed, tc);
        std::string table = "rank,trial,hidden_layers,width,activation,learning_rate,epochs,best_epoch,best_val_loss,"
                            "test_mse,status\n";
        for (std::size_t r = 0; r < search.trials.size(); ++r) {
            const auto& t = search.trials[r];
            table += std::to_string(r + 1) + "," + std::to_string(t.index) + "," +
                     std::to_string(t.params.shape.hidden_layers) + "," + std::to_string(t.params.shape.width) + "," +
                     std::string(to_string(t.params.shape.activation)) + "," + format_double(t.params.learning_rate) +
                     "," + std::to_string(t.report.train_loss.size()) + "," + std::to_string(t.report.best_epoch) +
                     "," + detail::csv_value(t.report.best_val_loss) + "," + detail::csv_value(t.report.test_mse) +
                     "," + (t.failed ? "failed" : std::string(to_string(t.report.status))) + "\n";
        }
        detail::write_text(cfg.paths.checkpoints / (tag + "_search.csv"), table);
        if (!search.best_model) throw NumericalError("every search trial failed for scheme " + std::string(to_string(scheme)));
        const auto& best = search.trials.front();
        model = std::move(*search.best_model);
        result.report = best.report;
        result.learning_rate = best.params.learning_rate;
    } else {
        const auto& preset = best_known_preset(scheme);
        tc.learning_rate = preset.learning_rate;
        tc.seed = derive_seed(cfg.seed, tag);
        const auto norm = Normalization::from_trajectories(splits.train);
        auto init = init_model(static_cast<int>(data.trajectories.front().states.cols()),
                               static_cast<int>(data.trajectories.front().inputs.cols()), preset.shape.hidden_layers,
                               preset.shape.width, preset.shape.activation, tc.seed, norm);
        auto trained = train(std::move(init), splits, tc);
        model = std::move(trained.model);
        result.report = std::move(trained.report);
        result.learning_rate = preset.learning_rate;
    }
    if (result.report.status == TrainStatus::diverged && result.report.best_epoch == 0) {
        throw NumericalError(tag + " training diverged: " + result.report.failure);
    }
    auto ckpt = checkpoint_json(*model, tc.solver);
    ckpt["training"] = training_json(result.report, result.learning_rate, tc.seed);
    detail::write_text(node_checkpoint_path(cfg, scheme), ckpt.dump(1) + "\n");
    detail::write_text(cfg.paths.checkpoints / (tag + "_loss.csv"), loss_curve_csv(result.report));
    auto entry = run_manifest(cfg, "train-node");
    entry["selection"] = cfg.selection.search ? "search" : "preset";
    detail::update_manifest(cfg.paths.checkpoints, tag, std::move(entry));
    return result;
}

// ---------------------------------------------------------------------------
// fit-sindy

[[nodiscard]] inline std::filesystem::path sindy_model_path(const RunConfig& cfg) {
    return cfg.paths.checkpoints / "sindy.csv";
}

inline SindyModel run_fit_sindy(const RunConfig& cfg, const Dataset& data) {
    cfg.validate();
    const auto train = data.split(Split::train);
    if (train.empty()) throw DataError("dataset has no training trajectory");
    SindyFitOptions opts;
    opts.stlsq = {cfg.sindy.lambda, cfg.sindy.threshold, cfg.sindy.max_iterations};
    opts.exact_derivatives = cfg.sindy.exact_derivatives;
    opts.step_period = data.spec.step_period();
    SindyModel model = fit_sindy(train, opts, &cfg.network);
    std::ostringstream out;
    save_sindy_csv(out, model);
    detail::write_text(sindy_model_path(cfg), out.str());
    detail::update_manifest(cfg.paths.checkpoints, "sindy", run_manifest(cfg, "fit-sindy"));
    return model;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOptions {
    bool all_predictions = false;  // write every rollout, not only the selected trajectory
};

/// Eval trajectory whose total euler-NODE RMSE is the lower median; falls back
/// to the first model with results.
[[nodiscard]] inline std::optional<int> select_median_trajectory(const EvalResult& r, const std::string& model) {
    std::map<int, double> total;
    std::set<int> failed;
    for (const auto& row : r.rows) {
        if (row.model != model) continue;
        if (!std::isfinite(row.rmse)) {
            failed.insert(row.trajectory);
            continue;
        }
        total[row.trajectory] += row.rmse * row.rmse;
    }
    std::vector<std::pair<double, int>> ranked;
    for (const auto& [traj, sq] : total) {
        if (!failed.count(traj)) ranked.emplace_back(std::sqrt(sq), traj);
    }
    if (ranked.empty()) return std::nullopt;
    std::sort(ranked.begin(), ranked.end());
    return ranked[(ranked.size() - 1) / 2].second;
}

inline std::string model_name(Scheme scheme) { return "node-" + std::string(to_string(scheme)); }

inline EvalResult run_evaluate(const RunConfig& cfg, const Dataset& data, const EvaluateOptions& opts = {}) {
    cfg.validate();
    const auto eval = data.split(Split::eval);
    if (eval.empty()) throw DataError("dataset has no eval trajectories");
    const int n = cfg.network.node_count();

    // load everything first so a missing model fails before any rollout
    std::ifstream sindy_in(sindy_model_path(cfg));
    if (!sindy_in) throw DataError("missing checkpoint " + sindy_model_path(cfg).string() + " (run fit-sindy first)");
    const SindyModel sindy = load_sindy_csv(sindy_in, n);
    std::vector<std::pair<Scheme, Checkpoint>> nodes;
    std::vector<nlohmann::json> training;
    for (auto scheme : {Scheme::euler, Scheme::rk4, Scheme::dopri5}) {
        const auto path = node_checkpoint_path(cfg, scheme);
        if (!std::filesystem::exists(path)) {
            throw DataError("missing checkpoint " + path.string() + " (run train-node --scheme " +
                            std::string(to_string(scheme)) + " first)");
        }
        std::ifstream in(path);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path.string() + ": " + e.what());
        }
        nodes.emplace_back(scheme, checkpoint_from_json(j));
        training.push_back(j.value("training", nlohmann::json::object()));
    }

    std::vector<NamedSimulator> models;
    models.push_back({"sindy", [&](const Trajectory& t) {
                          return simulate_sindy(sindy, t.states.row(0).transpose(), t.times, t.inputs,
                                                cfg.data_solver);
                      }});
    for (const auto& [scheme, ckpt] : nodes) {
        models.push_back({model_name(scheme), [&ckpt = ckpt](const Trajectory& t) {
                              return simulate_node(ckpt.model, t.states.row(0).transpose(), t.times, t.inputs,
                                                   ckpt.solver);
                          }});
    }

    // rollouts are independent; run them on the worker pool and aggregate in order
    const int pairs = static_cast<int>(models.size() * eval.size());
    std::vector<std::optional<Eigen::MatrixXd>> rollouts(static_cast<std::size_t>(pairs));
    std::vector<std::string> rollout_errors(static_cast<std::size_t>(pairs));
    detail::parallel_for(pairs, cfg.jobs, [&](int i) {
        const auto m = static_cast<std::size_t>(i) / eval.size();
        const auto t = static_cast<std::size_t>(i) % eval.size();
        try {
            rollouts[static_cast<std::size_t>(i)] = models[m].simulate(*eval[t]);
        } catch (const std::exception& e) {
            rollout_errors[static_cast<std::size_t>(i)] = e.what();
        }
    });
    std::vector<NamedSimulator> cached;
    for (std::size_t m = 0; m < models.size(); ++m) {
        cached.push_back({models[m].name, [&, m](const Trajectory& t) -> Eigen::MatrixXd {
                              const auto pos = static_cast<std::size_t>(
                                  std::find(eval.begin(), eval.end(), &t) - eval.begin());
                              const auto i = m * eval.size() + pos;
                              if (!rollouts[i]) throw NumericalError(rollout_errors[i]);
                              return *rollouts[i];
                          }});
    }
    EvalResult result = compare(cached, eval, true);
    for (const auto& e : result.errors) std::clog << "warning: rollout failed: " << e << '\n';

    write_eval_reports(cfg.paths.reports, result);

    std::string summary =
        "model,scheme,hidden_layers,width,activation,learning_rate,epochs,best_epoch,best_val_loss,test_mse,status\n";
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        const auto& [scheme, ckpt] = nodes[k];
        const auto& tj = training[k];
        auto num = [&](const char* key) {
            return tj.contains(key) && tj[key].is_number() ? format_double(tj[key].get<double>()) : std::string();
        };
        auto integer = [&](const char* key) {
            return tj.contains(key) && tj[key].is_number() ? std::to_string(tj[key].get<long>()) : std::string();
        };
        summary += model_name(scheme) + "," + std::string(to_string(scheme)) + "," +
                   std::to_string(ckpt.model.hidden_layers()) + "," + std::to_string(ckpt.model.width()) + "," +
                   std::string(to_string(ckpt.model.activation())) + "," + num("learning_rate") + "," +
                   integer("epochs") + "," + integer("best_epoch") + "," + num("best_val_loss") + "," +
                   num("test_mse") + "," + tj.value("status", std::string()) + "\n";
    }
    detail::write_text(cfg.paths.reports / "training_summary.csv", summary);

    const auto pred_dir = cfg.paths.reports / "predictions";
    std::filesystem::remove_all(pred_dir);
    const auto selected = select_median_trajectory(result, model_name(Scheme::euler));
    for (const auto& [name, per_traj] : result.predictions) {
        for (const auto& [index, states] : per_traj) {
            if (!opts.all_predictions && (!selected || index != *selected)) continue;
            const auto* truth = *std::find_if(eval.begin(), eval.end(), [&](const Trajectory* t) { return t->index == index; });
            Trajectory predicted;
            predicted.times = truth->times;
            predicted.inputs = truth->inputs;
            predicted.states = states;
            std::ostringstream out;
            write_trajectory_csv(out, predicted);
            detail::write_text(pred_dir / (name + "_" + trajectory_file_name(index)), out.str());
        }
    }

    auto entry = run_manifest(cfg, "evaluate");
    entry["dataset_spec_hash"] = scenario_hash(data.spec);
    entry["models"] = result.models;
    entry["selected_trajectory"] = selected ? nlohmann::json(*selected) : nlohmann::json(nullptr);
    entry["rollout_failures"] = result.errors;
    detail::write_text(cfg.paths.reports / "manifest.json", entry.dump(2) + "\n");
    return result;
}

// ---------------------------------------------------------------------------
// reproduce

struct ReproduceResult {
    std::vector<NodeRunResult> nodes;
    EvalResult evaluation;
};

inline ReproduceResult run_reproduce(const RunConfig& cfg) {
    cfg.validate();
    const Dataset data = run_gen_data(cfg);
    ReproduceResult result;
    const std::vector<Scheme> schemes{Scheme::euler, Scheme::rk4, Scheme::dopri5};
    result.nodes.resize(schemes.size());
    std::mutex log_mutex;
    detail::parallel_for(static_cast<int>(schemes.size()), cfg.jobs, [&](int i) {
        auto r = run_train_node(cfg, schemes[static_cast<std::size_t>(i)], data);
        {
            std::lock_guard lock(log_mutex);
            std::clog << model_name(r.scheme) << ": " << r.report.train_loss.size() << " epochs, best epoch "
                      << r.report.best_epoch << ", test MSE " << r.report.test_mse << '\n';
        }
        result.nodes[static_cast<std::size_t>(i)] = std::move(r);
    });
    (void)run_fit_sindy(cfg, data);
    result.evaluation = run_evaluate(cfg, data);
    return result;
}

}  // namespace droopid
