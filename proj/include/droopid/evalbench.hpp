#pragma once

// Closed-loop evaluation: per-group simulation RMSE over the eval split and
// boxplot statistics of the resulting distributions.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "droopid/dataset_io.hpp"
#include "droopid/datagen.hpp"
#include "droopid/errors.hpp"

namespace droopid {

enum class StateGroup { angles, powers, voltages };

inline constexpr StateGroup kAllGroups[] = {StateGroup::angles, StateGroup::powers, StateGroup::voltages};

[[nodiscard]] inline std::string_view to_string(StateGroup g) {
    switch (g) {
        case StateGroup::angles: return "angles";
        case StateGroup::powers: return "powers";
        case StateGroup::voltages: return "voltages";
    }
    return "?";
}

/// Column range of a group in the state layout of an N-node system.
struct GroupRange {
    Eigen::Index start = 0;
    Eigen::Index size = 0;
};

[[nodiscard]] inline GroupRange group_range(StateGroup g, int node_count) {
    switch (g) {
        case StateGroup::angles: return {0, node_count - 1};
        case StateGroup::powers: return {node_count - 1, node_count};
        case StateGroup::voltages: return {2 * node_count - 1, node_count};
    }
    return {};
}

/// sqrt(1/K sum_{k=1..K} ||x_k - xhat_k||^2) over the selected columns; row 0 is
/// the shared initial condition and is not counted.
[[nodiscard]] inline double rmse(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& predicted, GroupRange cols) {
    if (truth.rows() != predicted.rows() || truth.cols() != predicted.cols()) {
        throw std::invalid_argument("rmse: trajectories are sampled on different grids");
    }
    if (truth.rows() < 2) {
        throw std::invalid_argument("rmse: need at least two samples");
    }
    const Eigen::Index k = truth.rows() - 1;
    const auto diff = truth.block(1, cols.start, k, cols.size) - predicted.block(1, cols.start, k, cols.size);
    return std::sqrt(diff.squaredNorm() / static_cast<double>(k));
}

[[nodiscard]] inline double rmse(const Eigen::MatrixXd& truth, const Eigen::MatrixXd& predicted, StateGroup group) {
    const int n = static_cast<int>(truth.cols() + 1) / 3;
    return rmse(truth, predicted, group_range(group, n));
}

struct BoxplotStats {
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    double whisker_lo = 0.0;
    double whisker_hi = 0.0;
    std::vector<double> outliers;  // ascending
};

/// Quantile by linear interpolation between order statistics (inclusive method,
/// position p * (n - 1)).
[[nodiscard]] inline double quantile_sorted(const std::vector<double>& sorted, double p) {
    const double pos = p * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Whiskers reach the furthest data points inside [q1 - 1.5 IQR, q3 + 1.5 IQR].
[[nodiscard]] inline BoxplotStats boxplot_stats(std::vector<double> values) {
    if (values.empty()) {
        throw std::invalid_argument("boxplot_stats: empty sample");
    }
    std::sort(values.begin(), values.end());
    BoxplotStats s;
    s.median = quantile_sorted(values, 0.5);
    s.q1 = quantile_sorted(values, 0.25);
    s.q3 = quantile_sorted(values, 0.75);
    const double iqr = s.q3 - s.q1;
    const double lo_fence = s.q1 - 1.5 * iqr;
    const double hi_fence = s.q3 + 1.5 * iqr;
    s.whisker_lo = s.q1;
    s.whisker_hi = s.q3;
    bool lo_set = false;
    for (double v : values) {
        if (v < lo_fence || v > hi_fence) {
            s.outliers.push_back(v);
            continue;
        }
        if (!lo_set) {
            s.whisker_lo = v;
            lo_set = true;
        }
        s.whisker_hi = v;
    }
    return s;
}

/// A model under evaluation: maps a recorded trajectory to predicted states,
/// started from the recorded x(t_0) with the recorded inputs.
struct NamedSimulator {
    std::string name;
    std::function<Eigen::MatrixXd(const Trajectory&)> simulate;
};

struct RmseRow {
    std::string model;
    int trajectory = 0;
    StateGroup group = StateGroup::angles;
    double rmse = std::numeric_limits<double>::quiet_NaN();  // NaN: rollout failed
};

struct GroupStats {
    std::string model;
    StateGroup group = StateGroup::angles;
    BoxplotStats stats;
    int failures = 0;
};

struct EvalResult {
    std::vector<std::string> models;
    std::vector<RmseRow> rows;
    std::vector<GroupStats> stats;
    std::vector<std::string> errors;
    std::map<std::string, std::map<int, Eigen::MatrixXd>> predictions;  // kept only on request

    [[nodiscard]] const GroupStats& stats_for(const std::string& model, StateGroup group) const {
        for (const auto& s : stats) {
            if (s.model == model && s.group == group) return s;
        }
        throw std::out_of_range("no statistics for model " + model);
    }
};

[[nodiscard]] inline EvalResult compare(const std::vector<NamedSimulator>& models,
                                        const std::vector<const Trajectory*>& trajectories,
                                        bool keep_predictions = false) {
    if (models.empty()) {
        throw std::invalid_argument("compare: need at least one model");
    }
    EvalResult result;
    for (const auto& m : models) {
        result.models.push_back(m.name);
        std::map<StateGroup, std::vector<double>> per_group;
        std::map<StateGroup, int> failures;
        for (const auto* traj : trajectories) {
            Eigen::MatrixXd predicted;
            bool ok = true;
            try {
                predicted = m.simulate(*traj);
                if (!predicted.allFinite()) {
                    throw NumericalError("prediction contains non-finite values");
                }
            } catch (const std::exception& e) {
                ok = false;
                result.errors.push_back(m.name + " on trajectory " + std::to_string(traj->index) + ": " + e.what());
            }
            for (auto g : kAllGroups) {
                RmseRow row{m.name, traj->index, g, std::numeric_limits<double>::quiet_NaN()};
                if (ok) {
                    row.rmse = rmse(traj->states, predicted, g);
                    per_group[g].push_back(row.rmse);
                } else {
                    ++failures[g];
                }
                result.rows.push_back(row);
            }
            if (ok && keep_predictions) {
                result.predictions[m.name][traj->index] = std::move(predicted);
            }
        }
        for (auto g : kAllGroups) {
            GroupStats gs{m.name, g, {}, failures[g]};
            if (!per_group[g].empty()) {
                gs.stats = boxplot_stats(per_group[g]);
            } else {
                const double nan = std::numeric_limits<double>::quiet_NaN();
                gs.stats = {nan, nan, nan, nan, nan, {}};
            }
            result.stats.push_back(std::move(gs));
        }
    }
    return result;
}

namespace detail {
inline std::string csv_value(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }
}  // namespace detail

/// rmse_long.csv: model,trajectory,group,rmse (empty rmse = failed rollout)
inline void write_rmse_long_csv(std::ostream& out, const EvalResult& r) {
    out << "model,trajectory,group,rmse\n";
    for (const auto& row : r.rows) {
        out << row.model << ',' << row.trajectory << ',' << to_string(row.group) << ','
            << detail::csv_value(row.rmse) << '\n';
    }
}

/// boxplot_stats.csv: model,group,median,q1,q3,lo,hi
inline void write_boxplot_stats_csv(std::ostream& out, const EvalResult& r) {
    out << "model,group,median,q1,q3,lo,hi\n";
    for (const auto& s : r.stats) {
        out << s.model << ',' << to_string(s.group) << ',' << detail::csv_value(s.stats.median) << ','
            << detail::csv_value(s.stats.q1) << ',' << detail::csv_value(s.stats.q3) << ','
            << detail::csv_value(s.stats.whisker_lo) << ',' << detail::csv_value(s.stats.whisker_hi) << '\n';
    }
}

/// Wide per-panel table: trajectory,<model 1>,<model 2>,...
inline void write_group_csv(std::ostream& out, const EvalResult& r, StateGroup group) {
    std::map<int, std::map<std::string, double>> table;
    for (const auto& row : r.rows) {
        if (row.group == group) table[row.trajectory][row.model] = row.rmse;
    }
    out << "trajectory";
    for (const auto& m : r.models) out << ',' << m;
    out << '\n';
    for (const auto& [traj, values] : table) {
        out << traj;
        for (const auto& m : r.models) {
            const auto it = values.find(m);
            out << ',' << (it == values.end() ? std::string() : detail::csv_value(it->second));
        }
        out << '\n';
    }
}

inline void write_eval_reports(const std::filesystem::path& dir, const EvalResult& r) {
    std::filesystem::create_directories(dir);
    auto open = [&](const std::string& name) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw DataError("cannot write " + (dir / name).string());
        return out;
    };
    {
        auto out = open("rmse_long.csv");
        write_rmse_long_csv(out, r);
    }
    {
        auto out = open("boxplot_stats.csv");
        write_boxplot_stats_csv(out, r);
    }
    for (auto g : kAllGroups) {
        auto out = open("rmse_" + std::string(to_string(g)) + ".csv");
        write_group_csv(out, r, g);
    }
}

}  // namespace droopid
