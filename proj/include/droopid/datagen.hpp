#pragma once

// Randomized step-response datasets from the reference simulator.
//
// Each trajectory starts at the nominal-input equilibrium and receives
// `step_count` equidistant setpoint steps (the first at t = 0). At every step
// all vd_i and wd_i are redrawn independently from uniform distributions and
// then held until the next step.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "droopid/errors.hpp"
#include "droopid/grid_model.hpp"
#include "droopid/ode_solve.hpp"

namespace droopid {

enum class Split { train, val, test, eval };

[[nodiscard]] inline std::string_view to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::eval: return "eval";
    }
    return "?";
}

[[nodiscard]] inline Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    if (name == "eval") return Split::eval;
    throw DataError("unknown split '" + std::string(name) + "'");
}

struct SplitCounts {
    int train = 1;
    int val = 1;
    int test = 1;
    int eval = 10;

    [[nodiscard]] int total() const noexcept { return train + val + test + eval; }
};

struct ScenarioSpec {
    double horizon = 50.0;    // s
    double sample_dt = 0.01;  // s
    int step_count = 10;
    double vd_min = 0.99;
    double vd_max = 1.01;
    double wd_min = 2.0 * std::numbers::pi * 49.975;
    double wd_max = 2.0 * std::numbers::pi * 50.025;
    SplitCounts counts;
    std::uint64_t seed = 1;

    /// Number of sampling intervals K; the trajectory has K + 1 rows.
    [[nodiscard]] int interval_count() const { return static_cast<int>(std::lround(horizon / sample_dt)); }
    [[nodiscard]] double step_period() const { return horizon / step_count; }

    void validate() const {
        if (!(horizon > 0.0) || !(sample_dt > 0.0)) {
            throw ConfigError("scenario horizon and sample_dt must be positive");
        }
        const double k = horizon / sample_dt;
        if (std::abs(k - std::round(k)) > 1e-9 * k) {
            throw ConfigError("scenario horizon must be an integer multiple of sample_dt");
        }
        if (step_count < 1) {
            throw ConfigError("scenario step_count must be at least 1");
        }
        const double per_step = step_period() / sample_dt;
        if (std::abs(per_step - std::round(per_step)) > 1e-9 * per_step) {
            throw ConfigError("step period must be an integer multiple of sample_dt");
        }
        if (vd_min > vd_max || wd_min > wd_max) {
            throw ConfigError("scenario input ranges must be ordered (min <= max)");
        }
        if (!(vd_min > 0.0) || !(wd_min > 0.0)) {
            throw ConfigError("scenario input ranges must be positive");
        }
        if (counts.train < 1 || counts.val < 1 || counts.test < 1 || counts.eval < 0) {
            throw ConfigError("scenario needs at least one train, val and test trajectory");
        }
    }
};

struct Trajectory {
    Eigen::VectorXd times;   // K + 1
    Eigen::MatrixXd inputs;  // (K + 1) x N_u, row k applied on [t_k, t_{k+1})
    Eigen::MatrixXd states;  // (K + 1) x N_x
    std::uint64_t seed = 0;
    Split split = Split::train;
    int index = 0;

    [[nodiscard]] Eigen::Index samples() const noexcept { return times.size(); }
};

struct Dataset {
    ScenarioSpec spec;
    std::vector<Trajectory> trajectories;
    std::vector<std::string> log;  // regeneration notes

    [[nodiscard]] std::vector<const Trajectory*> split(Split which) const {
        std::vector<const Trajectory*> out;
        for (const auto& t : trajectories) {
            if (t.split == which) {
                out.push_back(&t);
            }
        }
        return out;
    }
};

/// SplitMix64 finalizer, used to derive independent per-trajectory streams.
[[nodiscard]] constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

[[nodiscard]] constexpr std::uint64_t trajectory_seed(std::uint64_t master, int index, int attempt) noexcept {
    return mix_seed(mix_seed(mix_seed(master) ^ static_cast<std::uint64_t>(index)) ^
                    (static_cast<std::uint64_t>(attempt) << 32));
}

/// Setpoint values per step: row s holds u on [s * period, (s + 1) * period).
struct InputSchedule {
    Eigen::VectorXd step_times;
    Eigen::MatrixXd values;  // step_count x N_u
};

template <class Rng>
[[nodiscard]] InputSchedule sample_input_schedule(const ScenarioSpec& spec, int node_count, Rng& rng) {
    InputSchedule schedule;
    schedule.step_times.resize(spec.step_count);
    schedule.values.resize(spec.step_count, 2 * node_count);
    std::uniform_real_distribution<double> vd(spec.vd_min, spec.vd_max);
    std::uniform_real_distribution<double> wd(spec.wd_min, spec.wd_max);
    for (int s = 0; s < spec.step_count; ++s) {
        schedule.step_times[s] = s * spec.step_period();
        // a zero-width range draws exactly its bound
        for (int i = 0; i < node_count; ++i) {
            const double draw = vd(rng);
            schedule.values(s, i) = spec.vd_min == spec.vd_max ? spec.vd_min : draw;
        }
        for (int i = 0; i < node_count; ++i) {
            const double draw = wd(rng);
            schedule.values(s, node_count + i) = spec.wd_min == spec.wd_max ? spec.wd_min : draw;
        }
    }
    return schedule;
}

[[nodiscard]] inline Eigen::VectorXd sample_times(const ScenarioSpec& spec) {
    const int k = spec.interval_count();
    Eigen::VectorXd t(k + 1);
    for (int i = 0; i <= k; ++i) {
        t[i] = i * spec.sample_dt;
    }
    return t;
}

/// Input row per sample time (zero-order hold of the schedule).
[[nodiscard]] inline Eigen::MatrixXd expand_schedule(const ScenarioSpec& spec, const InputSchedule& schedule) {
    const int k = spec.interval_count();
    const int per_step = static_cast<int>(std::lround(spec.step_period() / spec.sample_dt));
    Eigen::MatrixXd inputs(k + 1, schedule.values.cols());
    for (int i = 0; i <= k; ++i) {
        const int s = std::min(i / per_step, static_cast<int>(schedule.values.rows()) - 1);
        inputs.row(i) = schedule.values.row(s);
    }
    return inputs;
}

/// Simulates one trajectory of the reference system from x0 under the given inputs.
[[nodiscard]] inline Trajectory simulate_reference(const NetworkModel& net, const StateVec& x0,
                                                   const Eigen::VectorXd& times, const Eigen::MatrixXd& inputs,
                                                   const SolverConfig& cfg) {
    Trajectory traj;
    traj.times = times;
    traj.inputs = inputs;
    traj.states = simulate_piecewise(
        [&](double, const Eigen::VectorXd& x, const Eigen::VectorXd& u) { return rhs(x, u, net); }, x0, times, inputs,
        cfg);
    return traj;
}

[[nodiscard]] inline Split split_of(const SplitCounts& counts, int index) {
    if (index < counts.train) return Split::train;
    if (index < counts.train + counts.val) return Split::val;
    if (index < counts.train + counts.val + counts.test) return Split::test;
    return Split::eval;
}

inline constexpr int kMaxRegenerationAttempts = 8;

/// Trajectories are ordered train, val, test, eval. Every trajectory depends only on
/// (spec.seed, index), so results do not depend on generation order.
[[nodiscard]] inline Dataset generate_dataset(const ScenarioSpec& spec, const NetworkModel& net,
                                              const SolverConfig& cfg) {
    spec.validate();
    cfg.validate();
    Dataset data;
    data.spec = spec;
    const StateVec x_eq = find_equilibrium(net);
    const Eigen::VectorXd times = sample_times(spec);
    const int total = spec.counts.total();
    data.trajectories.reserve(static_cast<std::size_t>(total));
    for (int index = 0; index < total; ++index) {
        for (int attempt = 0;; ++attempt) {
            const std::uint64_t seed = trajectory_seed(spec.seed, index, attempt);
            std::mt19937_64 rng(seed);
            const auto schedule = sample_input_schedule(spec, net.node_count(), rng);
            try {
                Trajectory traj = simulate_reference(net, x_eq, times, expand_schedule(spec, schedule), cfg);
                traj.seed = seed;
                traj.index = index;
                traj.split = split_of(spec.counts, index);
                data.trajectories.push_back(std::move(traj));
                break;
            } catch (const NumericalError& e) {
                const std::string note = "trajectory " + std::to_string(index) + " attempt " +
                                         std::to_string(attempt) + " failed: " + e.what() + "; regenerating";
                std::clog << "warning: " << note << '\n';
                data.log.push_back(note);
                if (attempt + 1 >= kMaxRegenerationAttempts) {
                    throw NumericalError("trajectory " + std::to_string(index) + " failed " +
                                         std::to_string(kMaxRegenerationAttempts) + " times");
                }
            }
        }
    }
    return data;
}

}  // namespace droopid
