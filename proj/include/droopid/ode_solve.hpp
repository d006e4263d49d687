#pragma once

// Explicit Runge-Kutta integration over one sampling interval (Euler, classical
// RK4, Dormand-Prince 5(4)) and zero-order-hold rollouts over a sampled input
// sequence.
//
// The state type is any Eigen dense expression holder (VectorXd for a single
// trajectory, MatrixXd with one column per sample for batched NODE training).
// Error control in DOPRI5 uses the max norm over all entries, so a batch is
// integrated as a single system with shared step sizes.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "droopid/errors.hpp"

namespace droopid {

enum class Scheme { euler, rk4, dopri5 };

[[nodiscard]] inline std::string_view to_string(Scheme scheme) {
    switch (scheme) {
        case Scheme::euler: return "euler";
        case Scheme::rk4: return "rk4";
        case Scheme::dopri5: return "dopri5";
    }
    return "?";
}

[[nodiscard]] inline Scheme parse_scheme(std::string_view name) {
    if (name == "euler") return Scheme::euler;
    if (name == "rk4") return Scheme::rk4;
    if (name == "dopri5") return Scheme::dopri5;
    throw ConfigError("unknown solver scheme '" + std::string(name) + "' (expected euler|rk4|dopri5)");
}

struct SolverConfig {
    Scheme scheme = Scheme::rk4;
    double fixed_step = 0.01;  // s, used by euler and rk4
    double rtol = 1e-6;
    double atol = 1e-8;
    int max_steps = 100000;  // per interval

    void validate() const {
        if (!(fixed_step > 0.0)) throw ConfigError("solver fixed_step must be positive");
        if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("solver tolerances must be positive");
        if (max_steps < 1) throw ConfigError("solver max_steps must be at least 1");
    }
};

/// Explicit Butcher tableau. `a` is stored densely (row i uses entries j < i).
struct ButcherTableau {
    int stages = 0;
    std::array<std::array<double, 7>, 7> a{};
    std::array<double, 7> b{};
    std::array<double, 7> c{};
    std::array<double, 7> error{};  // b - b_hat; all zero for non-embedded schemes
    bool embedded = false;
};

[[nodiscard]] inline const ButcherTableau& euler_tableau() {
    static const ButcherTableau t = [] {
        ButcherTableau t;
        t.stages = 1;
        t.b[0] = 1.0;
        return t;
    }();
    return t;
}

[[nodiscard]] inline const ButcherTableau& rk4_tableau() {
    static const ButcherTableau t = [] {
        ButcherTableau t;
        t.stages = 4;
        t.a[1][0] = 0.5;
        t.a[2][1] = 0.5;
        t.a[3][2] = 1.0;
        t.b = {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};
        t.c = {0.0, 0.5, 0.5, 1.0};
        return t;
    }();
    return t;
}

/// Dormand-Prince 5(4). Stage 7 is evaluated at the new point (FSAL) and only
/// enters the error estimate; b[6] = 0.
[[nodiscard]] inline const ButcherTableau& dopri5_tableau() {
    static const ButcherTableau t = [] {
        ButcherTableau t;
        t.stages = 7;
        t.embedded = true;
        t.c = {0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0};
        t.a[1] = {1.0 / 5.0};
        t.a[2] = {3.0 / 40.0, 9.0 / 40.0};
        t.a[3] = {44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0};
        t.a[4] = {19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0};
        t.a[5] = {9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0};
        t.a[6] = {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0};
        t.b = {35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0};
        const std::array<double, 7> b_hat = {5179.0 / 57600.0,    0.0,           7571.0 / 16695.0, 393.0 / 640.0,
                                             -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0};
        for (int i = 0; i < 7; ++i) {
            t.error[i] = t.b[i] - b_hat[i];
        }
        return t;
    }();
    return t;
}

[[nodiscard]] inline const ButcherTableau& tableau_for(Scheme scheme) {
    switch (scheme) {
        case Scheme::euler: return euler_tableau();
        case Scheme::rk4: return rk4_tableau();
        case Scheme::dopri5: return dopri5_tableau();
    }
    return rk4_tableau();
}

/// Number of stages that feed the propagated solution (the FSAL stage of DOPRI5 does not).
[[nodiscard]] inline int solution_stages(const ButcherTableau& t) { return t.embedded ? t.stages - 1 : t.stages; }

/// x + h * sum_j a[i][j] k_j. Shared by the solvers and the differentiable replay
/// in neural_field.hpp so both produce identical floating point results.
template <class State>
[[nodiscard]] State stage_input(const ButcherTableau& t, int stage, const State& x, double h,
                                const std::vector<State>& k) {
    State y = x;
    for (int j = 0; j < stage; ++j) {
        if (t.a[stage][j] != 0.0) {
            y += (h * t.a[stage][j]) * k[j];
        }
    }
    return y;
}

template <class State>
[[nodiscard]] State combine_stages(const ButcherTableau& t, const State& x, double h, const std::vector<State>& k) {
    State y = x;
    for (int j = 0; j < solution_stages(t); ++j) {
        if (t.b[j] != 0.0) {
            y += (h * t.b[j]) * k[j];
        }
    }
    return y;
}

template <class State>
struct IvpSolution {
    State end_state;
    int step_count = 0;
    int rejected_steps = 0;
    std::vector<double> step_sizes;  // accepted steps, in order
    double max_error_ratio = 0.0;    // max over accepted steps of |err_i| / (atol + rtol * max(|x_i|, |x_new_i|))
};

namespace detail {

template <class State>
void check_finite(const State& k, int step, double t) {
    if (!k.allFinite()) {
        throw NumericalError("non-finite vector field value at step " + std::to_string(step) + " (t = " +
                             std::to_string(t) + ")");
    }
}

/// Integer number of fixed steps covering [t_s, t_e]; throws if not a whole multiple.
[[nodiscard]] inline int fixed_step_count(double t_s, double t_e, double h) {
    const double ratio = (t_e - t_s) / h;
    const double n = std::round(ratio);
    if (n < 1.0 || std::abs(ratio - n) > 1e-9 * std::max(1.0, n)) {
        throw ConfigError("interval length " + std::to_string(t_e - t_s) + " is not a multiple of the fixed step " +
                          std::to_string(h));
    }
    return static_cast<int>(n);
}

}  // namespace detail

// Step-size controller constants for DOPRI5.
inline constexpr double kSafety = 0.9;
inline constexpr double kMinGrowth = 0.2;
inline constexpr double kMaxGrowth = 5.0;

/// Integrates dx/dt = field(t, x) from t_s to t_e.
template <class State, class Field>
[[nodiscard]] IvpSolution<State> solve_interval(Field&& field, double t_s, double t_e, const State& x0,
                                                const SolverConfig& cfg) {
    if (!(t_e > t_s)) {
        throw std::invalid_argument("solve_interval: t_e must be greater than t_s");
    }
    const ButcherTableau& tab = tableau_for(cfg.scheme);
    IvpSolution<State> sol;
    std::vector<State> k(static_cast<std::size_t>(tab.stages));

    if (cfg.scheme != Scheme::dopri5) {
        const int n = detail::fixed_step_count(t_s, t_e, cfg.fixed_step);
        const double h = (t_e - t_s) / n;
        State x = x0;
        for (int step = 0; step < n; ++step) {
            const double t = t_s + step * h;
            for (int s = 0; s < tab.stages; ++s) {
                k[s] = field(t + tab.c[s] * h, stage_input(tab, s, x, h, k));
                detail::check_finite(k[s], step, t);
            }
            x = combine_stages(tab, x, h, k);
            sol.step_sizes.push_back(h);
        }
        sol.end_state = std::move(x);
        sol.step_count = n;
        return sol;
    }

    // Dormand-Prince with FSAL and a plain (non-PI) controller.
    const double span = t_e - t_s;
    double h = span / 10.0;
    double t = t_s;
    State x = x0;
    k[0] = field(t, x);
    detail::check_finite(k[0], 0, t);
    int attempts = 0;
    while (t < t_e) {
        if (sol.step_count >= cfg.max_steps || attempts >= 10 * cfg.max_steps) {
            throw NumericalError("dopri5 exceeded max_steps = " + std::to_string(cfg.max_steps) + " on [" +
                                 std::to_string(t_s) + ", " + std::to_string(t_e) + "]");
        }
        ++attempts;
        bool last = false;
        if (t + h >= t_e || (t_e - (t + h)) < 1e-12 * span) {
            h = t_e - t;
            last = true;
        }
        for (int s = 1; s < tab.stages - 1; ++s) {
            k[s] = field(t + tab.c[s] * h, stage_input(tab, s, x, h, k));
            detail::check_finite(k[s], sol.step_count, t);
        }
        State x_new = combine_stages(tab, x, h, k);
        const double t_new = last ? t_e : t + h;
        k[6] = field(t_new, x_new);
        detail::check_finite(k[6], sol.step_count, t_new);

        State err = (h * tab.error[0]) * k[0];
        for (int s = 1; s < tab.stages; ++s) {
            if (tab.error[s] != 0.0) {
                err += (h * tab.error[s]) * k[s];
            }
        }
        const auto scale = (cfg.atol + cfg.rtol * x.cwiseAbs().cwiseMax(x_new.cwiseAbs()).array()).eval();
        const double ratio = (err.array().abs() / scale).maxCoeff();
        if (!std::isfinite(ratio)) {
            throw NumericalError("dopri5 error estimate is not finite at t = " + std::to_string(t));
        }

        double factor = ratio == 0.0 ? kMaxGrowth : kSafety * std::pow(ratio, -0.2);
        factor = std::clamp(factor, kMinGrowth, kMaxGrowth);
        if (ratio <= 1.0) {
            sol.step_sizes.push_back(h);
            sol.max_error_ratio = std::max(sol.max_error_ratio, ratio);
            ++sol.step_count;
            t = t_new;
            x = std::move(x_new);
            k[0] = std::move(k[6]);
            h *= factor;
        } else {
            ++sol.rejected_steps;
            h *= std::min(1.0, factor);
        }
    }
    sol.end_state = std::move(x);
    return sol;
}

/// Rollout under zero-order hold: row k of `inputs` is applied on [t_k, t_{k+1}).
/// Returns one state row per time sample; row 0 is x0.
template <class Field>
[[nodiscard]] Eigen::MatrixXd simulate_piecewise(Field&& field, const Eigen::VectorXd& x0, const Eigen::VectorXd& times,
                                                 const Eigen::MatrixXd& inputs, const SolverConfig& cfg) {
    if (inputs.rows() != times.size()) {
        throw std::invalid_argument("simulate_piecewise: need one input row per time sample");
    }
    const Eigen::Index samples = times.size();
    Eigen::MatrixXd states(samples, x0.size());
    if (samples == 0) {
        return states;
    }
    states.row(0) = x0.transpose();
    Eigen::VectorXd x = x0;
    for (Eigen::Index k = 0; k + 1 < samples; ++k) {
        const Eigen::VectorXd u = inputs.row(k).transpose();
        auto held = [&](double t, const Eigen::VectorXd& state) -> Eigen::VectorXd { return field(t, state, u); };
        try {
            x = solve_interval(held, times[k], times[k + 1], x, cfg).end_state;
        } catch (const NumericalError& e) {
            throw NumericalError("interval " + std::to_string(k) + ": " + e.what());
        }
        states.row(k + 1) = x.transpose();
    }
    return states;
}

}  // namespace droopid
