#pragma once

// Droop-controlled grid-forming units coupled through a Kron-reduced network.
//
// State layout for N nodes (N_x = 3N - 1):
//   [delta_12 .. delta_1N, pm_1 .. pm_N, v_1 .. v_N]
// Input layout (N_u = 2N):
//   [vd_1 .. vd_N, wd_1 .. wd_N]
//
// delta_1i = delta_1 - delta_i; the angle of node 1 is the reference and is not
// a state. Frequencies are in rad/s, everything else in per-unit. Nodes are
// numbered from 1 in file formats and documentation, from 0 in code.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "droopid/config.hpp"
#include "droopid/errors.hpp"

namespace droopid {

using StateVec = Eigen::VectorXd;
using InputVec = Eigen::VectorXd;

inline constexpr double kNominalFrequency = 2.0 * std::numbers::pi * 50.0;

/// Pi-model line: series admittance g + ib, identical shunt g_shunt + i b_shunt at both ends.
struct LineParams {
    double g = 0.0;
    double b = 0.0;
    double g_shunt = 0.0;
    double b_shunt = 0.0;
};

/// Constant-impedance load; (0, 0) means no load.
struct LoadParams {
    double g_load = 0.0;
    double b_load = 0.0;
};

struct UnitParams {
    double k_p = 1.0;    // 1/(pu s)
    double k_q = 0.1;    // pu/pu
    double tau_p = 1.0;  // s
    double tau_q = 1.0;  // s
    double p_d = 0.0;
    double q_d = 0.0;
};

struct Line {
    int from = 0;  // 0-based, from < to
    int to = 0;
    LineParams params;
};

struct PowerFlow {
    double p = 0.0;
    double q = 0.0;
};

/// Active and reactive power sent from node i towards node j over one line.
[[nodiscard]] inline PowerFlow line_power_flow(double v_i, double v_j, double delta_ij, const LineParams& line) {
    const double s = std::sin(delta_ij);
    const double c = std::cos(delta_ij);
    const double vv = v_i * v_j;
    return {v_i * v_i * (line.g + line.g_shunt) - vv * (line.g * c + line.b * s),
            -v_i * v_i * (line.b + line.b_shunt) - vv * (line.g * s - line.b * c)};
}

class NetworkModel {
public:
    NetworkModel() = default;

    NetworkModel(int node_count, std::vector<Line> lines, std::vector<LoadParams> loads, std::vector<UnitParams> units)
        : node_count_(node_count), lines_(std::move(lines)), loads_(std::move(loads)), units_(std::move(units)) {
        validate();
    }

    [[nodiscard]] int node_count() const noexcept { return node_count_; }
    [[nodiscard]] int state_dim() const noexcept { return 3 * node_count_ - 1; }
    [[nodiscard]] int input_dim() const noexcept { return 2 * node_count_; }
    [[nodiscard]] const std::vector<Line>& lines() const noexcept { return lines_; }
    [[nodiscard]] const std::vector<LoadParams>& loads() const noexcept { return loads_; }
    [[nodiscard]] const std::vector<UnitParams>& units() const noexcept { return units_; }

    // Index helpers, 0-based node index.
    [[nodiscard]] int angle_index(int node) const noexcept { return node - 1; }  // node >= 1
    [[nodiscard]] int power_index(int node) const noexcept { return node_count_ - 1 + node; }
    [[nodiscard]] int voltage_index(int node) const noexcept { return 2 * node_count_ - 1 + node; }
    [[nodiscard]] int vd_index(int node) const noexcept { return node; }
    [[nodiscard]] int wd_index(int node) const noexcept { return node_count_ + node; }

    /// delta_ij = delta_i - delta_j = delta_1j - delta_1i.
    [[nodiscard]] double angle_difference(const StateVec& x, int i, int j) const {
        const double d1i = i == 0 ? 0.0 : x[angle_index(i)];
        const double d1j = j == 0 ? 0.0 : x[angle_index(j)];
        return d1j - d1i;
    }

    [[nodiscard]] InputVec nominal_input() const {
        InputVec u(input_dim());
        u.head(node_count_).setOnes();
        u.tail(node_count_).setConstant(kNominalFrequency);
        return u;
    }

    /// Flat start: zero angle differences, measured powers at setpoint, unit voltages.
    [[nodiscard]] StateVec flat_state() const {
        StateVec x(state_dim());
        x.head(node_count_ - 1).setZero();
        for (int i = 0; i < node_count_; ++i) {
            x[power_index(i)] = units_[i].p_d;
            x[voltage_index(i)] = 1.0;
        }
        return x;
    }

    void validate() const {
        if (node_count_ < 2) {
            throw ConfigError("network needs at least 2 nodes, got " + std::to_string(node_count_));
        }
        if (static_cast<int>(loads_.size()) != node_count_ || static_cast<int>(units_.size()) != node_count_) {
            throw ConfigError("network needs one load and one unit entry per node");
        }
        for (const auto& line : lines_) {
            if (line.from < 0 || line.to >= node_count_ || line.from >= line.to) {
                throw ConfigError("invalid line " + std::to_string(line.from + 1) + "-" + std::to_string(line.to + 1));
            }
            if (line.params.g < 0.0) {
                throw ConfigError("line conductance must be non-negative");
            }
        }
        for (std::size_t a = 0; a < lines_.size(); ++a) {
            for (std::size_t b = a + 1; b < lines_.size(); ++b) {
                if (lines_[a].from == lines_[b].from && lines_[a].to == lines_[b].to) {
                    throw ConfigError("duplicate line " + std::to_string(lines_[a].from + 1) + "-" +
                                      std::to_string(lines_[a].to + 1));
                }
            }
        }
        for (const auto& load : loads_) {
            if (load.g_load < 0.0) {
                throw ConfigError("load conductance must be non-negative");
            }
        }
        for (const auto& unit : units_) {
            if (!(unit.k_p > 0.0 && unit.k_q > 0.0 && unit.tau_p > 0.0 && unit.tau_q > 0.0)) {
                throw ConfigError("droop gains and filter time constants must be positive");
            }
        }
        // connectivity by union-find
        std::vector<int> parent(node_count_);
        for (int i = 0; i < node_count_; ++i) {
            parent[i] = i;
        }
        auto find = [&](int i) {
            while (parent[i] != i) {
                i = parent[i] = parent[parent[i]];
            }
            return i;
        };
        for (const auto& line : lines_) {
            parent[find(line.from)] = find(line.to);
        }
        for (int i = 1; i < node_count_; ++i) {
            if (find(i) != find(0)) {
                throw ConfigError("network graph is not connected (node " + std::to_string(i + 1) + ")");
            }
        }
    }

private:
    int node_count_ = 0;
    std::vector<Line> lines_;
    std::vector<LoadParams> loads_;
    std::vector<UnitParams> units_;
};

/// The 4-node reference system: SG units at nodes 1 and 4, storage at 2 and 3,
/// loads at 1 and 3, meshed lines {1-2, 2-3, 2-4, 3-4}.
[[nodiscard]] inline NetworkModel reference_network() {
    const LineParams line{2.0, -20.0, 0.02, 0.005};
    const UnitParams conventional{1.0, 0.1, 1.0, 1.0, 0.6, 0.0};
    const UnitParams storage{1.0, 0.1, 0.3, 0.3, -0.25, 0.0};
    const LoadParams load{0.38, -0.1};
    return NetworkModel(4, {{0, 1, line}, {1, 2, line}, {1, 3, line}, {2, 3, line}}, {load, {}, load, {}},
                        {conventional, storage, storage, conventional});
}

/// Overall active/reactive power injected at `node` (load term plus all incident lines).
[[nodiscard]] inline PowerFlow nodal_power(int node, const StateVec& x, const NetworkModel& net) {
    const int n = net.node_count();
    if (node < 0 || node >= n) {
        throw std::out_of_range("node index " + std::to_string(node + 1) + " out of range [1, " + std::to_string(n) +
                                "]");
    }
    const double v_i = x[net.voltage_index(node)];
    const auto& load = net.loads()[node];
    PowerFlow total{v_i * v_i * load.g_load, -v_i * v_i * load.b_load};
    for (const auto& line : net.lines()) {
        int other = -1;
        if (line.from == node) {
            other = line.to;
        } else if (line.to == node) {
            other = line.from;
        } else {
            continue;
        }
        const auto flow = line_power_flow(v_i, x[net.voltage_index(other)], net.angle_difference(x, node, other),
                                          line.params);
        total.p += flow.p;
        total.q += flow.q;
    }
    return total;
}

/// Time derivative of the reduced state for constant input u.
[[nodiscard]] inline StateVec rhs(const StateVec& x, const InputVec& u, const NetworkModel& net) {
    const int n = net.node_count();
    if (x.size() != net.state_dim() || u.size() != net.input_dim()) {
        throw std::invalid_argument("rhs: expected state of size " + std::to_string(net.state_dim()) +
                                    " and input of size " + std::to_string(net.input_dim()) + ", got " +
                                    std::to_string(x.size()) + " and " + std::to_string(u.size()));
    }
    const auto& units = net.units();

    // Accumulate nodal injections line by line rather than per node.
    Eigen::VectorXd p(n);
    Eigen::VectorXd q(n);
    for (int i = 0; i < n; ++i) {
        const double v = x[net.voltage_index(i)];
        p[i] = v * v * net.loads()[i].g_load;
        q[i] = -v * v * net.loads()[i].b_load;
    }
    for (const auto& line : net.lines()) {
        const int i = line.from;
        const int j = line.to;
        const double v_i = x[net.voltage_index(i)];
        const double v_j = x[net.voltage_index(j)];
        const double d_ij = net.angle_difference(x, i, j);
        const auto fij = line_power_flow(v_i, v_j, d_ij, line.params);
        const auto fji = line_power_flow(v_j, v_i, -d_ij, line.params);
        p[i] += fij.p;
        q[i] += fij.q;
        p[j] += fji.p;
        q[j] += fji.q;
    }

    StateVec dx(net.state_dim());
    const double w1 = u[net.wd_index(0)] - units[0].k_p * (x[net.power_index(0)] - units[0].p_d);
    for (int i = 1; i < n; ++i) {
        const double wi = u[net.wd_index(i)] - units[i].k_p * (x[net.power_index(i)] - units[i].p_d);
        dx[net.angle_index(i)] = w1 - wi;
    }
    for (int i = 0; i < n; ++i) {
        const auto& unit = units[i];
        const double pm = x[net.power_index(i)];
        const double v = x[net.voltage_index(i)];
        dx[net.power_index(i)] = (-pm + p[i]) / unit.tau_p;
        dx[net.voltage_index(i)] = (-v + u[net.vd_index(i)] - unit.k_q * (q[i] - unit.q_d)) / unit.tau_q;
    }
    return dx;
}

struct RootOptions {
    double tolerance = 1e-12;  // on the infinity norm of the residual
    int max_iterations = 100;
    double jacobian_step = 1e-7;
};

/// Damped Newton iteration with a central-difference Jacobian and backtracking
/// on the residual norm. Throws NumericalError with the last residual norm when
/// it does not converge.
template <class Residual>
[[nodiscard]] Eigen::VectorXd find_root(Residual&& residual, Eigen::VectorXd x, const RootOptions& opts = {}) {
    const Eigen::Index n = x.size();
    Eigen::VectorXd r = residual(x);
    double norm = r.cwiseAbs().maxCoeff();
    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        if (!std::isfinite(norm)) {
            break;
        }
        if (norm < opts.tolerance) {
            return x;
        }
        Eigen::MatrixXd jac(n, n);
        for (Eigen::Index k = 0; k < n; ++k) {
            const double h = opts.jacobian_step * std::max(1.0, std::abs(x[k]));
            Eigen::VectorXd xp = x;
            Eigen::VectorXd xm = x;
            xp[k] += h;
            xm[k] -= h;
            jac.col(k) = (residual(xp) - residual(xm)) / (2.0 * h);
        }
        const Eigen::VectorXd step = jac.partialPivLu().solve(-r);
        double damping = 1.0;
        bool improved = false;
        for (int ls = 0; ls < 30; ++ls) {
            Eigen::VectorXd trial = x + damping * step;
            Eigen::VectorXd r_trial = residual(trial);
            const double trial_norm = r_trial.cwiseAbs().maxCoeff();
            if (std::isfinite(trial_norm) && trial_norm < norm) {
                x = std::move(trial);
                r = std::move(r_trial);
                norm = trial_norm;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if (!improved) {
            break;
        }
    }
    if (norm < opts.tolerance) {
        return x;
    }
    throw NumericalError("root finding did not converge, residual norm " + std::to_string(norm));
}

/// Equilibrium of the network for constant input u, starting from x_guess.
[[nodiscard]] inline StateVec find_equilibrium(const InputVec& u, const NetworkModel& net, const StateVec& x_guess,
                                               const RootOptions& opts = {}) {
    if (x_guess.size() != net.state_dim()) {
        throw std::invalid_argument("find_equilibrium: guess has wrong dimension");
    }
    try {
        return find_root([&](const Eigen::VectorXd& x) { return rhs(x, u, net); }, x_guess, opts);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string("equilibrium search failed: ") + e.what());
    }
}

[[nodiscard]] inline StateVec find_equilibrium(const NetworkModel& net) {
    return find_equilibrium(net.nominal_input(), net, net.flat_state());
}

/// Reads [network], [line.ij], [unit.i], [load.i] sections. Missing [load.i] means no load.
[[nodiscard]] inline NetworkModel network_from_config(const ConfigFile& file) {
    const auto& net = file.section("network");
    const int n = static_cast<int>(net.get_int("nodes"));
    if (n < 2 || n > 9) {
        throw ConfigError("[network] nodes must be in [2, 9], got " + std::to_string(n));
    }
    std::vector<Line> lines;
    std::vector<LoadParams> loads(n);
    std::vector<UnitParams> units(n);
    std::vector<bool> have_unit(n, false);
    auto node_of = [&](char c, const std::string& section) {
        const int idx = c - '1';
        if (idx < 0 || idx >= n) {
            throw ConfigError("section [" + section + "] refers to a node outside [1, " + std::to_string(n) + "]");
        }
        return idx;
    };
    for (const auto& name : file.section_names()) {
        const auto& s = file.section(name);
        if (name.rfind("line.", 0) == 0) {
            const std::string ids = name.substr(5);
            if (ids.size() != 2) {
                throw ConfigError("line " + std::to_string(s.line()) + ": line section must be [line.ij]");
            }
            int i = node_of(ids[0], name);
            int j = node_of(ids[1], name);
            if (i == j) {
                throw ConfigError("line " + std::to_string(s.line()) + ": self-loop in [" + name + "]");
            }
            if (i > j) {
                std::swap(i, j);
            }
            lines.push_back({i, j,
                             {s.get_double("g"), s.get_double("b"), s.get_double("g_shunt", 0.0),
                              s.get_double("b_shunt", 0.0)}});
        } else if (name.rfind("unit.", 0) == 0 && name.size() == 6) {
            const int i = node_of(name[5], name);
            units[i] = {s.get_double("k_p"), s.get_double("k_q"), s.get_double("tau_p"),
                        s.get_double("tau_q"), s.get_double("p_d"), s.get_double("q_d", 0.0)};
            have_unit[i] = true;
        } else if (name.rfind("load.", 0) == 0 && name.size() == 6) {
            const int i = node_of(name[5], name);
            loads[i] = {s.get_double("g_load"), s.get_double("b_load")};
        }
    }
    for (int i = 0; i < n; ++i) {
        if (!have_unit[i]) {
            throw ConfigError("missing section [unit." + std::to_string(i + 1) + "]");
        }
    }
    return NetworkModel(n, std::move(lines), std::move(loads), std::move(units));
}

}  // namespace droopid
