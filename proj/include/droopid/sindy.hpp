#pragma once

// Sparse identification with a physics-informed candidate library:
//   1;  per node i: wd_i, vd_i, pm_i, v_i, v_i^2;
//   per pair i < j: v_i v_j sin(delta_ij), v_i v_j cos(delta_ij)
// with delta_ij = delta_1j - delta_1i (= delta_i - delta_j). For N nodes this is
// 5N + N(N-1) + 1 columns.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "droopid/config.hpp"
#include "droopid/dataset_io.hpp"
#include "droopid/datagen.hpp"
#include "droopid/errors.hpp"
#include "droopid/grid_model.hpp"
#include "droopid/ode_solve.hpp"

namespace droopid {

enum class TermKind { constant, wd, vd, pm, v, v_squared, pair_sin, pair_cos };

struct CandidateTerm {
    TermKind kind = TermKind::constant;
    int i = 0;  // 0-based node
    int j = 0;  // second node for pair terms

    [[nodiscard]] std::string name() const {
        const auto n = [](int k) { return std::to_string(k + 1); };
        switch (kind) {
            case TermKind::constant: return "1";
            case TermKind::wd: return "wd_" + n(i);
            case TermKind::vd: return "vd_" + n(i);
            case TermKind::pm: return "pm_" + n(i);
            case TermKind::v: return "v_" + n(i);
            case TermKind::v_squared: return "v_" + n(i) + "^2";
            case TermKind::pair_sin: return "v_" + n(i) + "*v_" + n(j) + "*sin(delta_" + n(i) + n(j) + ")";
            case TermKind::pair_cos: return "v_" + n(i) + "*v_" + n(j) + "*cos(delta_" + n(i) + n(j) + ")";
        }
        return "?";
    }
};

class CandidateLibrary {
public:
    [[nodiscard]] static CandidateLibrary standard(int node_count) {
        CandidateLibrary lib;
        lib.node_count_ = node_count;
        lib.terms_.push_back({TermKind::constant, 0, 0});
        for (int i = 0; i < node_count; ++i) {
            for (auto kind : {TermKind::wd, TermKind::vd, TermKind::pm, TermKind::v, TermKind::v_squared}) {
                lib.terms_.push_back({kind, i, 0});
            }
        }
        for (int i = 0; i < node_count; ++i) {
            for (int j = i + 1; j < node_count; ++j) {
                lib.terms_.push_back({TermKind::pair_sin, i, j});
                lib.terms_.push_back({TermKind::pair_cos, i, j});
            }
        }
        return lib;
    }

    [[nodiscard]] int node_count() const noexcept { return node_count_; }
    [[nodiscard]] int size() const noexcept { return static_cast<int>(terms_.size()); }
    [[nodiscard]] const std::vector<CandidateTerm>& terms() const noexcept { return terms_; }

    [[nodiscard]] int index_of(const CandidateTerm& t) const {
        for (int k = 0; k < size(); ++k) {
            const auto& s = terms_[static_cast<std::size_t>(k)];
            if (s.kind == t.kind && s.i == t.i && s.j == t.j) {
                return k;
            }
        }
        throw std::out_of_range("candidate term not in library: " + t.name());
    }

    /// Library row for one state/input pair.
    [[nodiscard]] Eigen::RowVectorXd evaluate(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
        const int n = node_count_;
        Eigen::RowVectorXd row(size());
        auto angle = [&](int i) { return i == 0 ? 0.0 : x[i - 1]; };  // delta_1i
        for (int k = 0; k < size(); ++k) {
            const auto& t = terms_[static_cast<std::size_t>(k)];
            switch (t.kind) {
                case TermKind::constant: row[k] = 1.0; break;
                case TermKind::wd: row[k] = u[n + t.i]; break;
                case TermKind::vd: row[k] = u[t.i]; break;
                case TermKind::pm: row[k] = x[n - 1 + t.i]; break;
                case TermKind::v: row[k] = x[2 * n - 1 + t.i]; break;
                case TermKind::v_squared: row[k] = x[2 * n - 1 + t.i] * x[2 * n - 1 + t.i]; break;
                case TermKind::pair_sin:
                case TermKind::pair_cos: {
                    const double vv = x[2 * n - 1 + t.i] * x[2 * n - 1 + t.j];
                    const double d = angle(t.j) - angle(t.i);
                    row[k] = vv * (t.kind == TermKind::pair_sin ? std::sin(d) : std::cos(d));
                    break;
                }
            }
        }
        return row;
    }

private:
    int node_count_ = 0;
    std::vector<CandidateTerm> terms_;
};

/// K x M design matrix from K x N_x states and K x N_u inputs.
[[nodiscard]] inline Eigen::MatrixXd build_design_matrix(const CandidateLibrary& lib, const Eigen::MatrixXd& states,
                                                         const Eigen::MatrixXd& inputs) {
    const int n = lib.node_count();
    if (states.rows() != inputs.rows() || states.cols() != 3 * n - 1 || inputs.cols() != 2 * n) {
        throw std::invalid_argument("build_design_matrix: dimension mismatch");
    }
    Eigen::MatrixXd xi(states.rows(), lib.size());
    for (Eigen::Index r = 0; r < states.rows(); ++r) {
        xi.row(r) = lib.evaluate(states.row(r).transpose(), inputs.row(r).transpose());
    }
    return xi;
}

struct DerivativeEstimate {
    Eigen::MatrixXd values;  // K x N_x, one row per sample
    std::vector<int> rows;   // samples usable for regression
};

/// Second-order finite differences: central inside, one-sided (3-point) at both
/// ends. Rows that fall on an input step instant (multiples of `step_period`,
/// including t = 0) are excluded from `rows`. step_period <= 0 keeps every row.
[[nodiscard]] inline DerivativeEstimate estimate_derivatives(const Trajectory& traj, double step_period) {
    const Eigen::Index k = traj.samples();
    if (k < 3) {
        throw DataError("derivative estimation needs at least 3 samples, got " + std::to_string(k));
    }
    const double dt = traj.times[1] - traj.times[0];
    for (Eigen::Index i = 1; i < k; ++i) {
        if (std::abs(traj.times[i] - traj.times[i - 1] - dt) > 1e-9 * std::max(1.0, std::abs(dt))) {
            throw DataError("derivative estimation needs equidistant samples");
        }
    }
    DerivativeEstimate est;
    const auto& x = traj.states;
    est.values.resize(k, x.cols());
    est.values.row(0) = (-3.0 * x.row(0) + 4.0 * x.row(1) - x.row(2)) / (2.0 * dt);
    for (Eigen::Index i = 1; i + 1 < k; ++i) {
        est.values.row(i) = (x.row(i + 1) - x.row(i - 1)) / (2.0 * dt);
    }
    est.values.row(k - 1) = (3.0 * x.row(k - 1) - 4.0 * x.row(k - 2) + x.row(k - 3)) / (2.0 * dt);
    for (Eigen::Index i = 0; i < k; ++i) {
        if (step_period > 0.0) {
            const double m = (traj.times[i] - traj.times[0]) / step_period;
            if (std::abs(m - std::round(m)) < 1e-9) {
                continue;
            }
        }
        est.rows.push_back(static_cast<int>(i));
    }
    return est;
}

/// Minimizes ||y - A theta||^2 + lambda ||theta||^2 through a QR factorization
/// of the stacked system [A; sqrt(lambda) I], which avoids squaring the
/// condition number of A.
[[nodiscard]] inline Eigen::VectorXd ridge_solve(const Eigen::MatrixXd& a, const Eigen::VectorXd& y, double lambda) {
    const Eigen::Index m = a.cols();
    if (m == 0) {
        return {};
    }
    Eigen::MatrixXd stacked(a.rows() + m, m);
    stacked.topRows(a.rows()) = a;
    stacked.bottomRows(m) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(m, m);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(a.rows() + m);
    rhs.head(a.rows()) = y;
    const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(stacked);
    if (qr.rank() < m) {
        throw NumericalError("singular regression problem (rank " + std::to_string(qr.rank()) + " < " +
                             std::to_string(m) + "); use lambda > 0");
    }
    return qr.solve(rhs);
}

struct StlsqOptions {
    double lambda = 1e-6;
    double threshold = 1e-3;
    int max_iterations = 10000;
};

/// Sequentially thresholded ridge regression, independently per column of dx.
[[nodiscard]] inline Eigen::MatrixXd stlsq_fit(const Eigen::MatrixXd& xi, const Eigen::MatrixXd& dx,
                                               const StlsqOptions& opts) {
    if (xi.rows() != dx.rows()) {
        throw std::invalid_argument("stlsq_fit: design matrix and derivatives have different row counts");
    }
    if (!(opts.lambda >= 0.0) || !(opts.threshold >= 0.0) || opts.max_iterations < 1) {
        throw ConfigError("stlsq: lambda and threshold must be non-negative, max_iterations >= 1");
    }
    const Eigen::Index m = xi.cols();
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(m, dx.cols());
    for (Eigen::Index col = 0; col < dx.cols(); ++col) {
        std::vector<Eigen::Index> active(static_cast<std::size_t>(m));
        for (Eigen::Index i = 0; i < m; ++i) active[static_cast<std::size_t>(i)] = i;
        Eigen::VectorXd coef = Eigen::VectorXd::Zero(m);
        for (int iter = 0; iter < opts.max_iterations && !active.empty(); ++iter) {
            Eigen::MatrixXd sub(xi.rows(), static_cast<Eigen::Index>(active.size()));
            for (std::size_t a = 0; a < active.size(); ++a) sub.col(static_cast<Eigen::Index>(a)) = xi.col(active[a]);
            const Eigen::VectorXd sol = ridge_solve(sub, dx.col(col), opts.lambda);
            coef.setZero();
            std::vector<Eigen::Index> kept;
            for (std::size_t a = 0; a < active.size(); ++a) {
                const double c = sol[static_cast<Eigen::Index>(a)];
                coef[active[a]] = c;
                if (std::abs(c) >= opts.threshold) kept.push_back(active[a]);
            }
            if (kept.size() == active.size()) {
                break;
            }
            active = std::move(kept);
            if (active.empty()) {
                coef.setZero();
            }
        }
        // entries are either zero or at least the threshold
        for (Eigen::Index i = 0; i < m; ++i) {
            if (std::abs(coef[i]) < opts.threshold) coef[i] = 0.0;
        }
        theta.col(col) = coef;
    }
    return theta;
}

struct SindyModel {
    CandidateLibrary library;
    Eigen::MatrixXd theta;  // M x N_x
    double lambda = 0.0;
    double threshold = 0.0;

    [[nodiscard]] Eigen::VectorXd derivative(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
        return (library.evaluate(x, u) * theta).transpose();
    }
};

/// Exact coefficients of the reference dynamics in library coordinates.
[[nodiscard]] inline Eigen::MatrixXd ground_truth_theta(const NetworkModel& net, const CandidateLibrary& lib) {
    const int n = net.node_count();
    if (lib.node_count() != n) {
        throw std::invalid_argument("ground_truth_theta: library is built for " + std::to_string(lib.node_count()) +
                                    " nodes, network has " + std::to_string(n));
    }
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(lib.size(), net.state_dim());
    const auto& units = net.units();
    const int one = lib.index_of({TermKind::constant, 0, 0});
    auto term = [&](TermKind kind, int i, int j = 0) { return lib.index_of({kind, i, j}); };

    // angle differences: w_1 - w_i with w_i = wd_i - k_p,i (pm_i - pd_i)
    for (int i = 1; i < n; ++i) {
        const int col = net.angle_index(i);
        theta(term(TermKind::wd, 0), col) += 1.0;
        theta(term(TermKind::pm, 0), col) += -units[0].k_p;
        theta(one, col) += units[0].k_p * units[0].p_d;
        theta(term(TermKind::wd, i), col) += -1.0;
        theta(term(TermKind::pm, i), col) += units[i].k_p;
        theta(one, col) += -units[i].k_p * units[i].p_d;
    }

    // measured powers and voltages
    for (int i = 0; i < n; ++i) {
        const auto& u = units[i];
        const int cp = net.power_index(i);
        const int cv = net.voltage_index(i);
        double g_self = net.loads()[i].g_load;
        double b_self = net.loads()[i].b_load;
        for (const auto& line : net.lines()) {
            if (line.from != i && line.to != i) continue;
            const int other = line.from == i ? line.to : line.from;
            const auto& lp = line.params;
            g_self += lp.g + lp.g_shunt;
            b_self += lp.b + lp.b_shunt;
            // sin(delta_i,other) = s * sin(delta_lo,hi)
            const double s = i < other ? 1.0 : -1.0;
            const int lo = std::min(i, other);
            const int hi = std::max(i, other);
            const int t_sin = term(TermKind::pair_sin, lo, hi);
            const int t_cos = term(TermKind::pair_cos, lo, hi);
            // p_i -= v_i v_j (g cos + b sin);  q_i -= v_i v_j (g sin - b cos)
            theta(t_cos, cp) += -lp.g / u.tau_p;
            theta(t_sin, cp) += -lp.b * s / u.tau_p;
            theta(t_sin, cv) += u.k_q * lp.g * s / u.tau_q;
            theta(t_cos, cv) += -u.k_q * lp.b / u.tau_q;
        }
        theta(term(TermKind::pm, i), cp) += -1.0 / u.tau_p;
        theta(term(TermKind::v_squared, i), cp) += g_self / u.tau_p;

        theta(term(TermKind::v, i), cv) += -1.0 / u.tau_q;
        theta(term(TermKind::vd, i), cv) += 1.0 / u.tau_q;
        theta(term(TermKind::v_squared, i), cv) += u.k_q * b_self / u.tau_q;
        theta(one, cv) += u.k_q * u.q_d / u.tau_q;
    }
    return theta;
}

struct SindyFitOptions {
    StlsqOptions stlsq;
    bool exact_derivatives = false;  // evaluate the reference rhs instead of differencing
    double step_period = 5.0;        // input step spacing for row exclusion
};

/// Fits on the given trajectories. With exact derivatives the reference network
/// supplies dx/dt at every sample and no rows are excluded.
[[nodiscard]] inline SindyModel fit_sindy(const std::vector<const Trajectory*>& trajs, const SindyFitOptions& opts,
                                          const NetworkModel* reference = nullptr) {
    if (trajs.empty()) {
        throw DataError("SINDy fit needs at least one trajectory");
    }
    const int n = static_cast<int>(trajs.front()->inputs.cols()) / 2;
    const auto lib = CandidateLibrary::standard(n);
    std::vector<Eigen::MatrixXd> xs, us, ds;
    Eigen::Index rows = 0;
    for (const auto* t : trajs) {
        if (opts.exact_derivatives) {
            if (!reference) {
                throw ConfigError("exact derivatives need the reference network");
            }
            Eigen::MatrixXd d(t->samples(), t->states.cols());
            for (Eigen::Index k = 0; k < t->samples(); ++k) {
                d.row(k) = rhs(t->states.row(k).transpose(), t->inputs.row(k).transpose(), *reference).transpose();
            }
            xs.push_back(t->states);
            us.push_back(t->inputs);
            ds.push_back(std::move(d));
        } else {
            const auto est = estimate_derivatives(*t, opts.step_period);
            const auto r = static_cast<Eigen::Index>(est.rows.size());
            Eigen::MatrixXd x(r, t->states.cols()), u(r, t->inputs.cols()), d(r, t->states.cols());
            for (Eigen::Index i = 0; i < r; ++i) {
                const int k = est.rows[static_cast<std::size_t>(i)];
                x.row(i) = t->states.row(k);
                u.row(i) = t->inputs.row(k);
                d.row(i) = est.values.row(k);
            }
            xs.push_back(std::move(x));
            us.push_back(std::move(u));
            ds.push_back(std::move(d));
        }
        rows += xs.back().rows();
    }
    Eigen::MatrixXd x(rows, xs.front().cols()), u(rows, us.front().cols()), d(rows, ds.front().cols());
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        x.middleRows(r, xs[i].rows()) = xs[i];
        u.middleRows(r, us[i].rows()) = us[i];
        d.middleRows(r, ds[i].rows()) = ds[i];
        r += xs[i].rows();
    }
    if (rows <= lib.size()) {
        std::clog << "warning: SINDy fit has " << rows << " rows for " << lib.size() << " candidates\n";
    }
    SindyModel model;
    model.library = lib;
    model.lambda = opts.stlsq.lambda;
    model.threshold = opts.stlsq.threshold;
    model.theta = stlsq_fit(build_design_matrix(lib, x, u), d, opts.stlsq);
    return model;
}

[[nodiscard]] inline Eigen::MatrixXd simulate_sindy(const SindyModel& model, const Eigen::VectorXd& x0,
                                                    const Eigen::VectorXd& times, const Eigen::MatrixXd& inputs,
                                                    const SolverConfig& cfg) {
    return simulate_piecewise(
        [&model](double, const Eigen::VectorXd& x, const Eigen::VectorXd& u) { return model.derivative(x, u); }, x0,
        times, inputs, cfg);
}

// CSV: header "term,state,coefficient", one row per (term, state) pair in
// library-major order, including zeros.

inline void save_sindy_csv(std::ostream& out, const SindyModel& model) {
    const auto states = state_names(model.library.node_count());
    out << "term,state,coefficient\n";
    for (int k = 0; k < model.library.size(); ++k) {
        const auto name = model.library.terms()[static_cast<std::size_t>(k)].name();
        for (std::size_t s = 0; s < states.size(); ++s) {
            out << name << ',' << states[s] << ',' << format_double(model.theta(k, static_cast<Eigen::Index>(s)))
                << '\n';
        }
    }
}

[[nodiscard]] inline SindyModel load_sindy_csv(std::istream& in, int node_count) {
    SindyModel model;
    model.library = CandidateLibrary::standard(node_count);
    const auto states = state_names(node_count);
    std::map<std::string, int> term_index, state_index;
    for (int k = 0; k < model.library.size(); ++k) term_index[model.library.terms()[static_cast<std::size_t>(k)].name()] = k;
    for (std::size_t s = 0; s < states.size(); ++s) state_index[states[s]] = static_cast<int>(s);
    model.theta = Eigen::MatrixXd::Zero(model.library.size(), static_cast<Eigen::Index>(states.size()));
    std::string line;
    if (!std::getline(in, line) || line != "term,state,coefficient") {
        throw DataError("SINDy model: line 1: expected header 'term,state,coefficient'");
    }
    int line_no = 1;
    int seen = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) {
            throw DataError("SINDy model: line " + std::to_string(line_no) + ": expected 3 columns");
        }
        const auto term = line.substr(0, c1);
        const auto state = line.substr(c1 + 1, c2 - c1 - 1);
        const auto value = detail::parse_double(std::string_view(line).substr(c2 + 1));
        if (!term_index.count(term)) {
            throw DataError("SINDy model: line " + std::to_string(line_no) + ": unknown term '" + term + "'");
        }
        if (!state_index.count(state)) {
            throw DataError("SINDy model: line " + std::to_string(line_no) + ": unknown state '" + state + "'");
        }
        if (!value) {
            throw DataError("SINDy model: line " + std::to_string(line_no) + ", column 3: not a number");
        }
        model.theta(term_index[term], state_index[state]) = *value;
        ++seen;
    }
    if (seen != model.theta.size()) {
        throw DataError("SINDy model: expected " + std::to_string(model.theta.size()) + " coefficient rows, got " +
                        std::to_string(seen));
    }
    return model;
}

}  // namespace droopid
