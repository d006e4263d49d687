#pragma once

// MLP vector field for neural ODEs, trained in normalized coordinates.
//
//   z = (x - state_shift) / state_scale       w = (u - input_shift) / input_scale
//   dz/dt = output_scale .* (W_o h(W_H ... h(W_1 [z; w] + b_1) ... + b_H) + b_o)
//   dx/dt = state_scale .* dz/dt
//
// All parameters live in one flat vector (per layer: weight column-major, then
// bias), which is what Adam and the finite-difference tests operate on.
//
// Gradients are exact reverse-mode derivatives of the discretized one-step
// prediction: each explicit RK step is replayed with its stage tapes and
// differentiated backwards. For DOPRI5 the accepted step sizes from the
// adaptive forward solve are replayed as constants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "droopid/datagen.hpp"
#include "droopid/errors.hpp"
#include "droopid/ode_solve.hpp"

namespace droopid {

enum class Activation { relu, sigmoid, softplus };

[[nodiscard]] inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::sigmoid: return "sigmoid";
        case Activation::softplus: return "softplus";
    }
    return "?";
}

[[nodiscard]] inline Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "softplus") return Activation::softplus;
    throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu|sigmoid|softplus)");
}

[[nodiscard]] inline double sigmoid(double p) {
    if (p >= 0.0) {
        return 1.0 / (1.0 + std::exp(-p));
    }
    const double e = std::exp(p);
    return e / (1.0 + e);
}

[[nodiscard]] inline double softplus(double p) { return std::max(p, 0.0) + std::log1p(std::exp(-std::abs(p))); }

[[nodiscard]] inline double activate(Activation a, double p) {
    switch (a) {
        case Activation::relu: return p > 0.0 ? p : 0.0;
        case Activation::sigmoid: return sigmoid(p);
        case Activation::softplus: return softplus(p);
    }
    return p;
}

[[nodiscard]] inline double activate_derivative(Activation a, double p) {
    switch (a) {
        case Activation::relu: return p > 0.0 ? 1.0 : 0.0;
        case Activation::sigmoid: {
            const double s = sigmoid(p);
            return s * (1.0 - s);
        }
        case Activation::softplus: return sigmoid(p);
    }
    return 1.0;
}

/// Per-dimension affine standardization of states and inputs, plus the scale of
/// normalized state derivatives used on the network output.
struct Normalization {
    Eigen::VectorXd state_shift, state_scale;
    Eigen::VectorXd input_shift, input_scale;
    Eigen::VectorXd output_scale;
    std::vector<std::string> clamped;  // dimensions whose scale was clamped to 1

    [[nodiscard]] static Normalization identity(int nx, int nu) {
        return {Eigen::VectorXd::Zero(nx), Eigen::VectorXd::Ones(nx), Eigen::VectorXd::Zero(nu),
                Eigen::VectorXd::Ones(nu), Eigen::VectorXd::Ones(nx), {}};
    }

    /// Statistics over every row of the given trajectories.
    [[nodiscard]] static Normalization from_trajectories(const std::vector<const Trajectory*>& trajs) {
        if (trajs.empty() || trajs.front()->samples() < 2) {
            throw DataError("normalization needs at least one trajectory with two samples");
        }
        const Eigen::Index nx = trajs.front()->states.cols();
        const Eigen::Index nu = trajs.front()->inputs.cols();
        Eigen::Index rows = 0;
        Eigen::Index transitions = 0;
        for (const auto* t : trajs) {
            rows += t->samples();
            transitions += t->samples() - 1;
        }
        Eigen::MatrixXd xs(rows, nx), us(rows, nu);
        Eigen::Index r = 0;
        for (const auto* t : trajs) {
            xs.middleRows(r, t->samples()) = t->states;
            us.middleRows(r, t->samples()) = t->inputs;
            r += t->samples();
        }
        Normalization norm;
        auto stats = [&](const Eigen::MatrixXd& m, Eigen::VectorXd& shift, Eigen::VectorXd& scale,
                         std::string_view what) {
            shift = m.colwise().mean().transpose();
            scale.resize(m.cols());
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                const double var = (m.col(c).array() - shift[c]).square().mean();
                scale[c] = std::sqrt(var);
                if (!(scale[c] > 1e-300) || !std::isfinite(scale[c])) {
                    scale[c] = 1.0;
                    norm.clamped.push_back(std::string(what) + "[" + std::to_string(c) + "]");
                }
            }
        };
        stats(xs, norm.state_shift, norm.state_scale, "state");
        stats(us, norm.input_shift, norm.input_scale, "input");

        Eigen::MatrixXd rates(transitions, nx);
        r = 0;
        for (const auto* t : trajs) {
            const double dt = t->times[1] - t->times[0];
            for (Eigen::Index k = 0; k + 1 < t->samples(); ++k, ++r) {
                rates.row(r) = ((t->states.row(k + 1) - t->states.row(k)).array() /
                                norm.state_scale.transpose().array() / dt);
            }
        }
        Eigen::VectorXd unused;
        stats(rates, unused, norm.output_scale, "output");
        if (!norm.clamped.empty()) {
            std::clog << "warning: zero-variance normalization dimensions clamped to scale 1:";
            for (const auto& c : norm.clamped) std::clog << ' ' << c;
            std::clog << '\n';
        }
        return norm;
    }

    [[nodiscard]] Eigen::VectorXd normalize_state(const Eigen::VectorXd& x) const {
        return ((x - state_shift).array() / state_scale.array()).matrix();
    }
    [[nodiscard]] Eigen::VectorXd denormalize_state(const Eigen::VectorXd& z) const {
        return (z.array() * state_scale.array() + state_shift.array()).matrix();
    }
    [[nodiscard]] Eigen::VectorXd normalize_input(const Eigen::VectorXd& u) const {
        return ((u - input_shift).array() / input_scale.array()).matrix();
    }
    /// Column-wise versions for (dim x batch) matrices.
    [[nodiscard]] Eigen::MatrixXd normalize_states(const Eigen::MatrixXd& x) const {
        return ((x.colwise() - state_shift).array().colwise() / state_scale.array()).matrix();
    }
    [[nodiscard]] Eigen::MatrixXd normalize_inputs(const Eigen::MatrixXd& u) const {
        return ((u.colwise() - input_shift).array().colwise() / input_scale.array()).matrix();
    }
};

struct LayerShape {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index offset = 0;  // of the weight; the bias follows immediately
};

class MlpModel {
public:
    MlpModel() = default;

    MlpModel(int state_dim, int input_dim, int hidden_layers, int width, Activation activation, Normalization norm)
        : state_dim_(state_dim),
          input_dim_(input_dim),
          hidden_layers_(hidden_layers),
          width_(width),
          activation_(activation),
          norm_(std::move(norm)) {
        if (hidden_layers < 1 || width < 1) {
            throw ConfigError("MLP needs at least one hidden layer of width >= 1");
        }
        if (norm_.state_scale.size() != state_dim || norm_.input_scale.size() != input_dim ||
            norm_.output_scale.size() != state_dim) {
            throw std::invalid_argument("normalization dimensions do not match the model");
        }
        Eigen::Index offset = 0;
        for (int l = 0; l <= hidden_layers; ++l) {
            const Eigen::Index rows = l == hidden_layers ? state_dim : width;
            const Eigen::Index cols = l == 0 ? state_dim + input_dim : width;
            layers_.push_back({rows, cols, offset});
            offset += rows * cols + rows;
        }
        params_ = Eigen::VectorXd::Zero(offset);
    }

    [[nodiscard]] int state_dim() const noexcept { return state_dim_; }
    [[nodiscard]] int input_dim() const noexcept { return input_dim_; }
    [[nodiscard]] int hidden_layers() const noexcept { return hidden_layers_; }
    [[nodiscard]] int width() const noexcept { return width_; }
    [[nodiscard]] Activation activation() const noexcept { return activation_; }
    [[nodiscard]] const Normalization& normalization() const noexcept { return norm_; }
    /// Layer count including the output layer.
    [[nodiscard]] int layer_count() const noexcept { return hidden_layers_ + 1; }
    [[nodiscard]] const LayerShape& layer(int l) const { return layers_[static_cast<std::size_t>(l)]; }

    [[nodiscard]] Eigen::VectorXd& params() noexcept { return params_; }
    [[nodiscard]] const Eigen::VectorXd& params() const noexcept { return params_; }

    [[nodiscard]] Eigen::Map<const Eigen::MatrixXd> weight(int l) const {
        const auto& s = layer(l);
        return {params_.data() + s.offset, s.rows, s.cols};
    }
    [[nodiscard]] Eigen::Map<Eigen::MatrixXd> weight(int l) {
        const auto& s = layer(l);
        return {params_.data() + s.offset, s.rows, s.cols};
    }
    [[nodiscard]] Eigen::Map<const Eigen::VectorXd> bias(int l) const {
        const auto& s = layer(l);
        return {params_.data() + s.offset + s.rows * s.cols, s.rows};
    }
    [[nodiscard]] Eigen::Map<Eigen::VectorXd> bias(int l) {
        const auto& s = layer(l);
        return {params_.data() + s.offset + s.rows * s.cols, s.rows};
    }

private:
    int state_dim_ = 0;
    int input_dim_ = 0;
    int hidden_layers_ = 0;
    int width_ = 0;
    Activation activation_ = Activation::softplus;
    Normalization norm_;
    std::vector<LayerShape> layers_;
    Eigen::VectorXd params_;
};

namespace detail {

/// Element-wise activation of a batch using vectorized exp/log1p; `slope`
/// receives the derivative when non-null.
inline void activate_batch(Activation act, const Eigen::MatrixXd& pre, Eigen::MatrixXd& out, Eigen::MatrixXd* slope) {
    const auto p = pre.array();
    switch (act) {
        case Activation::relu:
            out = p.max(0.0).matrix();
            if (slope) *slope = (p > 0.0).cast<double>().matrix();
            return;
        case Activation::sigmoid: {
            const Eigen::ArrayXXd e = (-p.abs()).exp();
            const Eigen::ArrayXXd s = (p >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
            if (slope) *slope = (s * (1.0 - s)).matrix();
            out = s.matrix();
            return;
        }
        case Activation::softplus: {
            const Eigen::ArrayXXd e = (-p.abs()).exp();
            if (slope) *slope = (p >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e)).matrix();
            // log1p(e) = log(u) * e / (u - 1) with u = 1 + e, exact when u rounds to 1
            const Eigen::ArrayXXd u = 1.0 + e;
            const Eigen::ArrayXXd log1p_e = (u == 1.0).select(e, u.log() * e / (u - 1.0));
            out = (p.max(0.0) + log1p_e).matrix();
            return;
        }
    }
}

}  // namespace detail

/// Saved intermediate values of one batched field evaluation.
struct FieldTape {
    Eigen::MatrixXd z;                         // stage input, normalized state
    std::vector<Eigen::MatrixXd> activations;  // h(P_l), l = 1..H
    std::vector<Eigen::MatrixXd> slopes;       // h'(P_l)
};

/// Normalized vector field of `model` with inputs frozen for one sampling interval.
/// Works on (N_x x B) batches; column j uses input column j.
class FrozenInputField {
public:
    FrozenInputField(const MlpModel& model, Eigen::MatrixXd inputs_normalized)
        : model_(&model), w_(std::move(inputs_normalized)) {
        const auto w1 = model.weight(0);
        input_term_ = (w1.rightCols(model.input_dim()) * w_).colwise() + model.bias(0);
    }

    [[nodiscard]] Eigen::MatrixXd operator()(double /*t*/, const Eigen::MatrixXd& z) const {
        return evaluate(z, nullptr);
    }

    [[nodiscard]] Eigen::MatrixXd evaluate(const Eigen::MatrixXd& z, FieldTape* tape) const {
        const auto& m = *model_;
        const Activation act = m.activation();
        Eigen::MatrixXd pre = m.weight(0).leftCols(m.state_dim()) * z + input_term_;
        if (tape) {
            tape->z = z;
            tape->activations.clear();
            tape->slopes.clear();
        }
        Eigen::MatrixXd a;
        for (int l = 1; l <= m.hidden_layers(); ++l) {
            if (tape) {
                Eigen::MatrixXd slope;
                detail::activate_batch(act, pre, a, &slope);
                tape->slopes.push_back(std::move(slope));
                tape->activations.push_back(a);
            } else {
                detail::activate_batch(act, pre, a, nullptr);
            }
            if (l < m.hidden_layers()) {
                pre = (m.weight(l) * a).colwise() + m.bias(l);
            }
        }
        const int out = m.hidden_layers();
        Eigen::MatrixXd dz = m.normalization().output_scale.asDiagonal() * ((m.weight(out) * a).colwise() + m.bias(out));
        if (!dz.allFinite()) {
            for (Eigen::Index j = 0; j < dz.cols(); ++j) {
                if (!dz.col(j).allFinite()) {
                    throw NumericalError("non-finite NODE output for sample " + std::to_string(j));
                }
            }
        }
        return dz;
    }

    /// Vector-Jacobian product: given the cotangent of the field output, adds the
    /// parameter gradient to `grad` and returns the cotangent of the stage input z.
    [[nodiscard]] Eigen::MatrixXd backward(const FieldTape& tape, const Eigen::MatrixXd& dz_bar,
                                           Eigen::VectorXd& grad) const {
        const auto& m = *model_;
        const int out = m.hidden_layers();
        auto grad_w = [&](int l) {
            const auto& s = m.layer(l);
            return Eigen::Map<Eigen::MatrixXd>(grad.data() + s.offset, s.rows, s.cols);
        };
        auto grad_b = [&](int l) {
            const auto& s = m.layer(l);
            return Eigen::Map<Eigen::VectorXd>(grad.data() + s.offset + s.rows * s.cols, s.rows);
        };
        const Eigen::MatrixXd o_bar = m.normalization().output_scale.asDiagonal() * dz_bar;
        grad_w(out).noalias() += o_bar * tape.activations.back().transpose();
        grad_b(out) += o_bar.rowwise().sum();
        Eigen::MatrixXd a_bar = m.weight(out).transpose() * o_bar;
        for (int l = m.hidden_layers(); l >= 1; --l) {
            const Eigen::MatrixXd p_bar = a_bar.cwiseProduct(tape.slopes[static_cast<std::size_t>(l - 1)]);
            const int layer = l - 1;
            grad_b(layer) += p_bar.rowwise().sum();
            if (layer > 0) {
                grad_w(layer).noalias() += p_bar * tape.activations[static_cast<std::size_t>(layer - 1)].transpose();
                a_bar = m.weight(layer).transpose() * p_bar;
            } else {
                auto gw = grad_w(0);
                gw.leftCols(m.state_dim()).noalias() += p_bar * tape.z.transpose();
                gw.rightCols(m.input_dim()).noalias() += p_bar * w_.transpose();
                return m.weight(0).leftCols(m.state_dim()).transpose() * p_bar;
            }
        }
        return {};  // unreachable: hidden_layers >= 1
    }

private:
    const MlpModel* model_;
    Eigen::MatrixXd w_;
    Eigen::MatrixXd input_term_;  // W_1[:, inputs] w + b_1
};

/// dx/dt in physical units for a single state and input.
[[nodiscard]] inline Eigen::VectorXd mlp_forward(const MlpModel& model, const Eigen::VectorXd& x,
                                                 const Eigen::VectorXd& u) {
    if (x.size() != model.state_dim() || u.size() != model.input_dim()) {
        throw std::invalid_argument("mlp_forward: expected state of size " + std::to_string(model.state_dim()) +
                                    " and input of size " + std::to_string(model.input_dim()));
    }
    const auto& norm = model.normalization();
    const FrozenInputField field(model, norm.normalize_input(u));
    const Eigen::VectorXd dz = field.evaluate(norm.normalize_state(x), nullptr);
    return (dz.array() * norm.state_scale.array()).matrix();
}

/// One-step-ahead transitions (x_k, u_k, x_{k+1}) in physical units, one column per sample.
struct TransitionBatch {
    Eigen::MatrixXd x0;
    Eigen::MatrixXd u;
    Eigen::MatrixXd x1;
    double dt = 0.0;

    [[nodiscard]] Eigen::Index size() const noexcept { return x0.cols(); }
};

[[nodiscard]] inline TransitionBatch make_transitions(const std::vector<const Trajectory*>& trajs) {
    TransitionBatch batch;
    Eigen::Index count = 0;
    for (const auto* t : trajs) count += std::max<Eigen::Index>(t->samples() - 1, 0);
    if (count == 0) {
        throw DataError("no transitions available");
    }
    const Eigen::Index nx = trajs.front()->states.cols();
    const Eigen::Index nu = trajs.front()->inputs.cols();
    batch.x0.resize(nx, count);
    batch.u.resize(nu, count);
    batch.x1.resize(nx, count);
    batch.dt = trajs.front()->times[1] - trajs.front()->times[0];
    Eigen::Index c = 0;
    for (const auto* t : trajs) {
        const double dt = t->times[1] - t->times[0];
        if (std::abs(dt - batch.dt) > 1e-12) {
            throw DataError("trajectories use different sampling intervals");
        }
        const Eigen::Index k = t->samples() - 1;
        batch.x0.middleCols(c, k) = t->states.topRows(k).transpose();
        batch.u.middleCols(c, k) = t->inputs.topRows(k).transpose();
        batch.x1.middleCols(c, k) = t->states.bottomRows(k).transpose();
        c += k;
    }
    return batch;
}

struct LossGradient {
    double loss = 0.0;
    Eigen::VectorXd gradient;
};

namespace detail {

[[nodiscard]] inline double batch_loss(const Eigen::MatrixXd& target, const Eigen::MatrixXd& predicted) {
    const Eigen::MatrixXd r = target - predicted;
    const Eigen::VectorXd per_sample = r.colwise().squaredNorm().transpose();
    for (Eigen::Index j = 0; j < per_sample.size(); ++j) {
        if (!std::isfinite(per_sample[j])) {
            throw NumericalError("non-finite loss contribution at sample " + std::to_string(j));
        }
    }
    return per_sample.sum() / static_cast<double>(r.cols());
}

/// Step sizes used to cover [0, dt] for the configured scheme.
[[nodiscard]] inline std::vector<double> step_plan(const FrozenInputField& field, const Eigen::MatrixXd& z0, double dt,
                                                   const SolverConfig& cfg) {
    if (cfg.scheme == Scheme::dopri5) {
        return solve_interval(field, 0.0, dt, z0, cfg).step_sizes;
    }
    const int n = fixed_step_count(0.0, dt, cfg.fixed_step);
    return std::vector<double>(static_cast<std::size_t>(n), dt / n);
}

}  // namespace detail

/// Mean squared one-step prediction error in normalized coordinates (no gradient).
[[nodiscard]] inline double one_step_loss(const MlpModel& model, const TransitionBatch& batch,
                                          const SolverConfig& cfg) {
    const auto& norm = model.normalization();
    const FrozenInputField field(model, norm.normalize_inputs(batch.u));
    const Eigen::MatrixXd z0 = norm.normalize_states(batch.x0);
    const Eigen::MatrixXd z1 = norm.normalize_states(batch.x1);
    const Eigen::MatrixXd predicted = solve_interval(field, 0.0, batch.dt, z0, cfg).end_state;
    return detail::batch_loss(z1, predicted);
}

/// Loss and its exact gradient with respect to model.params().
[[nodiscard]] inline LossGradient loss_and_gradient(const MlpModel& model, const TransitionBatch& batch,
                                                    const SolverConfig& cfg) {
    if (batch.size() == 0) {
        throw std::invalid_argument("loss_and_gradient: empty batch");
    }
    const auto& norm = model.normalization();
    const FrozenInputField field(model, norm.normalize_inputs(batch.u));
    const Eigen::MatrixXd z0 = norm.normalize_states(batch.x0);
    const Eigen::MatrixXd z1 = norm.normalize_states(batch.x1);
    const ButcherTableau& tab = tableau_for(cfg.scheme);
    const int stages = solution_stages(tab);
    const std::vector<double> steps = detail::step_plan(field, z0, batch.dt, cfg);

    // forward replay with tapes
    std::vector<std::vector<FieldTape>> tapes(steps.size(), std::vector<FieldTape>(static_cast<std::size_t>(stages)));
    std::vector<Eigen::MatrixXd> k(static_cast<std::size_t>(stages));
    Eigen::MatrixXd z = z0;
    for (std::size_t n = 0; n < steps.size(); ++n) {
        const double h = steps[n];
        for (int s = 0; s < stages; ++s) {
            k[s] = field.evaluate(stage_input(tab, s, z, h, k), &tapes[n][s]);
        }
        z = combine_stages(tab, z, h, k);
    }

    LossGradient out;
    out.loss = detail::batch_loss(z1, z);
    out.gradient = Eigen::VectorXd::Zero(model.params().size());

    // reverse sweep
    Eigen::MatrixXd z_bar = (-2.0 / static_cast<double>(batch.size())) * (z1 - z);
    std::vector<Eigen::MatrixXd> k_bar(static_cast<std::size_t>(stages));
    for (std::size_t n = steps.size(); n-- > 0;) {
        const double h = steps[n];
        for (int s = 0; s < stages; ++s) {
            k_bar[s] = (h * tab.b[s]) * z_bar;
        }
        Eigen::MatrixXd z_prev_bar = z_bar;
        for (int s = stages - 1; s >= 0; --s) {
            const Eigen::MatrixXd y_bar = field.backward(tapes[n][s], k_bar[s], out.gradient);
            for (int j = 0; j < s; ++j) {
                if (tab.a[s][j] != 0.0) {
                    k_bar[j] += (h * tab.a[s][j]) * y_bar;
                }
            }
            z_prev_bar += y_bar;
        }
        z_bar = std::move(z_prev_bar);
    }
    return out;
}

/// Bias-corrected Adam with constant learning rate.
struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    AdamState(Eigen::Index size, double lr)
        : m(Eigen::VectorXd::Zero(size)), v(Eigen::VectorXd::Zero(size)), learning_rate(lr) {}
};

inline void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
    if (params.size() != grads.size() || state.m.size() != params.size()) {
        throw std::invalid_argument("adam_step: shape mismatch");
    }
    ++state.step;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    params.array() -= state.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.epsilon);
}

/// Weights uniform in +-sqrt(1/fan_in), biases zero.
[[nodiscard]] inline MlpModel init_model(int state_dim, int input_dim, int hidden_layers, int width,
                                         Activation activation, std::uint64_t seed, Normalization norm) {
    MlpModel model(state_dim, input_dim, hidden_layers, width, activation, std::move(norm));
    std::mt19937_64 rng(seed);
    for (int l = 0; l < model.layer_count(); ++l) {
        const double bound = std::sqrt(1.0 / static_cast<double>(model.layer(l).cols));
        std::uniform_real_distribution<double> dist(-bound, bound);
        auto w = model.weight(l);
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                w(r, c) = dist(rng);
            }
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Checkpoint: JSON document
//
// {
//   "format": "droopid-node-checkpoint", "version": 1,
//   "state_dim": 11, "input_dim": 8, "hidden_layers": 2, "width": 12,
//   "activation": "softplus", "normalized_inputs": true,
//   "normalization": {"state_shift": [...], "state_scale": [...],
//                     "input_shift": [...], "input_scale": [...], "output_scale": [...]},
//   "layers": [{"weight": [[row], ...], "bias": [...]}, ...],   // hidden layers, then output
//   "solver": {"scheme": "euler", "fixed_step": 0.01, "rtol": ..., "atol": ..., "max_steps": ...}
// }

inline constexpr int kCheckpointVersion = 1;

[[nodiscard]] inline nlohmann::json to_json(const SolverConfig& cfg) {
    return {{"scheme", std::string(to_string(cfg.scheme))},
            {"fixed_step", cfg.fixed_step},
            {"rtol", cfg.rtol},
            {"atol", cfg.atol},
            {"max_steps", cfg.max_steps}};
}

[[nodiscard]] inline SolverConfig solver_from_json(const nlohmann::json& j) {
    SolverConfig cfg;
    cfg.scheme = parse_scheme(j.at("scheme").get<std::string>());
    cfg.fixed_step = j.at("fixed_step").get<double>();
    cfg.rtol = j.at("rtol").get<double>();
    cfg.atol = j.at("atol").get<double>();
    cfg.max_steps = j.at("max_steps").get<int>();
    return cfg;
}

namespace detail {
inline nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
inline Eigen::VectorXd json_vec(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
}  // namespace detail

struct Checkpoint {
    MlpModel model;
    SolverConfig solver;
};

[[nodiscard]] inline nlohmann::json checkpoint_json(const MlpModel& model, const SolverConfig& solver) {
    const auto& n = model.normalization();
    nlohmann::json j;
    j["format"] = "droopid-node-checkpoint";
    j["version"] = kCheckpointVersion;
    j["state_dim"] = model.state_dim();
    j["input_dim"] = model.input_dim();
    j["hidden_layers"] = model.hidden_layers();
    j["width"] = model.width();
    j["activation"] = std::string(to_string(model.activation()));
    j["normalized_inputs"] = true;
    j["normalization"] = {{"state_shift", detail::vec_json(n.state_shift)},
                          {"state_scale", detail::vec_json(n.state_scale)},
                          {"input_shift", detail::vec_json(n.input_shift)},
                          {"input_scale", detail::vec_json(n.input_scale)},
                          {"output_scale", detail::vec_json(n.output_scale)}};
    auto& layers = j["layers"] = nlohmann::json::array();
    for (int l = 0; l < model.layer_count(); ++l) {
        const auto w = model.weight(l);
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
            rows.push_back(detail::vec_json(w.row(r).transpose()));
        }
        layers.push_back({{"weight", rows}, {"bias", detail::vec_json(model.bias(l))}});
    }
    j["solver"] = to_json(solver);
    return j;
}

[[nodiscard]] inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "droopid-node-checkpoint" ||
            j.at("version").get<int>() != kCheckpointVersion) {
            throw DataError("not a supported NODE checkpoint");
        }
        const auto& jn = j.at("normalization");
        Normalization norm{detail::json_vec(jn.at("state_shift")), detail::json_vec(jn.at("state_scale")),
                           detail::json_vec(jn.at("input_shift")), detail::json_vec(jn.at("input_scale")),
                           detail::json_vec(jn.at("output_scale")), {}};
        MlpModel model(j.at("state_dim").get<int>(), j.at("input_dim").get<int>(), j.at("hidden_layers").get<int>(),
                       j.at("width").get<int>(), parse_activation(j.at("activation").get<std::string>()),
                       std::move(norm));
        const auto& layers = j.at("layers");
        if (static_cast<int>(layers.size()) != model.layer_count()) {
            throw DataError("checkpoint layer count mismatch");
        }
        for (int l = 0; l < model.layer_count(); ++l) {
            auto w = model.weight(l);
            const auto& rows = layers[static_cast<std::size_t>(l)].at("weight");
            if (static_cast<Eigen::Index>(rows.size()) != w.rows()) {
                throw DataError("checkpoint weight shape mismatch in layer " + std::to_string(l));
            }
            for (Eigen::Index r = 0; r < w.rows(); ++r) {
                const Eigen::VectorXd row = detail::json_vec(rows[static_cast<std::size_t>(r)]);
                if (row.size() != w.cols()) {
                    throw DataError("checkpoint weight shape mismatch in layer " + std::to_string(l));
                }
                w.row(r) = row.transpose();
            }
            const Eigen::VectorXd b = detail::json_vec(layers[static_cast<std::size_t>(l)].at("bias"));
            if (b.size() != w.rows()) {
                throw DataError("checkpoint bias shape mismatch in layer " + std::to_string(l));
            }
            model.bias(l) = b;
        }
        return {std::move(model), solver_from_json(j.at("solver"))};
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const MlpModel& model, const SolverConfig& solver) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write checkpoint " + path.string());
    }
    out << checkpoint_json(model, solver).dump(1) << '\n';
}

[[nodiscard]] inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("missing checkpoint " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace droopid
