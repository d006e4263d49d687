#pragma once

// Full-batch NODE training with early stopping and best-weight restoration,
// seeded random hyperparameter search, and closed-loop rollouts.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "droopid/datagen.hpp"
#include "droopid/errors.hpp"
#include "droopid/neural_field.hpp"
#include "droopid/ode_solve.hpp"

namespace droopid {

struct ModelShape {
    int hidden_layers = 2;
    int width = 12;
    Activation activation = Activation::softplus;
};

struct TrainConfig {
    int max_epochs = 10000;
    int patience = 100;
    double learning_rate = 1e-3;
    SolverConfig solver;
    std::uint64_t seed = 1;

    void validate() const {
        if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
        if (patience < 1 || patience >= max_epochs) throw ConfigError("patience must be in [1, max_epochs)");
        if (!(learning_rate >= 1e-4 && learning_rate <= 1e-2)) {
            throw ConfigError("learning rate must lie in [1e-4, 1e-2]");
        }
        solver.validate();
    }
};

/// Best hyperparameters per solver (2 hidden layers, softplus).
struct NodePreset {
    std::string name;
    ModelShape shape;
    double learning_rate = 0.0;
    Scheme scheme = Scheme::euler;
};

[[nodiscard]] inline const std::vector<NodePreset>& best_known_presets() {
    static const std::vector<NodePreset> presets{
        {"best-known-euler", {2, 12, Activation::softplus}, 3.99e-3, Scheme::euler},
        {"best-known-rk4", {2, 13, Activation::softplus}, 2.15e-3, Scheme::rk4},
        {"best-known-dopri5", {2, 12, Activation::softplus}, 4.36e-3, Scheme::dopri5},
    };
    return presets;
}

[[nodiscard]] inline const NodePreset& best_known_preset(Scheme scheme) {
    for (const auto& p : best_known_presets()) {
        if (p.scheme == scheme) return p;
    }
    throw ConfigError("no preset for scheme");
}

/// Stops once the validation loss has gone `patience` consecutive epochs without
/// strictly improving on the best so far. Ties keep the earlier epoch.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {}

    /// Feeds the loss of the next epoch (1-based numbering); returns true to stop.
    bool update(double val_loss) {
        ++epoch_;
        if (val_loss < best_loss_) {
            best_loss_ = val_loss;
            best_epoch_ = epoch_;
        }
        return epoch_ - best_epoch_ >= patience_;
    }

    /// True when the epoch just fed became the new best.
    [[nodiscard]] bool improved() const noexcept { return best_epoch_ == epoch_; }
    [[nodiscard]] int best_epoch() const noexcept { return best_epoch_; }
    [[nodiscard]] double best_loss() const noexcept { return best_loss_; }
    [[nodiscard]] int epoch() const noexcept { return epoch_; }

private:
    int patience_;
    int epoch_ = 0;
    int best_epoch_ = 0;
    double best_loss_ = std::numeric_limits<double>::infinity();
};

enum class TrainStatus { completed, early_stopped, diverged };

[[nodiscard]] inline std::string_view to_string(TrainStatus s) {
    switch (s) {
        case TrainStatus::completed: return "completed";
        case TrainStatus::early_stopped: return "early_stopped";
        case TrainStatus::diverged: return "diverged";
    }
    return "?";
}

struct TrainReport {
    std::vector<double> train_loss;  // per epoch, at the weights entering the epoch
    std::vector<double> val_loss;
    std::vector<double> epoch_seconds;
    int best_epoch = 0;  // 1-based
    double best_val_loss = std::numeric_limits<double>::infinity();
    double test_mse = std::numeric_limits<double>::quiet_NaN();
    TrainStatus status = TrainStatus::completed;
    std::string failure;
};

struct TrainResult {
    MlpModel model;  // weights of the best validation epoch
    TrainReport report;
};

struct DataSplits {
    std::vector<const Trajectory*> train;
    std::vector<const Trajectory*> val;
    std::vector<const Trajectory*> test;

    [[nodiscard]] static DataSplits from(const Dataset& data) {
        return {data.split(Split::train), data.split(Split::val), data.split(Split::test)};
    }
};

/// Epoch e evaluates the training loss, its gradient and the validation loss at
/// the current weights, then takes one Adam step. The returned model holds the
/// weights that produced the lowest validation loss.
[[nodiscard]] inline TrainResult train(MlpModel model, const DataSplits& splits, const TrainConfig& cfg) {
    cfg.validate();
    const TransitionBatch train_batch = make_transitions(splits.train);
    const TransitionBatch val_batch = make_transitions(splits.val);
    std::optional<TransitionBatch> test_batch;
    if (!splits.test.empty()) {
        test_batch = make_transitions(splits.test);
    }

    TrainResult result{model, {}};
    auto& report = result.report;
    AdamState adam(model.params().size(), cfg.learning_rate);
    EarlyStopping stopper(cfg.patience);
    report.status = TrainStatus::completed;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        LossGradient lg;
        double val = 0.0;
        try {
            lg = loss_and_gradient(model, train_batch, cfg.solver);
            val = one_step_loss(model, val_batch, cfg.solver);
            if (!std::isfinite(lg.loss) || !std::isfinite(val) || !lg.gradient.allFinite()) {
                throw NumericalError("non-finite loss or gradient");
            }
        } catch (const NumericalError& e) {
            report.status = TrainStatus::diverged;
            report.failure = "epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }
        report.train_loss.push_back(lg.loss);
        report.val_loss.push_back(val);
        const bool stop = stopper.update(val);
        if (stopper.improved()) {
            result.model.params() = model.params();
        }
        if (stop) {
            report.status = TrainStatus::early_stopped;
            report.epoch_seconds.push_back(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
            break;
        }
        adam_step(adam, model.params(), lg.gradient);
        report.epoch_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    report.best_epoch = stopper.best_epoch();
    report.best_val_loss = stopper.best_loss();
    if (test_batch && report.best_epoch > 0) {
        try {
            report.test_mse = one_step_loss(result.model, *test_batch, cfg.solver);
        } catch (const NumericalError& e) {
            report.failure += std::string(report.failure.empty() ? "" : "; ") + "test evaluation: " + e.what();
        }
    }
    return result;
}

struct SearchSpace {
    int min_layers = 2, max_layers = 10;
    int min_width = 10, max_width = 200;
    double min_lr = 1e-4, max_lr = 1e-2;
    std::vector<Activation> activations{Activation::relu, Activation::sigmoid, Activation::softplus};
};

struct TrialParams {
    ModelShape shape;
    double learning_rate = 0.0;
};

template <class Rng>
[[nodiscard]] TrialParams sample_trial(const SearchSpace& space, Rng& rng) {
    std::uniform_int_distribution<int> layers(space.min_layers, space.max_layers);
    std::uniform_int_distribution<int> width(space.min_width, space.max_width);
    std::uniform_real_distribution<double> log_lr(std::log(space.min_lr), std::log(space.max_lr));
    std::uniform_int_distribution<std::size_t> act(0, space.activations.size() - 1);
    TrialParams p;
    p.shape.hidden_layers = layers(rng);
    p.shape.width = width(rng);
    p.learning_rate = std::clamp(std::exp(log_lr(rng)), space.min_lr, space.max_lr);
    p.shape.activation = space.activations[act(rng)];
    return p;
}

struct Trial {
    int index = 0;
    TrialParams params;
    TrainReport report;
    bool failed = false;
    std::string error;
};

struct SearchResult {
    std::vector<Trial> trials;  // ranked by test one-step MSE, failures last
    std::optional<MlpModel> best_model;
};

/// Trains `budget` random configurations and ranks them by test-split one-step MSE.
[[nodiscard]] inline SearchResult random_search(const SearchSpace& space, const DataSplits& splits, int budget,
                                                std::uint64_t seed, const TrainConfig& base) {
    if (budget < 1) {
        throw ConfigError("search budget must be at least 1");
    }
    const auto norm = Normalization::from_trajectories(splits.train);
    const int nx = static_cast<int>(splits.train.front()->states.cols());
    const int nu = static_cast<int>(splits.train.front()->inputs.cols());
    std::mt19937_64 rng(seed);
    SearchResult result;
    std::vector<MlpModel> models;
    for (int i = 0; i < budget; ++i) {
        Trial trial;
        trial.index = i;
        trial.params = sample_trial(space, rng);
        TrainConfig cfg = base;
        cfg.learning_rate = trial.params.learning_rate;
        cfg.seed = mix_seed(seed ^ static_cast<std::uint64_t>(i + 1));
        try {
            auto model = init_model(nx, nu, trial.params.shape.hidden_layers, trial.params.shape.width,
                                    trial.params.shape.activation, cfg.seed, norm);
            auto trained = train(std::move(model), splits, cfg);
            trial.report = std::move(trained.report);
            trial.failed = !std::isfinite(trial.report.test_mse);
            if (trial.failed) trial.error = trial.report.failure.empty() ? "no finite test MSE" : trial.report.failure;
            models.push_back(std::move(trained.model));
        } catch (const Error& e) {
            trial.failed = true;
            trial.error = e.what();
            models.emplace_back();
        }
        result.trials.push_back(std::move(trial));
    }
    std::vector<std::size_t> order(result.trials.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& ta = result.trials[a];
        const auto& tb = result.trials[b];
        if (ta.failed != tb.failed) return !ta.failed;
        return ta.report.test_mse < tb.report.test_mse;
    });
    std::vector<Trial> ranked;
    for (auto i : order) ranked.push_back(result.trials[i]);
    if (!ranked.front().failed) {
        result.best_model = models[static_cast<std::size_t>(ranked.front().index)];
    }
    result.trials = std::move(ranked);
    return result;
}

/// Rollout of a field defined in normalized coordinates: states are normalized,
/// integrated under zero-order hold and mapped back to physical units.
/// `field(t, z, w)` returns dz/dt for normalized state z and normalized input w.
template <class Field>
[[nodiscard]] Eigen::MatrixXd simulate_normalized(Field&& field, const Normalization& norm, const Eigen::VectorXd& x0,
                                                  const Eigen::VectorXd& times, const Eigen::MatrixXd& inputs,
                                                  const SolverConfig& cfg) {
    const Eigen::MatrixXd w = norm.normalize_inputs(inputs.transpose()).transpose();
    const Eigen::MatrixXd z = simulate_piecewise(field, norm.normalize_state(x0), times, w, cfg);
    Eigen::MatrixXd x(z.rows(), z.cols());
    for (Eigen::Index k = 0; k < z.rows(); ++k) {
        x.row(k) = norm.denormalize_state(z.row(k).transpose()).transpose();
    }
    return x;
}

/// Closed-loop simulation of a trained NODE from x0 with recorded inputs.
[[nodiscard]] inline Eigen::MatrixXd simulate_node(const MlpModel& model, const Eigen::VectorXd& x0,
                                                   const Eigen::VectorXd& times, const Eigen::MatrixXd& inputs,
                                                   const SolverConfig& cfg) {
    auto field = [&model](double, const Eigen::VectorXd& z, const Eigen::VectorXd& w) -> Eigen::VectorXd {
        const FrozenInputField f(model, w);
        return f.evaluate(z, nullptr);
    };
    return simulate_normalized(field, model.normalization(), x0, times, inputs, cfg);
}

}  // namespace droopid
