#include <cmath>
#include <filesystem>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "droopid/node_ident.hpp"
#include "gradient_check.hpp"

using namespace droopid;

namespace {

const Dataset& shared_data() {
    static const Dataset data = [] {
        ScenarioSpec spec;
        spec.counts = {1, 1, 1, 0};
        spec.seed = 7;
        return generate_dataset(spec, reference_network(), SolverConfig{Scheme::rk4, 0.01});
    }();
    return data;
}

const Normalization& shared_norm() {
    static const Normalization norm = Normalization::from_trajectories(shared_data().split(Split::train));
    return norm;
}

}  // namespace

TEST(Activation, Anchors) {
    EXPECT_NEAR(activate(Activation::softplus, 0.0), std::log(2.0), 1e-15);
    EXPECT_DOUBLE_EQ(activate(Activation::sigmoid, 0.0), 0.5);
    EXPECT_EQ(activate(Activation::relu, -1.0), 0.0);
    EXPECT_EQ(activate(Activation::relu, 2.5), 2.5);
    // no overflow in the tails
    EXPECT_DOUBLE_EQ(activate(Activation::softplus, 800.0), 800.0);
    EXPECT_EQ(activate(Activation::softplus, -800.0), 0.0);
    EXPECT_EQ(activate(Activation::sigmoid, -800.0), 0.0);
    EXPECT_EQ(activate(Activation::sigmoid, 800.0), 1.0);
}

TEST(Activation, DerivativesMatchFiniteDifferences) {
    for (auto a : {Activation::sigmoid, Activation::softplus, Activation::relu}) {
        for (double p : {-5.0, -0.7, -0.01, 0.3, 2.0, 9.0}) {
            const double h = 1e-6;
            const double fd = (activate(a, p + h) - activate(a, p - h)) / (2 * h);
            EXPECT_NEAR(activate_derivative(a, p), fd, 1e-8) << to_string(a) << " at " << p;
        }
    }
}

TEST(Activation, BatchMatchesScalar) {
    Eigen::MatrixXd pre = Eigen::MatrixXd::Random(7, 9) * 30.0;
    pre(0, 0) = 0.0;
    pre(1, 1) = 1e-18;
    pre(2, 2) = -40.0;
    for (auto a : {Activation::relu, Activation::sigmoid, Activation::softplus}) {
        Eigen::MatrixXd out, slope;
        detail::activate_batch(a, pre, out, &slope);
        for (Eigen::Index i = 0; i < pre.size(); ++i) {
            const double p = pre(i);
            EXPECT_NEAR(out(i), activate(a, p), 1e-15 * std::max(1.0, std::abs(p))) << to_string(a) << " " << p;
            EXPECT_NEAR(slope(i), activate_derivative(a, p), 1e-15) << to_string(a) << " " << p;
        }
    }
}

TEST(Activation, NamesRoundTrip) {
    for (auto a : {Activation::relu, Activation::sigmoid, Activation::softplus}) {
        EXPECT_EQ(parse_activation(to_string(a)), a);
    }
    EXPECT_THROW((void)parse_activation("tanh"), ConfigError);
}

TEST(MlpForward, ZeroParametersGiveZeroField) {
    MlpModel model(11, 8, 2, 12, Activation::softplus, shared_norm());
    const auto& t = *shared_data().split(Split::train).front();
    for (int k : {0, 100, 4000}) {
        const Eigen::VectorXd dx = mlp_forward(model, t.states.row(k).transpose(), t.inputs.row(k).transpose());
        EXPECT_EQ(dx, Eigen::VectorXd::Zero(11));
    }
}

TEST(MlpForward, OutputBiasIsConstantPath) {
    MlpModel model(3, 2, 1, 4, Activation::softplus, Normalization::identity(3, 2));
    const Eigen::Vector3d c(0.5, -1.25, 3.0);
    model.bias(1) = c;
    EXPECT_EQ(mlp_forward(model, Eigen::Vector3d(0.1, 0.2, 0.3), Eigen::Vector2d::Zero()), Eigen::VectorXd(c));
}

TEST(MlpForward, ShapeMismatchThrows) {
    MlpModel model(3, 2, 1, 4, Activation::relu, Normalization::identity(3, 2));
    EXPECT_THROW((void)mlp_forward(model, Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(2)), std::invalid_argument);
    EXPECT_THROW((void)MlpModel(3, 2, 0, 4, Activation::relu, Normalization::identity(3, 2)), ConfigError);
    EXPECT_THROW((void)MlpModel(3, 2, 1, 4, Activation::relu, Normalization::identity(2, 2)), std::invalid_argument);
}

TEST(MlpForward, ConcurrentReadsAgree) {
    const auto model = init_model(11, 8, 2, 12, Activation::softplus, 5, shared_norm());
    const auto& t = *shared_data().split(Split::train).front();
    std::vector<Eigen::VectorXd> expected;
    for (int k = 0; k < 64; ++k) {
        expected.push_back(mlp_forward(model, t.states.row(k * 70).transpose(), t.inputs.row(k * 70).transpose()));
    }
    std::vector<int> mismatches(4, 0);
    std::vector<std::thread> workers;
    for (int w = 0; w < 4; ++w) {
        workers.emplace_back([&, w] {
            for (int rep = 0; rep < 20; ++rep) {
                for (int k = 0; k < 64; ++k) {
                    const auto dx =
                        mlp_forward(model, t.states.row(k * 70).transpose(), t.inputs.row(k * 70).transpose());
                    if (dx != expected[static_cast<std::size_t>(k)]) ++mismatches[static_cast<std::size_t>(w)];
                }
            }
        });
    }
    for (auto& th : workers) th.join();
    for (int m : mismatches) EXPECT_EQ(m, 0);
}

TEST(Normalization, RoundTrip) {
    const auto& norm = shared_norm();
    const auto& t = *shared_data().split(Split::val).front();
    for (int k = 0; k < t.samples(); k += 250) {
        const Eigen::VectorXd x = t.states.row(k).transpose();
        EXPECT_LT((norm.denormalize_state(norm.normalize_state(x)) - x).lpNorm<Eigen::Infinity>(), 1e-12);
    }
    EXPECT_TRUE(norm.clamped.empty());
    EXPECT_TRUE((norm.state_scale.array() > 0).all());
    EXPECT_TRUE((norm.input_scale.array() > 0).all());
    EXPECT_TRUE((norm.output_scale.array() > 0).all());
}

TEST(Normalization, TrainingStatistics) {
    const auto& t = *shared_data().split(Split::train).front();
    const auto& norm = shared_norm();
    const Eigen::MatrixXd z = norm.normalize_states(t.states.transpose());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        EXPECT_NEAR(z.row(r).mean(), 0.0, 1e-10);
        EXPECT_NEAR(std::sqrt(z.row(r).squaredNorm() / static_cast<double>(z.cols())), 1.0, 1e-10);
    }
}

TEST(Normalization, ConstantDataIsClamped) {
    Trajectory t;
    t.times = Eigen::VectorXd::LinSpaced(5, 0.0, 0.04);
    t.states = Eigen::MatrixXd::Constant(5, 3, 2.0);
    t.inputs = Eigen::MatrixXd::Constant(5, 2, 1.0);
    std::stringstream sink;
    auto* old = std::clog.rdbuf(sink.rdbuf());
    const auto norm = Normalization::from_trajectories({&t});
    std::clog.rdbuf(old);
    EXPECT_EQ(norm.state_scale, Eigen::VectorXd::Ones(3));
    EXPECT_EQ(norm.input_scale, Eigen::VectorXd::Ones(2));
    EXPECT_EQ(norm.output_scale, Eigen::VectorXd::Ones(3));
    EXPECT_EQ(norm.clamped.size(), 8u);
    EXPECT_NE(sink.str().find("warning"), std::string::npos);
}

TEST(InitModel, FanInBoundAndZeroBiases) {
    const auto model = init_model(11, 8, 2, 12, Activation::softplus, 123, shared_norm());
    EXPECT_LE(model.weight(0).cwiseAbs().maxCoeff(), std::sqrt(1.0 / 19.0));
    EXPECT_NEAR(std::sqrt(1.0 / 19.0), 0.22941573387056174, 1e-16);
    EXPECT_GT(model.weight(0).cwiseAbs().maxCoeff(), 0.9 * std::sqrt(1.0 / 19.0));
    EXPECT_LE(model.weight(1).cwiseAbs().maxCoeff(), std::sqrt(1.0 / 12.0));
    for (int l = 0; l < model.layer_count(); ++l) EXPECT_EQ(model.bias(l).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(model.params().size(), 19 * 12 + 12 + 12 * 12 + 12 + 12 * 11 + 11);
}

TEST(InitModel, SeedDeterminesWeights) {
    const auto a = init_model(11, 8, 2, 12, Activation::softplus, 9, shared_norm());
    const auto b = init_model(11, 8, 2, 12, Activation::softplus, 9, shared_norm());
    const auto c = init_model(11, 8, 2, 12, Activation::softplus, 10, shared_norm());
    EXPECT_EQ(a.params(), b.params());
    EXPECT_NE(a.params(), c.params());
}

TEST(Adam, ZeroGradientLeavesParameters) {
    AdamState s(3, 1e-3);
    Eigen::VectorXd p(3);
    p << 1.0, -2.0, 0.5;
    const Eigen::VectorXd before = p;
    adam_step(s, p, Eigen::VectorXd::Zero(3));
    EXPECT_EQ(p, before);
    EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    AdamState s(1, 0.001);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(1);
    adam_step(s, p, Eigen::VectorXd::Ones(1));
    EXPECT_NEAR(p[0], -0.001, 1e-6);
    EXPECT_NEAR(std::abs(p[0]), 0.001, 1e-6);
}

TEST(Adam, ConstantGradientKeepsDescending) {
    AdamState s(1, 0.01);
    Eigen::VectorXd p = Eigen::VectorXd::Constant(1, 3.0);
    const Eigen::VectorXd g = Eigen::VectorXd::Constant(1, 0.25);
    adam_step(s, p, g);
    const double first = p[0];
    adam_step(s, p, g);
    EXPECT_LT(first, 3.0);
    EXPECT_LT(p[0], first);
}

TEST(Adam, ShapeMismatchThrows) {
    AdamState s(2, 1e-3);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(2);
    EXPECT_THROW(adam_step(s, p, Eigen::VectorXd::Zero(3)), std::invalid_argument);
}

TEST(LossAndGradient, MatchesFiniteDifferences) {
    const auto& t = *shared_data().split(Split::train).front();
    for (const auto& c : gradcheck::gradient_cases(27, 2024)) {
        const auto r = gradcheck::check_gradient(c, t, shared_norm());
        EXPECT_TRUE(r.passed()) << to_string(c.activation) << "/" << to_string(c.scheme) << " H=" << c.hidden_layers
                                << " L=" << c.width << ": " << r.violations << " of " << r.coordinates
                                << " coordinates, worst relative error " << r.worst_relative;
        EXPECT_GT(r.loss, 0.0);
    }
}

TEST(LossAndGradient, SelfGeneratedDataHasZeroLoss) {
    for (auto scheme : {Scheme::euler, Scheme::rk4, Scheme::dopri5}) {
        const auto model = gradcheck::random_model({Activation::softplus, scheme, 2, 12, 31}, shared_norm(), 11, 8);
        const SolverConfig cfg{scheme, 0.01};
        auto batch = gradcheck::sample_batch(*shared_data().split(Split::train).front(), 3);
        // next states produced by the model itself, in normalized coordinates
        const auto& norm = model.normalization();
        const FrozenInputField field(model, norm.normalize_inputs(batch.u));
        const Eigen::MatrixXd z1 = solve_interval(field, 0.0, batch.dt, norm.normalize_states(batch.x0), cfg).end_state;
        batch.x1 = (z1.array().colwise() * norm.state_scale.array()).colwise() + norm.state_shift.array();
        const auto lg = loss_and_gradient(model, batch, cfg);
        EXPECT_LT(lg.loss, 1e-26) << to_string(scheme);
        EXPECT_LT(lg.gradient.lpNorm<Eigen::Infinity>(), 1e-11) << to_string(scheme);
    }
}

TEST(LossAndGradient, DuplicatedSampleMatchesSingle) {
    const auto& t = *shared_data().split(Split::train).front();
    const auto model = gradcheck::random_model({Activation::sigmoid, Scheme::rk4, 2, 12, 4}, shared_norm(), 11, 8);
    const SolverConfig cfg{Scheme::rk4, 0.01};
    const auto one = gradcheck::sample_batch(t, 17, 1);
    TransitionBatch many = one;
    many.x0 = one.x0.replicate(1, 6);
    many.u = one.u.replicate(1, 6);
    many.x1 = one.x1.replicate(1, 6);
    const auto a = loss_and_gradient(model, one, cfg);
    const auto b = loss_and_gradient(model, many, cfg);
    EXPECT_NEAR(a.loss, b.loss, 1e-15 * a.loss);
    EXPECT_LT((a.gradient - b.gradient).lpNorm<Eigen::Infinity>(), 1e-13 * a.gradient.lpNorm<Eigen::Infinity>());
}

TEST(LossAndGradient, NonFiniteTargetNamesSample) {
    const auto& t = *shared_data().split(Split::train).front();
    const auto model = gradcheck::random_model({}, shared_norm(), 11, 8);
    auto batch = gradcheck::sample_batch(t, 2);
    batch.x1(4, 3) = std::numeric_limits<double>::quiet_NaN();
    try {
        (void)loss_and_gradient(model, batch, SolverConfig{Scheme::euler, 0.01});
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 3"), std::string::npos) << e.what();
    }
}

TEST(LossAndGradient, OneStepLossAgrees) {
    const auto& t = *shared_data().split(Split::train).front();
    const auto model = gradcheck::random_model({Activation::relu, Scheme::euler, 2, 12, 8}, shared_norm(), 11, 8);
    const auto batch = make_transitions({&t});
    ASSERT_EQ(batch.size(), 5000);
    for (auto scheme : {Scheme::euler, Scheme::rk4, Scheme::dopri5}) {
        const SolverConfig cfg{scheme, 0.01};
        EXPECT_NEAR(loss_and_gradient(model, batch, cfg).loss, one_step_loss(model, batch, cfg), 1e-14);
    }
}

TEST(Checkpoint, RoundTrip) {
    const auto model = gradcheck::random_model({Activation::sigmoid, Scheme::rk4, 3, 7, 77}, shared_norm(), 11, 8);
    const SolverConfig solver{Scheme::dopri5, 0.01, 1e-7, 1e-9, 5000};
    const auto path = std::filesystem::temp_directory_path() / "droopid_test_ckpt" / "model.json";
    save_checkpoint(path, model, solver);
    const auto loaded = load_checkpoint(path);
    EXPECT_EQ(loaded.model.params(), model.params());
    EXPECT_EQ(loaded.model.hidden_layers(), 3);
    EXPECT_EQ(loaded.model.width(), 7);
    EXPECT_EQ(loaded.model.activation(), Activation::sigmoid);
    EXPECT_EQ(loaded.model.normalization().state_scale, model.normalization().state_scale);
    EXPECT_EQ(loaded.model.normalization().output_scale, model.normalization().output_scale);
    EXPECT_EQ(loaded.solver.scheme, Scheme::dopri5);
    EXPECT_EQ(loaded.solver.rtol, 1e-7);
    EXPECT_EQ(loaded.solver.max_steps, 5000);
    std::filesystem::remove_all(path.parent_path());
    EXPECT_THROW((void)load_checkpoint(path), DataError);
}

TEST(Checkpoint, MalformedIsDataError) {
    const auto model = gradcheck::random_model({}, shared_norm(), 11, 8);
    auto j = checkpoint_json(model, SolverConfig{});
    j["layers"][0]["bias"].push_back(1.0);
    EXPECT_THROW((void)checkpoint_from_json(j), DataError);
    auto k = checkpoint_json(model, SolverConfig{});
    k["activation"] = "tanh";
    EXPECT_THROW((void)checkpoint_from_json(k), DataError);
    auto v = checkpoint_json(model, SolverConfig{});
    v["version"] = 99;
    EXPECT_THROW((void)checkpoint_from_json(v), DataError);
}
