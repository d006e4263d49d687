#include <random>
#include <string>

#include <gtest/gtest.h>

#include "droopid/pipeline.hpp"

using namespace droopid;

namespace {

// The reference network written out as a config file.
const char* kReferenceNetwork = R"(
[network]
nodes = 4

[line.12]
g = 2.0
b = -20.0
g_shunt = 0.02
b_shunt = 0.005
[line.23]
g = 2.0
b = -20.0
g_shunt = 0.02
b_shunt = 0.005
[line.42]   # reversed order is normalized
g = 2.0
b = -20.0
g_shunt = 0.02
b_shunt = 0.005
[line.34]
g = 2.0
b = -20.0
g_shunt = 0.02
b_shunt = 0.005

[unit.1]
k_p = 1.0
k_q = 0.1
tau_p = 1.0
tau_q = 1.0
p_d = 0.6
[unit.2]
k_p = 1.0
k_q = 0.1
tau_p = 0.3
tau_q = 0.3
p_d = -0.25
[unit.3]
k_p = 1.0
k_q = 0.1
tau_p = 0.3
tau_q = 0.3
p_d = -0.25
[unit.4]
k_p = 1.0
k_q = 0.1
tau_p = 1.0
tau_q = 1.0
p_d = 0.6

[load.1]
g_load = 0.38
b_load = -0.1
[load.3]
g_load = 0.38
b_load = -0.1
)";

std::string error_of(const std::string& text) {
    try {
        RunConfig cfg;
        apply_config(ConfigFile::parse_string(text), cfg);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST(ConfigFile, ParsesSectionsCommentsAndQuotes) {
    const auto file = ConfigFile::parse_string(
        "top = 1\n# comment\n[a.b]\nx = 2.5   # trailing\nname = \"has # hash\"\n\n[c]\nflag = true\n");
    EXPECT_EQ(file.section("").get_int("top"), 1);
    EXPECT_DOUBLE_EQ(file.section("a.b").get_double("x"), 2.5);
    EXPECT_EQ(file.section("a.b").get_string("name", ""), "has # hash");
    EXPECT_TRUE(file.section("c").get_bool("flag", false));
    EXPECT_FALSE(file.section("c").get_bool("missing", false));
    EXPECT_EQ(file.section_names(), (std::vector<std::string>{"a.b", "c"}));
    EXPECT_EQ(file.section("a.b").line(), 3);
    EXPECT_THROW((void)file.section("nope"), ConfigError);
}

TEST(ConfigFile, ErrorsCarryLineNumbers) {
    auto message = [](const std::string& text) {
        try {
            (void)ConfigFile::parse_string(text);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    EXPECT_NE(message("[a]\nx = 1\n[a]\n").find("line 3"), std::string::npos);
    EXPECT_NE(message("[a]\nx = 1\nx = 2\n").find("line 3: duplicate key"), std::string::npos);
    EXPECT_NE(message("[a]\njust words\n").find("line 2"), std::string::npos);
    EXPECT_NE(message("[broken\n").find("line 1"), std::string::npos);
    EXPECT_NE(message("[a]\n = 3\n").find("line 2: empty key"), std::string::npos);
}

TEST(ConfigFile, TypedAccessErrors) {
    const auto file = ConfigFile::parse_string("[s]\nn = 1.5\nb = yes\nd = abc\n");
    const auto& s = file.section("s");
    EXPECT_THROW((void)s.get_int("n"), ConfigError);
    EXPECT_DOUBLE_EQ(s.get_double("n"), 1.5);
    try {
        (void)s.get_bool("b", false);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
    try {
        (void)s.get_double("d");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
    }
    EXPECT_THROW((void)s.get_double("missing"), ConfigError);
}

TEST(ConfigFile, MissingFile) { EXPECT_THROW((void)ConfigFile::load("/nonexistent/droopid.toml"), ConfigError); }

TEST(ApplyConfig, OverridesFields) {
    RunConfig cfg = desk_preset();
    apply_config(ConfigFile::parse_string(R"(
[run]
seed = 42
jobs = 3
[paths]
dataset = "out/data"
[scenario]
eval = 5
freq_min = 49.9
[solver]
rtol = 1e-7
[train]
max_epochs = 300
patience = 30
[sindy]
lambda = 1e-4
exact_derivatives = true
)"),
                 cfg);
    EXPECT_EQ(cfg.seed, 42u);
    EXPECT_EQ(cfg.jobs, 3);
    EXPECT_EQ(cfg.paths.dataset, "out/data");
    EXPECT_EQ(cfg.paths.reports, "run/reports");
    EXPECT_EQ(cfg.scenario.counts.eval, 5);
    EXPECT_EQ(cfg.scenario.counts.train, 1);
    EXPECT_NEAR(cfg.scenario.wd_min, 2.0 * std::numbers::pi * 49.9, 1e-12);
    EXPECT_EQ(cfg.node_solver.rtol, 1e-7);
    EXPECT_EQ(cfg.train.max_epochs, 300);
    EXPECT_EQ(cfg.train.patience, 30);
    EXPECT_FALSE(cfg.selection.search);
    EXPECT_EQ(cfg.sindy.lambda, 1e-4);
    EXPECT_TRUE(cfg.sindy.exact_derivatives);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(ApplyConfig, SearchBudgetEnablesSearch) {
    RunConfig cfg;
    apply_config(ConfigFile::parse_string("[train]\nsearch_budget = 4\n"), cfg);
    EXPECT_TRUE(cfg.selection.search);
    EXPECT_EQ(cfg.selection.budget, 4);
}

TEST(ApplyConfig, RejectsUnknownNames) {
    EXPECT_NE(error_of("[run]\nseed = 1\n[trian]\nx = 1\n").find("line 3: unknown section [trian]"),
              std::string::npos);
    EXPECT_NE(error_of("[train]\nmax_epochs = 5\nlearning_rate = 0.01\n").find("line 3: unknown key 'learning_rate'"),
              std::string::npos);
    EXPECT_NE(error_of("[solver]\nscheme = rk5\n").find("rk5"), std::string::npos);
    EXPECT_NE(error_of("[run]\nseed = -3\n").find("line 2"), std::string::npos);
}

TEST(ApplyConfig, ValidationCatchesBadValues) {
    RunConfig cfg;
    apply_config(ConfigFile::parse_string("[train]\nmax_epochs = 10\npatience = 10\n"), cfg);
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = RunConfig{};
    apply_config(ConfigFile::parse_string("[run]\njobs = 0\n"), cfg);
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(NetworkConfig, ReferenceNetworkRoundTrip) {
    const auto file = ConfigFile::parse_string(kReferenceNetwork);
    const auto from_file = network_from_config(file);
    const auto reference = reference_network();
    ASSERT_EQ(from_file.node_count(), 4);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-0.3, 0.3);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::VectorXd x = reference.flat_state();
        for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += d(rng);
        Eigen::VectorXd u = reference.nominal_input();
        for (int i = 0; i < 4; ++i) u[reference.vd_index(i)] += 0.1 * d(rng);
        EXPECT_LT((rhs(x, u, from_file) - rhs(x, u, reference)).cwiseAbs().maxCoeff(), 1e-12);
    }
    RunConfig cfg;
    apply_config(file, cfg);
    EXPECT_EQ(cfg.network_source, "config");
}

TEST(NetworkConfig, Errors) {
    EXPECT_THROW((void)network_from_config(ConfigFile::parse_string("[network]\nnodes = 1\n")), ConfigError);
    std::string missing_unit = kReferenceNetwork;
    missing_unit.replace(missing_unit.find("[unit.3]"), 8, "[load.2]");
    EXPECT_THROW((void)network_from_config(ConfigFile::parse_string(missing_unit)), ConfigError);
    std::string outside = kReferenceNetwork;
    outside.replace(outside.find("[line.34]"), 9, "[line.35]");
    EXPECT_THROW((void)network_from_config(ConfigFile::parse_string(outside)), ConfigError);
    std::string self_loop = kReferenceNetwork;
    self_loop.replace(self_loop.find("[line.34]"), 9, "[line.33]");
    EXPECT_THROW((void)network_from_config(ConfigFile::parse_string(self_loop)), ConfigError);
}

TEST(RunConfig, DeskPresetAndSeeds) {
    const auto cfg = desk_preset();
    EXPECT_EQ(cfg.scenario.counts.train, 1);
    EXPECT_EQ(cfg.scenario.counts.eval, 10);
    EXPECT_EQ(cfg.train.max_epochs, 2000);
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(derive_seed(1, "node_euler"), derive_seed(1, "node_euler"));
    EXPECT_NE(derive_seed(1, "node_euler"), derive_seed(1, "node_rk4"));
    EXPECT_NE(derive_seed(1, "node_euler"), derive_seed(2, "node_euler"));
    EXPECT_EQ(config_hash(cfg), config_hash(desk_preset()));
    auto other = desk_preset();
    other.seed = 2;
    EXPECT_NE(config_hash(cfg), config_hash(other));
}
