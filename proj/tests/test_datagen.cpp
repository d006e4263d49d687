#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "droopid/datagen.hpp"
#include "droopid/dataset_io.hpp"

using namespace droopid;
namespace fs = std::filesystem;

namespace {

const SolverConfig kDataSolver{Scheme::rk4, 0.01, 1e-6, 1e-8, 100000};

ScenarioSpec small_spec(int eval = 2) {
    ScenarioSpec spec;
    spec.counts = {1, 1, 1, eval};
    spec.seed = 7;
    return spec;
}

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("droopid_test_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(InputSchedule, DegenerateRangesGiveNominalInput) {
    ScenarioSpec spec;
    spec.vd_min = spec.vd_max = 1.0;
    spec.wd_min = spec.wd_max = 2.0 * std::numbers::pi * 50.0;
    std::mt19937_64 rng(1);
    const auto schedule = sample_input_schedule(spec, 4, rng);
    const auto nominal = reference_network().nominal_input();
    for (int s = 0; s < spec.step_count; ++s) {
        EXPECT_EQ(Eigen::VectorXd(schedule.values.row(s).transpose()), nominal);
    }
}

TEST(InputSchedule, SeedDeterminesSchedule) {
    ScenarioSpec spec;
    std::mt19937_64 a(42), b(42), c(43);
    const auto sa = sample_input_schedule(spec, 4, a);
    const auto sb = sample_input_schedule(spec, 4, b);
    const auto sc = sample_input_schedule(spec, 4, c);
    EXPECT_EQ(sa.values, sb.values);
    EXPECT_NE(sa.values, sc.values);
}

TEST(InputSchedule, DrawsStayInRange) {
    ScenarioSpec spec;
    spec.step_count = 2500;  // 10^4 draws per input kind on 4 nodes
    std::mt19937_64 rng(9);
    const auto s = sample_input_schedule(spec, 4, rng);
    const auto vd = s.values.leftCols(4);
    const auto wd = s.values.rightCols(4);
    EXPECT_GE(vd.minCoeff(), 0.99);
    EXPECT_LE(vd.maxCoeff(), 1.01);
    EXPECT_GE(wd.minCoeff(), 2.0 * std::numbers::pi * 49.975);
    EXPECT_LE(wd.maxCoeff(), 2.0 * std::numbers::pi * 50.025);
    EXPECT_NEAR(vd.mean(), 1.0, 1e-3);
    // every node is redrawn at every step
    for (int r = 1; r < s.values.rows(); ++r) {
        for (int c = 0; c < 8; ++c) EXPECT_NE(s.values(r, c), s.values(r - 1, c));
    }
    EXPECT_DOUBLE_EQ(s.step_times[3], 3 * spec.step_period());
}

TEST(ScenarioSpec, Validation) {
    ScenarioSpec ok;
    EXPECT_NO_THROW(ok.validate());
    auto bad = ok;
    bad.horizon = 50.005;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = ok;
    bad.step_count = 7;  // 50/7 s is not a whole number of samples
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = ok;
    bad.vd_min = 1.02;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = ok;
    bad.counts.val = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = ok;
    bad.sample_dt = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(GenerateDataset, CountsAndSplitOrder) {
    const auto data = generate_dataset(small_spec(10), reference_network(), kDataSolver);
    ASSERT_EQ(data.trajectories.size(), 13u);
    EXPECT_EQ(data.trajectories[0].split, Split::train);
    EXPECT_EQ(data.trajectories[1].split, Split::val);
    EXPECT_EQ(data.trajectories[2].split, Split::test);
    for (int i = 3; i < 13; ++i) EXPECT_EQ(data.trajectories[i].split, Split::eval);
    EXPECT_EQ(data.split(Split::eval).size(), 10u);
    for (const auto& t : data.trajectories) {
        EXPECT_EQ(t.samples(), 5001);
        EXPECT_EQ(t.states.cols(), 11);
        EXPECT_EQ(t.inputs.cols(), 8);
    }
}

TEST(GenerateDataset, StartsAtEquilibriumWithHeldInputs) {
    const auto net = reference_network();
    const auto data = generate_dataset(small_spec(), net, kDataSolver);
    const auto x_eq = find_equilibrium(net);
    for (const auto& t : data.trajectories) {
        EXPECT_LT((t.states.row(0).transpose() - x_eq).lpNorm<Eigen::Infinity>(), 1e-10);
        for (int block = 0; block < 10; ++block) {
            const auto rows = t.inputs.middleRows(block * 500, 500);
            EXPECT_EQ((rows.rowwise() - rows.row(0)).cwiseAbs().maxCoeff(), 0.0);
        }
        EXPECT_NE(t.inputs.row(499), t.inputs.row(500));
        EXPECT_NEAR(t.times[5000], 50.0, 1e-12);
        EXPECT_NEAR(t.times[1] - t.times[0], 0.01, 1e-15);
    }
}

TEST(GenerateDataset, NominalInputsStayAtEquilibrium) {
    auto spec = small_spec(0);
    spec.vd_min = spec.vd_max = 1.0;
    spec.wd_min = spec.wd_max = kNominalFrequency;
    const auto net = reference_network();
    const auto data = generate_dataset(spec, net, kDataSolver);
    const auto x_eq = find_equilibrium(net);
    for (const auto& t : data.trajectories) {
        EXPECT_LT((t.states.rowwise() - x_eq.transpose()).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(GenerateDataset, SanityEnvelope) {
    const auto net = reference_network();
    const auto data = generate_dataset(small_spec(10), net, kDataSolver);
    for (const auto& t : data.trajectories) {
        for (int i = 0; i < 4; ++i) {
            EXPECT_LT((t.states.col(net.voltage_index(i)).array() - 1.0).abs().maxCoeff(), 0.05);
            EXPECT_LT(t.states.col(net.power_index(i)).cwiseAbs().maxCoeff(), 1.5);
        }
    }
}

TEST(GenerateDataset, Reproducible) {
    const auto net = reference_network();
    const auto a = generate_dataset(small_spec(2), net, kDataSolver);
    const auto b = generate_dataset(small_spec(2), net, kDataSolver);
    const auto more = generate_dataset(small_spec(5), net, kDataSolver);
    for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
        EXPECT_EQ(a.trajectories[i].states, b.trajectories[i].states);
        EXPECT_EQ(a.trajectories[i].states, more.trajectories[i].states);  // independent of the eval count
        EXPECT_EQ(a.trajectories[i].seed, b.trajectories[i].seed);
    }
    auto other = small_spec(2);
    other.seed = 8;
    EXPECT_NE(generate_dataset(other, net, kDataSolver).trajectories[0].inputs, a.trajectories[0].inputs);
}

TEST(GenerateDataset, SolverFailureRegeneratesThenGivesUp) {
    SolverConfig hopeless{Scheme::dopri5, 0.01, 1e-14, 1e-16, 1};
    std::stringstream sink;
    auto* old = std::clog.rdbuf(sink.rdbuf());
    EXPECT_THROW((void)generate_dataset(small_spec(0), reference_network(), hopeless), NumericalError);
    std::clog.rdbuf(old);
    EXPECT_NE(sink.str().find("regenerating"), std::string::npos);
}

TEST(TrajectorySeed, DistinctAcrossIndicesAndAttempts) {
    EXPECT_NE(trajectory_seed(1, 0, 0), trajectory_seed(1, 1, 0));
    EXPECT_NE(trajectory_seed(1, 0, 0), trajectory_seed(1, 0, 1));
    EXPECT_NE(trajectory_seed(1, 0, 0), trajectory_seed(2, 0, 0));
    EXPECT_EQ(trajectory_seed(5, 3, 2), trajectory_seed(5, 3, 2));
}

TEST(DatasetIo, RoundTripIsBitIdentical) {
    const auto data = generate_dataset(small_spec(1), reference_network(), kDataSolver);
    const auto dir = scratch_dir("roundtrip");
    save_dataset(dir, data);
    const auto loaded = load_dataset(dir);
    ASSERT_EQ(loaded.trajectories.size(), data.trajectories.size());
    for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
        const auto& a = data.trajectories[i];
        const auto& b = loaded.trajectories[i];
        EXPECT_EQ(a.times, b.times);
        EXPECT_EQ(a.inputs, b.inputs);
        EXPECT_EQ(a.states, b.states);
        EXPECT_EQ(a.seed, b.seed);
        EXPECT_EQ(a.split, b.split);
        EXPECT_EQ(a.index, b.index);
    }
    EXPECT_EQ(scenario_hash(loaded.spec), scenario_hash(data.spec));
    // saving again reproduces every byte
    const auto again = scratch_dir("roundtrip_again");
    save_dataset(again, loaded);
    EXPECT_EQ(slurp(dir / "manifest.json"), slurp(again / "manifest.json"));
    EXPECT_EQ(slurp(dir / "traj_0000.csv"), slurp(again / "traj_0000.csv"));
    fs::remove_all(dir);
    fs::remove_all(again);
}

TEST(DatasetIo, TruncatedFileIsRejected) {
    const auto data = generate_dataset(small_spec(0), reference_network(), kDataSolver);
    const auto dir = scratch_dir("truncated");
    save_dataset(dir, data);
    const auto text = slurp(dir / "traj_0001.csv");
    {
        std::ofstream out(dir / "traj_0001.csv", std::ios::binary);
        out << text.substr(0, text.size() / 2);
    }
    try {
        (void)load_dataset(dir);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(DatasetIo, WrongHeaderNamesExpectedColumns) {
    std::istringstream in("t,a,b,c\n0,1,2,3\n");
    try {
        (void)read_trajectory_csv(in, 4, -1);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("expected 20 (1+8+11)"), std::string::npos) << e.what();
    }
}

TEST(DatasetIo, BadCellReportsLineAndColumn) {
    const auto cols = trajectory_columns(2);
    std::string header;
    for (std::size_t c = 0; c < cols.size(); ++c) header += (c ? "," : "") + cols[c];
    std::istringstream in(header + "\n0,1,1,314,314,0,0.1,0.2,1,1\n0.01,1,1,314,x,0,0.1,0.2,1,1\n");
    try {
        (void)read_trajectory_csv(in, 2, -1);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3, column 5"), std::string::npos) << e.what();
    }
}

TEST(DatasetIo, TamperedManifestIsRejected) {
    const auto data = generate_dataset(small_spec(0), reference_network(), kDataSolver);
    const auto dir = scratch_dir("tampered");
    save_dataset(dir, data);
    auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    manifest["scenario"]["horizon"] = 40.0;
    std::ofstream(dir / "manifest.json") << manifest.dump();
    EXPECT_THROW((void)load_dataset(dir), DataError);
    fs::remove_all(dir);
    EXPECT_THROW((void)load_dataset(dir), DataError);
}

TEST(DatasetIo, ColumnNames) {
    const auto cols = trajectory_columns(4);
    ASSERT_EQ(cols.size(), 20u);
    EXPECT_EQ(cols.front(), "time");
    EXPECT_EQ(cols[1], "vd_1");
    EXPECT_EQ(cols[5], "wd_1");
    EXPECT_EQ(cols[9], "delta_12");
    EXPECT_EQ(cols[12], "pm_1");
    EXPECT_EQ(cols[16], "v_1");
}

TEST(DatasetIo, FormatDoubleRoundTrips) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> d(-1e3, 1e3);
    for (int i = 0; i < 1000; ++i) {
        const double v = d(rng) * std::pow(10.0, static_cast<int>(rng() % 20) - 10);
        EXPECT_EQ(std::stod(format_double(v)), v);
    }
}
