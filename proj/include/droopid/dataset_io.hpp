#pragma once

// On-disk dataset layout:
//
//   <dir>/manifest.json          scenario, seeds, splits, spec hash, file list
//   <dir>/traj_0000.csv ...      one file per trajectory
//
// Trajectory CSV header for N nodes:
//   time,vd_1..vd_N,wd_1..wd_N,delta_12..delta_1N,pm_1..pm_N,v_1..v_N
// Values are written with 17 significant digits so a load reproduces the
// saved doubles exactly.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "droopid/config.hpp"
#include "droopid/datagen.hpp"
#include "droopid/errors.hpp"

namespace droopid {

inline constexpr int kDatasetFormatVersion = 1;

[[nodiscard]] inline std::vector<std::string> state_names(int node_count) {
    std::vector<std::string> names;
    for (int i = 2; i <= node_count; ++i) names.push_back("delta_1" + std::to_string(i));
    for (int i = 1; i <= node_count; ++i) names.push_back("pm_" + std::to_string(i));
    for (int i = 1; i <= node_count; ++i) names.push_back("v_" + std::to_string(i));
    return names;
}

[[nodiscard]] inline std::vector<std::string> input_names(int node_count) {
    std::vector<std::string> names;
    for (int i = 1; i <= node_count; ++i) names.push_back("vd_" + std::to_string(i));
    for (int i = 1; i <= node_count; ++i) names.push_back("wd_" + std::to_string(i));
    return names;
}

[[nodiscard]] inline std::vector<std::string> trajectory_columns(int node_count) {
    std::vector<std::string> cols{"time"};
    for (auto& n : input_names(node_count)) cols.push_back(std::move(n));
    for (auto& n : state_names(node_count)) cols.push_back(std::move(n));
    return cols;
}

/// Shortest-safe round-trip formatting for doubles.
[[nodiscard]] inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// FNV-1a, 64 bit.
[[nodiscard]] inline std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

[[nodiscard]] inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

[[nodiscard]] inline nlohmann::json to_json(const ScenarioSpec& spec) {
    return {{"horizon", spec.horizon},
            {"sample_dt", spec.sample_dt},
            {"step_count", spec.step_count},
            {"vd_min", spec.vd_min},
            {"vd_max", spec.vd_max},
            {"wd_min", spec.wd_min},
            {"wd_max", spec.wd_max},
            {"counts",
             {{"train", spec.counts.train},
              {"val", spec.counts.val},
              {"test", spec.counts.test},
              {"eval", spec.counts.eval}}},
            {"seed", spec.seed}};
}

[[nodiscard]] inline ScenarioSpec scenario_from_json(const nlohmann::json& j) {
    ScenarioSpec spec;
    spec.horizon = j.at("horizon").get<double>();
    spec.sample_dt = j.at("sample_dt").get<double>();
    spec.step_count = j.at("step_count").get<int>();
    spec.vd_min = j.at("vd_min").get<double>();
    spec.vd_max = j.at("vd_max").get<double>();
    spec.wd_min = j.at("wd_min").get<double>();
    spec.wd_max = j.at("wd_max").get<double>();
    const auto& c = j.at("counts");
    spec.counts = {c.at("train").get<int>(), c.at("val").get<int>(), c.at("test").get<int>(),
                   c.at("eval").get<int>()};
    spec.seed = j.at("seed").get<std::uint64_t>();
    return spec;
}

[[nodiscard]] inline std::string scenario_hash(const ScenarioSpec& spec) { return hex64(fnv1a(to_json(spec).dump())); }

inline void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
    const int n = static_cast<int>(traj.inputs.cols()) / 2;
    const auto cols = trajectory_columns(n);
    for (std::size_t c = 0; c < cols.size(); ++c) {
        out << (c ? "," : "") << cols[c];
    }
    out << '\n';
    for (Eigen::Index k = 0; k < traj.samples(); ++k) {
        out << format_double(traj.times[k]);
        for (Eigen::Index c = 0; c < traj.inputs.cols(); ++c) out << ',' << format_double(traj.inputs(k, c));
        for (Eigen::Index c = 0; c < traj.states.cols(); ++c) out << ',' << format_double(traj.states(k, c));
        out << '\n';
    }
}

/// Parses one trajectory CSV for a network of `node_count` nodes.
/// `expected_rows` < 0 disables the row-count check.
[[nodiscard]] inline Trajectory read_trajectory_csv(std::istream& in, int node_count, long expected_rows,
                                                    const std::string& name = "trajectory") {
    const auto cols = trajectory_columns(node_count);
    const int nu = 2 * node_count;
    const int nx = 3 * node_count - 1;
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(name + ": empty file");
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.size() != cols.size()) {
        throw DataError(name + ": line 1: header has " + std::to_string(header.size()) + " columns, expected " +
                        std::to_string(cols.size()) + " (1+" + std::to_string(nu) + "+" + std::to_string(nx) +
                        ") for " + std::to_string(node_count) + " nodes");
    }
    for (std::size_t c = 0; c < cols.size(); ++c) {
        if (header[c] != cols[c]) {
            throw DataError(name + ": line 1, column " + std::to_string(c + 1) + ": expected '" + cols[c] +
                            "', got '" + header[c] + "'");
        }
    }
    std::vector<std::vector<double>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            continue;
        }
        std::vector<double> row;
        row.reserve(cols.size());
        std::size_t pos = 0;
        int col = 0;
        while (true) {
            ++col;
            const std::size_t comma = line.find(',', pos);
            const std::string_view cell =
                std::string_view(line).substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            const auto value = detail::parse_double(cell);
            if (!value) {
                throw DataError(name + ": line " + std::to_string(line_no) + ", column " + std::to_string(col) +
                                ": cannot parse '" + std::string(cell) + "' as a number");
            }
            row.push_back(*value);
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (row.size() != cols.size()) {
            throw DataError(name + ": line " + std::to_string(line_no) + ", column " + std::to_string(row.size()) +
                            ": row has " + std::to_string(row.size()) + " values, expected " +
                            std::to_string(cols.size()));
        }
        rows.push_back(std::move(row));
    }
    if (expected_rows >= 0 && static_cast<long>(rows.size()) != expected_rows) {
        throw DataError(name + ": line " + std::to_string(line_no) + ": file has " + std::to_string(rows.size()) +
                        " data rows, expected " + std::to_string(expected_rows) + " (truncated?)");
    }
    Trajectory traj;
    const auto k = static_cast<Eigen::Index>(rows.size());
    traj.times.resize(k);
    traj.inputs.resize(k, nu);
    traj.states.resize(k, nx);
    for (Eigen::Index r = 0; r < k; ++r) {
        const auto& row = rows[static_cast<std::size_t>(r)];
        traj.times[r] = row[0];
        for (int c = 0; c < nu; ++c) traj.inputs(r, c) = row[1 + c];
        for (int c = 0; c < nx; ++c) traj.states(r, c) = row[1 + nu + c];
    }
    return traj;
}

[[nodiscard]] inline std::string trajectory_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "traj_%04d.csv", index);
    return buf;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
    std::filesystem::create_directories(dir);
    const int n = data.trajectories.empty() ? 0 : static_cast<int>(data.trajectories.front().inputs.cols()) / 2;
    nlohmann::json manifest;
    manifest["format_version"] = kDatasetFormatVersion;
    manifest["node_count"] = n;
    manifest["scenario"] = to_json(data.spec);
    manifest["spec_hash"] = scenario_hash(data.spec);
    manifest["log"] = data.log;
    auto& list = manifest["trajectories"] = nlohmann::json::array();
    for (const auto& traj : data.trajectories) {
        const auto file = trajectory_file_name(traj.index);
        list.push_back({{"index", traj.index},
                        {"file", file},
                        {"split", std::string(to_string(traj.split))},
                        {"seed", traj.seed},
                        {"samples", traj.samples()}});
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) {
            throw DataError("cannot write " + (dir / file).string());
        }
        write_trajectory_csv(out, traj);
    }
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + (dir / "manifest.json").string());
    }
    out << manifest.dump(2) << '\n';
}

[[nodiscard]] inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) {
        throw DataError("missing dataset manifest " + manifest_path.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }
    Dataset data;
    try {
        if (manifest.at("format_version").get<int>() != kDatasetFormatVersion) {
            throw DataError(manifest_path.string() + ": unsupported format_version");
        }
        const int n = manifest.at("node_count").get<int>();
        data.spec = scenario_from_json(manifest.at("scenario"));
        if (manifest.at("spec_hash").get<std::string>() != scenario_hash(data.spec)) {
            throw DataError(manifest_path.string() + ": spec_hash does not match the recorded scenario");
        }
        data.log = manifest.value("log", std::vector<std::string>{});
        for (const auto& entry : manifest.at("trajectories")) {
            const auto file = entry.at("file").get<std::string>();
            std::ifstream tin(dir / file, std::ios::binary);
            if (!tin) {
                throw DataError("missing trajectory file " + (dir / file).string());
            }
            Trajectory traj = read_trajectory_csv(tin, n, entry.at("samples").get<long>(), (dir / file).string());
            traj.index = entry.at("index").get<int>();
            traj.split = parse_split(entry.at("split").get<std::string>());
            traj.seed = entry.at("seed").get<std::uint64_t>();
            data.trajectories.push_back(std::move(traj));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }
    return data;
}

}  // namespace droopid
