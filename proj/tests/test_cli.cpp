/*
 * Copyright 2026 The nmgsim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "nmg/cli.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace nmg;
using nmg::testing::data_path;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "nmg");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    const int code = nmg::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("nmg_cli_" + name);
    fs::remove_all(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string l;
    std::getline(in, l);
    return l;
}

} // namespace

TEST(Cli, ValidateExitCodes) {
    EXPECT_EQ(invoke({"validate", "--config", data_path("nmg_test_system.json").string()}).code, 0);
    const auto empty = fresh_dir("empty");
    fs::create_directories(empty);
    std::ofstream(empty / "empty.json").close();
    const auto r = invoke({"validate", "--config", (empty / "empty.json").string()});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("line"), std::string::npos);
    EXPECT_EQ(invoke({"validate"}).code, 1);
    EXPECT_EQ(invoke({"frobnicate"}).code, 1);
    EXPECT_EQ(invoke({"validate", "--config", "/nonexistent/x.json"}).code, 2);
}

TEST(Cli, HalvedDroopValidatesWithWarning) {
    auto j = Json::parse(read_text_file(data_path("nmg_test_system.json")));
    j["dgs"][3]["D_P_Hz_per_kW"] = j["dgs"][3]["D_P_Hz_per_kW"].get<double>() * 0.5;
    const auto d = fresh_dir("halved");
    fs::create_directories(d);
    std::ofstream(d / "sys.json") << j.dump(2);
    const auto r = invoke({"validate", "--config", (d / "sys.json").string()});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE((r.out + r.err).find("D_P*P_max"), std::string::npos);
}

TEST(Cli, SimulateWritesFilesAndRefusesCollision) {
    const auto d = fresh_dir("sim");
    const std::vector<std::string> args{"simulate", "--scenario", data_path("small_run.json").string(), "--out",
                                        d.string()};
    const auto r = invoke(args);
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* f : {"trace.csv", "metrics.csv", "trace.gp", "events.log"}) EXPECT_TRUE(fs::exists(d / f)) << f;
    EXPECT_EQ(first_line(d / "trace.csv"),
              "t_s,f_sys_Hz,V_c_pu,P_PCC_MG1_kW,Q_PCC_MG1_kvar,P_DG1_kW,Q_DG1_kvar,P_DG2_kW,Q_DG2_kvar");
    EXPECT_EQ(first_line(d / "metrics.csv").rfind("t_s,f_error_Hz,V_c_error_pu", 0), 0u);
    const auto script = slurp(d / "trace.gp");
    EXPECT_NE(script.find("'trace.csv'"), std::string::npos);

    const auto before = slurp(d / "trace.csv");
    const auto again = invoke(args);
    EXPECT_EQ(again.code, 1);
    EXPECT_NE(again.err.find("--force"), std::string::npos);
    auto forced = args;
    forced.push_back("--force");
    EXPECT_EQ(invoke(forced).code, 0);
    EXPECT_EQ(slurp(d / "trace.csv"), before);
    for (const auto& e : fs::directory_iterator(d)) EXPECT_NE(e.path().extension(), ".tmp");
}

TEST(Cli, EquilibriumAndEigenOutputs) {
    const auto d = fresh_dir("eig");
    const auto cfg = data_path("small_mg.json").string();
    ASSERT_EQ(invoke({"equilibrium", "--config", cfg, "--levels", "all", "--out", (d / "eq").string()}).code, 0);
    EXPECT_TRUE(fs::exists(d / "eq" / "equilibrium.csv"));
    const auto r = invoke({"eigen", "--config", cfg, "--nmg", "--out", (d / "nmg").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(first_line(d / "nmg" / "nmg_eigen.csv"), "re_per_s,im_per_s,f_Hz,zeta,top5_participating_states");
    EXPECT_TRUE(fs::exists(d / "nmg" / "nmg_participation.csv"));
    EXPECT_TRUE(fs::exists(d / "nmg" / "spectrum.gp"));
    EXPECT_EQ(invoke({"eigen", "--config", cfg, "--levels", "bogus", "--out", (d / "x").string()}).code, 1);
    EXPECT_EQ(invoke({"eigen", "--config", cfg, "--single-mg", "MG7", "--out", (d / "y").string()}).code, 2);
}

TEST(Cli, SweepSortsReversedRange) {
    const auto d = fresh_dir("sweep");
    const auto r = invoke({"sweep", "--config", data_path("small_mg.json").string(), "--param", "dsc.c_q_per_s", "--from",
                        "120", "--to", "80", "--steps", "3", "--out", d.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("ascending"), std::string::npos);
    EXPECT_TRUE(fs::exists(d / "sweep_mode_1.csv"));
    EXPECT_TRUE(fs::exists(d / "root_locus.gp"));
    std::ifstream in(d / "sweep_mode_1.csv");
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "value,ok,re_per_s,im_per_s,f_Hz,zeta");
    std::vector<double> values;
    while (std::getline(in, line)) values.push_back(std::stod(line.substr(0, line.find(','))));
    EXPECT_EQ(values, (std::vector<double>{80, 100, 120}));
    EXPECT_EQ(invoke({"sweep", "--config", data_path("small_mg.json").string(), "--param", "dsc.nope", "--from", "1",
                   "--to", "2", "--out", (d / "bad").string()})
                  .code,
              2);
}

TEST(Cli, BinaryRerunIsByteIdentical) {
    const auto a = fresh_dir("bin_a"), b = fresh_dir("bin_b");
    const std::string base = std::string("\"") + NMG_CLI_PATH + "\" simulate --scenario \"" +
                             data_path("small_run.json").string() + "\" --out ";
    ASSERT_EQ(std::system((base + "\"" + a.string() + "\" > /dev/null").c_str()), 0);
    ASSERT_EQ(std::system((base + "\"" + b.string() + "\" > /dev/null").c_str()), 0);
    for (const char* f : {"trace.csv", "metrics.csv", "trace.gp", "events.log"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    EXPECT_NE(std::system((std::string("\"") + NMG_CLI_PATH + "\" validate > /dev/null 2>&1").c_str()), 0);
}
