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
#include "nmg/config.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace nmg;
using nmg::testing::data_path;

namespace {

std::string fixture_text() { return read_text_file(data_path("nmg_test_system.json")); }

bool mentions(const std::vector<std::string>& msgs, const std::string& needle) {
    return std::any_of(msgs.begin(), msgs.end(), [&](const std::string& m) { return m.find(needle) != std::string::npos; });
}

} // namespace

TEST(Config, FixtureValidatesClean) {
    const auto cfg = load_system(data_path("nmg_test_system.json"));
    const auto rep = validate(cfg);
    EXPECT_TRUE(rep.ok());
    EXPECT_TRUE(rep.errors.empty()) << (rep.errors.empty() ? "" : rep.errors.front());
    EXPECT_TRUE(rep.warnings.empty()) << (rep.warnings.empty() ? "" : rep.warnings.front());
    EXPECT_EQ(cfg.dgs.size(), 9u);
    EXPECT_EQ(cfg.mgs.size(), 3u);
}

TEST(Config, HalvedDroopOnOneDgWarns) {
    auto cfg = load_system(data_path("nmg_test_system.json"));
    cfg.dgs[4].D_P_Hz_per_kW *= 0.5;
    const auto rep = validate(cfg);
    EXPECT_TRUE(rep.ok());
    EXPECT_TRUE(mentions(rep.warnings, "D_P*P_max"));
}

TEST(Config, MgDroopInconsistencyWarns) {
    auto cfg = load_system(data_path("nmg_test_system.json"));
    cfg.mgs[1].D_Q_V_per_kvar *= 1.2;
    EXPECT_TRUE(mentions(validate(cfg).warnings, "MG layer: D_Q*Q_SMG"));
}

TEST(Config, EmptyAndMalformedTextRaiseParseError) {
    EXPECT_THROW(parse_system(""), ParseError);
    EXPECT_THROW(validate_text(""), ParseError);
    try {
        parse_system("{\n  \"name\": \"x\",\n  \"buses\": [\n}\n");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 4u);
    }
}

TEST(Config, UnknownOrUnitlessKeyIsRejected) {
    auto j = Json::parse(fixture_text());
    j["dgs"][0]["P_max"] = 60;
    EXPECT_THROW(parse_system_json(j), ConfigError);
    EXPECT_FALSE(validate_text(j.dump()).ok());
}

TEST(Config, MissingSpanningTreeIsAWarningNotAnError) {
    auto cfg = load_system(data_path("nmg_test_system.json"));
    for (auto& [id, g] : cfg.mg_graphs.front().pinning) g = 0.0;
    const auto rep = validate(cfg);
    EXPECT_TRUE(rep.ok());
    EXPECT_FALSE(rep.warnings.empty());
}

TEST(Config, StructuralErrors) {
    auto cfg = load_system(data_path("nmg_test_system.json"));
    cfg.lines[0].to = "nowhere";
    EXPECT_FALSE(validate(cfg).ok());

    cfg = load_system(data_path("nmg_test_system.json"));
    cfg.simulation.frame_anchor = "DG99";
    EXPECT_TRUE(mentions(validate(cfg).errors, "frame_anchor"));

    cfg = load_system(data_path("nmg_test_system.json"));
    cfg.references.critical_bus = cfg.mgs[0].pcc_bus;
    EXPECT_FALSE(validate(cfg).ok());

    cfg = load_system(data_path("nmg_test_system.json"));
    cfg.simulation.pi_output = "amps";
    EXPECT_TRUE(mentions(validate(cfg).errors, "pi_output"));
}

TEST(Config, RoundTripIsErrorIdentical) {
    const auto text = fixture_text();
    const auto cfg = parse_system(text);
    const auto again = parse_system(write_system(cfg));
    EXPECT_EQ(write_system(again), write_system(cfg));
    const auto a = validate_text(text), b = validate_text(write_system(cfg));
    EXPECT_EQ(a.errors, b.errors);
    EXPECT_EQ(a.warnings, b.warnings);

    auto broken = cfg;
    broken.dgs[2].P_max_kW = -1.0;
    broken.lines[1].from = "nowhere";
    const auto c = validate(broken), d = validate(parse_system(write_system(broken)));
    EXPECT_FALSE(c.ok());
    EXPECT_EQ(c.errors, d.errors);
    EXPECT_EQ(c.warnings, d.warnings);
}

TEST(Scenario, ShippedCasesParseAndValidate) {
    const auto cfg = load_system(data_path("nmg_test_system.json"));
    for (const char* name : {"case1.json", "case2.json", "case3.json"}) {
        const auto sc = load_scenario(data_path(name));
        EXPECT_EQ(sc.config_path, "nmg_test_system.json");
        EXPECT_GT(sc.t_end_s, 0.0);
        const auto rep = validate_scenario(sc, cfg);
        EXPECT_TRUE(rep.ok()) << name << ": " << (rep.errors.empty() ? "" : rep.errors.front());
        EXPECT_TRUE(std::is_sorted(sc.events.begin(), sc.events.end(),
                                   [](const auto& a, const auto& b) { return a.t_s < b.t_s; }));
    }
}

TEST(Scenario, BadEventsAreReported) {
    const auto cfg = load_system(data_path("nmg_test_system.json"));
    EXPECT_THROW(parse_scenario(R"({"config": "x", "t_end_s": 1, "events": [{"t_s": 0, "kind": "explode"}]})"),
                 ConfigError);
    const auto early = parse_scenario(
        R"({"config": "x", "t_end_s": 1, "events": [{"t_s": 0.1, "kind": "activate", "level": "DQC"}]})");
    EXPECT_TRUE(mentions(validate_scenario(early, cfg).errors, "DQC activated before"));
    const auto unknown = parse_scenario(
        R"({"config": "x", "t_end_s": 1, "events": [{"t_s": 0.1, "kind": "scale_load", "load": "nope", "factor": 2}]})");
    EXPECT_FALSE(validate_scenario(unknown, cfg).ok());
}
