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
#pragma once

// System and scenario documents. Every physical quantity carries its unit in
// the key name (P_max_kW, L_H, ...); conversion to SI happens in the model
// builder, never here.

#include "nmg/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace nmg {

using Json = nlohmann::ordered_json;

struct LevelConfig {
    std::string id;
    double V_kV = 0.0; // line-to-line rms
};

struct BusConfig {
    std::string id;
    std::string level;
    std::string mg; // empty for buses outside every MG
};

struct LineConfig {
    std::string id, from, to;
    double R_ohm = 0.0;
    std::optional<double> X_ohm;
    std::optional<double> L_H;
};

struct LoadConfig {
    std::string id, bus;
    std::optional<double> P_kW, Q_kvar;           // at the bus level's rated voltage
    std::optional<double> R_ohm, X_ohm, L_H;      // or explicit impedance
};

struct TransformerConfig {
    std::string id, lv_bus, mv_bus;
    double rating_MVA = 0.0;
    double u_k_pct = 0.0;
    double r_k_pct = 0.0;
};

struct DgConfig {
    std::string id, mg, bus;
    double P_max_kW = 0.0;
    double Q_max_kvar = 0.0;
    double D_P_Hz_per_kW = 0.0;
    double D_Q_V_per_kvar = 0.0;
    std::optional<double> L_c_H, R_c_ohm;
};

struct MgConfig {
    std::string id, pcc_bus, pcc_branch;
    double P_SMG_kW = 0.0;
    double Q_SMG_kvar = 0.0;
    double D_P_Hz_per_kW = 0.0;
    double D_Q_V_per_kvar = 0.0;
};

struct EdgeConfig {
    std::string from, to;
    double weight = 1.0;
};

struct GraphConfig {
    std::string id; // MG id, or "nmg" for the upper network
    bool bidirectional = true;
    std::vector<EdgeConfig> edges;
    std::vector<std::pair<std::string, double>> pinning;
};

struct LayerGains {
    double c_omega_per_s = 0.0;
    double c_p_per_s = 0.0;
    double c_v_per_s = 0.0;
    double c_q_per_s = 0.0;
    double k_p_pu = 0.0;
    double k_i_per_s = 0.0;
};

struct ReferenceConfig {
    double f_sys_Hz = 50.0;
    double V_c_pu = 1.0;
    std::string critical_bus;
};

struct SimulationConfig {
    double dt_s = 2e-4;
    double R_N_ohm = 1000.0;
    double omega_c_rad_per_s = 31.4;
    double L_c_H = 1.8e-3;
    double R_c_ohm = 0.05;
    std::string network_solver = "nodal"; // nodal | virtual_resistor
    std::string frame_anchor;
    std::string dqc_voltage_signal = "reference"; // reference | measured
    std::string pi_output = "level_base"; // level_base | volt: what one unit of PI output is worth
    double max_settle_s = 20.0;
};

struct SyncConfig {
    double df_Hz = 0.05;
    double dV_pu = 0.02;
    double dphase_deg = 5.0;
    double k_theta_per_s = 2.5;
    double a_omega_per_s = 50.0;
    double a_v_per_s = 50.0;
};

struct BreakerConfig {
    std::string id;
    std::string branch; // line, transformer or DG id
};

struct SystemConfig {
    std::string name;
    double f_n_Hz = 50.0;
    std::vector<LevelConfig> levels;
    std::vector<BusConfig> buses;
    std::vector<LineConfig> lines;
    std::vector<LoadConfig> loads;
    std::vector<TransformerConfig> transformers;
    std::vector<DgConfig> dgs;
    std::vector<MgConfig> mgs;
    std::vector<GraphConfig> mg_graphs;
    GraphConfig nmg_graph;
    LayerGains dsc, dqc;
    ReferenceConfig references;
    SimulationConfig simulation;
    SyncConfig sync;
    std::vector<BreakerConfig> breakers;

    const LevelConfig* find_level(const std::string& id) const { return find(levels, id); }
    const BusConfig* find_bus(const std::string& id) const { return find(buses, id); }
    const LineConfig* find_line(const std::string& id) const { return find(lines, id); }
    const LoadConfig* find_load(const std::string& id) const { return find(loads, id); }
    const TransformerConfig* find_transformer(const std::string& id) const { return find(transformers, id); }
    const DgConfig* find_dg(const std::string& id) const { return find(dgs, id); }
    const MgConfig* find_mg(const std::string& id) const { return find(mgs, id); }
    const BreakerConfig* find_breaker(const std::string& id) const { return find(breakers, id); }
    const GraphConfig* find_mg_graph(const std::string& mg) const { return find(mg_graphs, mg); }

    double bus_kV(const std::string& bus) const {
        const auto* b = find_bus(bus);
        if (!b) throw UnknownId("unknown bus '" + bus + "'");
        const auto* l = find_level(b->level);
        if (!l) throw UnknownId("unknown level '" + b->level + "'");
        return l->V_kV;
    }

    std::vector<const DgConfig*> dgs_of(const std::string& mg) const {
        std::vector<const DgConfig*> out;
        for (const auto& d : dgs)
            if (d.mg == mg) out.push_back(&d);
        return out;
    }

private:
    template <class T>
    static const T* find(const std::vector<T>& v, const std::string& id) {
        for (const auto& x : v)
            if (x.id == id) return &x;
        return nullptr;
    }
};

// ---------------------------------------------------------------------------
// Scenario documents

enum class ControlLevel { DSC, TC, DQC };

inline const char* to_string(ControlLevel l) {
    switch (l) {
    case ControlLevel::DSC: return "DSC";
    case ControlLevel::TC: return "TC";
    case ControlLevel::DQC: return "DQC";
    }
    return "?";
}

struct ActivateLevel {
    ControlLevel level;
};
struct ScaleLoad {
    std::string load;
    double factor = 1.0;
};
struct CommLinkSet {
    std::string layer; // MG id or "nmg"
    std::string from, to;
    bool up = false;
    bool both_directions = true;
};
struct BreakerSet {
    std::string breaker;
    bool open = true;
    bool with_sync = false;
    double not_before_s = 0.0; // earliest closing instant when synchronising
};
struct SetReference {
    std::string reference; // f_sys | V_c
    double value = 0.0;
};

using EventKind = std::variant<ActivateLevel, ScaleLoad, CommLinkSet, BreakerSet, SetReference>;

struct ScheduledEvent {
    double t_s = 0.0;
    EventKind kind;
};

struct ScenarioConfig {
    std::string name;
    std::string config_path;
    double t_end_s = 0.0;
    std::optional<double> dt_s;
    std::vector<ScheduledEvent> events;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, text.size());
    for (std::size_t k = 0; k < end; ++k) {
        if (text[k] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline Json parse_json_text(const std::string& text) {
    try {
        return Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        auto [line, col] = line_column(text, e.byte);
        throw ParseError("malformed JSON", line, col);
    }
}

// Reads one JSON object, tracking which keys were consumed so leftovers
// (typos, unit-less names) can be reported.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    double number(const std::string& key) {
        const Json& v = at(key);
        if (!v.is_number()) throw ConfigError(path_ + "." + key + ": expected a number");
        return v.get<double>();
    }
    double number(const std::string& key, double fallback) { return has(key) ? number(key) : fallback; }
    std::optional<double> optional_number(const std::string& key) {
        if (!has(key)) return std::nullopt;
        return number(key);
    }
    std::string string(const std::string& key) {
        const Json& v = at(key);
        if (!v.is_string()) throw ConfigError(path_ + "." + key + ": expected a string");
        return v.get<std::string>();
    }
    std::string string(const std::string& key, const std::string& fallback) {
        return has(key) ? string(key) : fallback;
    }
    bool boolean(const std::string& key, bool fallback) {
        if (!has(key)) return fallback;
        const Json& v = at(key);
        if (!v.is_boolean()) throw ConfigError(path_ + "." + key + ": expected a boolean");
        return v.get<bool>();
    }
    const Json& array(const std::string& key) {
        const Json& v = at(key);
        if (!v.is_array()) throw ConfigError(path_ + "." + key + ": expected an array");
        return v;
    }
    const Json& object(const std::string& key) {
        const Json& v = at(key);
        if (!v.is_object()) throw ConfigError(path_ + "." + key + ": expected an object");
        return v;
    }
    const std::string& path() const { return path_; }

    /// Throws on keys that were never read.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key()))
                throw ConfigError(path_ + ": unknown key '" + it.key() + "' (physical quantities need a unit suffix)");
    }

private:
    const Json& at(const std::string& key) {
        if (!j_.contains(key)) throw ConfigError(path_ + ": missing required key '" + key + "'");
        used_.insert(key);
        return j_.at(key);
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline LayerGains parse_gains(const Json& j, const std::string& path) {
    ObjectReader r(j, path);
    LayerGains g;
    g.c_omega_per_s = r.number("c_omega_per_s");
    g.c_p_per_s = r.number("c_p_per_s");
    g.c_v_per_s = r.number("c_v_per_s");
    g.c_q_per_s = r.number("c_q_per_s");
    g.k_p_pu = r.number("k_p_pu");
    g.k_i_per_s = r.number("k_i_per_s");
    r.finish();
    return g;
}

inline GraphConfig parse_graph(const Json& j, const std::string& id, const std::string& path) {
    ObjectReader r(j, path);
    GraphConfig g;
    g.id = id;
    g.bidirectional = r.boolean("bidirectional", true);
    const Json& edges = r.array("edges");
    for (std::size_t k = 0; k < edges.size(); ++k) {
        ObjectReader e(edges[k], path + ".edges[" + std::to_string(k) + "]");
        EdgeConfig ec;
        ec.from = e.string("from");
        ec.to = e.string("to");
        ec.weight = e.number("weight", 1.0);
        e.finish();
        g.edges.push_back(ec);
    }
    if (r.has("pinning")) {
        const Json& pin = r.object("pinning");
        for (auto it = pin.begin(); it != pin.end(); ++it) {
            if (!it.value().is_number()) throw ConfigError(path + ".pinning." + it.key() + ": expected a number");
            g.pinning.emplace_back(it.key(), it.value().get<double>());
        }
    }
    r.finish();
    return g;
}

} // namespace detail

inline SystemConfig parse_system_json(const Json& root) {
    using detail::ObjectReader;
    ObjectReader r(root, "$");
    SystemConfig cfg;
    cfg.name = r.string("name", "");
    if (r.has("nominal")) {
        ObjectReader n(r.object("nominal"), "$.nominal");
        cfg.f_n_Hz = n.number("f_Hz");
        n.finish();
    }
    {
        const Json& a = r.array("levels");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.levels[" + std::to_string(k) + "]");
            cfg.levels.push_back({e.string("id"), e.number("V_kV")});
            e.finish();
        }
    }
    {
        const Json& a = r.array("buses");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.buses[" + std::to_string(k) + "]");
            cfg.buses.push_back({e.string("id"), e.string("level"), e.string("mg", "")});
            e.finish();
        }
    }
    if (r.has("lines")) {
        const Json& a = r.array("lines");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.lines[" + std::to_string(k) + "]");
            LineConfig l;
            l.id = e.string("id");
            l.from = e.string("from");
            l.to = e.string("to");
            l.R_ohm = e.number("R_ohm", 0.0);
            l.X_ohm = e.optional_number("X_ohm");
            l.L_H = e.optional_number("L_H");
            e.finish();
            cfg.lines.push_back(l);
        }
    }
    if (r.has("loads")) {
        const Json& a = r.array("loads");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.loads[" + std::to_string(k) + "]");
            LoadConfig l;
            l.id = e.string("id");
            l.bus = e.string("bus");
            l.P_kW = e.optional_number("P_kW");
            l.Q_kvar = e.optional_number("Q_kvar");
            l.R_ohm = e.optional_number("R_ohm");
            l.X_ohm = e.optional_number("X_ohm");
            l.L_H = e.optional_number("L_H");
            e.finish();
            cfg.loads.push_back(l);
        }
    }
    if (r.has("transformers")) {
        const Json& a = r.array("transformers");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.transformers[" + std::to_string(k) + "]");
            TransformerConfig t;
            t.id = e.string("id");
            t.lv_bus = e.string("lv_bus");
            t.mv_bus = e.string("mv_bus");
            t.rating_MVA = e.number("rating_MVA");
            t.u_k_pct = e.number("u_k_pct");
            t.r_k_pct = e.number("r_k_pct");
            e.finish();
            cfg.transformers.push_back(t);
        }
    }
    {
        const Json& a = r.array("dgs");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.dgs[" + std::to_string(k) + "]");
            DgConfig d;
            d.id = e.string("id");
            d.mg = e.string("mg");
            d.bus = e.string("bus");
            d.P_max_kW = e.number("P_max_kW");
            d.Q_max_kvar = e.number("Q_max_kvar");
            d.D_P_Hz_per_kW = e.number("D_P_Hz_per_kW");
            d.D_Q_V_per_kvar = e.number("D_Q_V_per_kvar");
            d.L_c_H = e.optional_number("L_c_H");
            d.R_c_ohm = e.optional_number("R_c_ohm");
            e.finish();
            cfg.dgs.push_back(d);
        }
    }
    {
        const Json& a = r.array("mgs");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.mgs[" + std::to_string(k) + "]");
            MgConfig m;
            m.id = e.string("id");
            m.pcc_bus = e.string("pcc_bus");
            m.pcc_branch = e.string("pcc_branch");
            m.P_SMG_kW = e.number("P_SMG_kW");
            m.Q_SMG_kvar = e.number("Q_SMG_kvar");
            m.D_P_Hz_per_kW = e.number("D_P_Hz_per_kW");
            m.D_Q_V_per_kvar = e.number("D_Q_V_per_kvar");
            e.finish();
            cfg.mgs.push_back(m);
        }
    }
    {
        ObjectReader g(r.object("comm_graphs"), "$.comm_graphs");
        const Json& mg = g.object("mg");
        for (auto it = mg.begin(); it != mg.end(); ++it)
            cfg.mg_graphs.push_back(detail::parse_graph(it.value(), it.key(), "$.comm_graphs.mg." + it.key()));
        cfg.nmg_graph = detail::parse_graph(g.object("nmg"), "nmg", "$.comm_graphs.nmg");
        g.finish();
    }
    {
        ObjectReader g(r.object("controller_gains"), "$.controller_gains");
        cfg.dsc = detail::parse_gains(g.object("dsc"), "$.controller_gains.dsc");
        cfg.dqc = detail::parse_gains(g.object("dqc"), "$.controller_gains.dqc");
        g.finish();
    }
    {
        ObjectReader e(r.object("references"), "$.references");
        cfg.references.f_sys_Hz = e.number("f_sys_Hz", 50.0);
        cfg.references.V_c_pu = e.number("V_c_pu", 1.0);
        cfg.references.critical_bus = e.string("critical_bus");
        e.finish();
    }
    if (r.has("simulation")) {
        ObjectReader e(r.object("simulation"), "$.simulation");
        auto& s = cfg.simulation;
        s.dt_s = e.number("dt_s", s.dt_s);
        s.R_N_ohm = e.number("R_N_ohm", s.R_N_ohm);
        s.omega_c_rad_per_s = e.number("omega_c_rad_per_s", s.omega_c_rad_per_s);
        s.L_c_H = e.number("L_c_H", s.L_c_H);
        s.R_c_ohm = e.number("R_c_ohm", s.R_c_ohm);
        s.network_solver = e.string("network_solver", s.network_solver);
        s.frame_anchor = e.string("frame_anchor", "");
        s.dqc_voltage_signal = e.string("dqc_voltage_signal", s.dqc_voltage_signal);
        s.pi_output = e.string("pi_output", s.pi_output);
        s.max_settle_s = e.number("max_settle_s", s.max_settle_s);
        e.finish();
    }
    if (cfg.simulation.frame_anchor.empty() && !cfg.dgs.empty()) cfg.simulation.frame_anchor = cfg.dgs.front().id;
    if (r.has("sync")) {
        ObjectReader e(r.object("sync"), "$.sync");
        auto& s = cfg.sync;
        s.df_Hz = e.number("df_Hz", s.df_Hz);
        s.dV_pu = e.number("dV_pu", s.dV_pu);
        s.dphase_deg = e.number("dphase_deg", s.dphase_deg);
        s.k_theta_per_s = e.number("k_theta_per_s", s.k_theta_per_s);
        s.a_omega_per_s = e.number("a_omega_per_s", s.a_omega_per_s);
        s.a_v_per_s = e.number("a_v_per_s", s.a_v_per_s);
        e.finish();
    }
    if (r.has("breakers")) {
        const Json& a = r.array("breakers");
        for (std::size_t k = 0; k < a.size(); ++k) {
            ObjectReader e(a[k], "$.breakers[" + std::to_string(k) + "]");
            cfg.breakers.push_back({e.string("id"), e.string("branch")});
            e.finish();
        }
    }
    r.finish();
    return cfg;
}

inline SystemConfig parse_system(const std::string& text) { return parse_system_json(detail::parse_json_text(text)); }

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline SystemConfig load_system(const std::filesystem::path& path) { return parse_system(read_text_file(path)); }

// ---------------------------------------------------------------------------
// Writing (normalised, but keeps whichever load/line representation was given)

namespace detail {

inline void put_opt(Json& j, const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
}

inline Json write_gains(const LayerGains& g) {
    Json j;
    j["c_omega_per_s"] = g.c_omega_per_s;
    j["c_p_per_s"] = g.c_p_per_s;
    j["c_v_per_s"] = g.c_v_per_s;
    j["c_q_per_s"] = g.c_q_per_s;
    j["k_p_pu"] = g.k_p_pu;
    j["k_i_per_s"] = g.k_i_per_s;
    return j;
}

inline Json write_graph(const GraphConfig& g) {
    Json j;
    j["bidirectional"] = g.bidirectional;
    j["edges"] = Json::array();
    for (const auto& e : g.edges) j["edges"].push_back({{"from", e.from}, {"to", e.to}, {"weight", e.weight}});
    Json pin = Json::object();
    for (const auto& [id, gain] : g.pinning) pin[id] = gain;
    j["pinning"] = pin;
    return j;
}

} // namespace detail

inline Json write_system_json(const SystemConfig& cfg) {
    Json j;
    j["name"] = cfg.name;
    j["nominal"] = {{"f_Hz", cfg.f_n_Hz}};
    j["levels"] = Json::array();
    for (const auto& l : cfg.levels) j["levels"].push_back({{"id", l.id}, {"V_kV", l.V_kV}});
    j["buses"] = Json::array();
    for (const auto& b : cfg.buses) {
        Json e{{"id", b.id}, {"level", b.level}};
        if (!b.mg.empty()) e["mg"] = b.mg;
        j["buses"].push_back(e);
    }
    j["lines"] = Json::array();
    for (const auto& l : cfg.lines) {
        Json e{{"id", l.id}, {"from", l.from}, {"to", l.to}, {"R_ohm", l.R_ohm}};
        detail::put_opt(e, "X_ohm", l.X_ohm);
        detail::put_opt(e, "L_H", l.L_H);
        j["lines"].push_back(e);
    }
    j["loads"] = Json::array();
    for (const auto& l : cfg.loads) {
        Json e{{"id", l.id}, {"bus", l.bus}};
        detail::put_opt(e, "P_kW", l.P_kW);
        detail::put_opt(e, "Q_kvar", l.Q_kvar);
        detail::put_opt(e, "R_ohm", l.R_ohm);
        detail::put_opt(e, "X_ohm", l.X_ohm);
        detail::put_opt(e, "L_H", l.L_H);
        j["loads"].push_back(e);
    }
    j["transformers"] = Json::array();
    for (const auto& t : cfg.transformers)
        j["transformers"].push_back({{"id", t.id},
                                     {"lv_bus", t.lv_bus},
                                     {"mv_bus", t.mv_bus},
                                     {"rating_MVA", t.rating_MVA},
                                     {"u_k_pct", t.u_k_pct},
                                     {"r_k_pct", t.r_k_pct}});
    j["dgs"] = Json::array();
    for (const auto& d : cfg.dgs) {
        Json e{{"id", d.id},
               {"mg", d.mg},
               {"bus", d.bus},
               {"P_max_kW", d.P_max_kW},
               {"Q_max_kvar", d.Q_max_kvar},
               {"D_P_Hz_per_kW", d.D_P_Hz_per_kW},
               {"D_Q_V_per_kvar", d.D_Q_V_per_kvar}};
        detail::put_opt(e, "L_c_H", d.L_c_H);
        detail::put_opt(e, "R_c_ohm", d.R_c_ohm);
        j["dgs"].push_back(e);
    }
    j["mgs"] = Json::array();
    for (const auto& m : cfg.mgs)
        j["mgs"].push_back({{"id", m.id},
                            {"pcc_bus", m.pcc_bus},
                            {"pcc_branch", m.pcc_branch},
                            {"P_SMG_kW", m.P_SMG_kW},
                            {"Q_SMG_kvar", m.Q_SMG_kvar},
                            {"D_P_Hz_per_kW", m.D_P_Hz_per_kW},
                            {"D_Q_V_per_kvar", m.D_Q_V_per_kvar}});
    Json graphs;
    graphs["mg"] = Json::object();
    for (const auto& g : cfg.mg_graphs) graphs["mg"][g.id] = detail::write_graph(g);
    graphs["nmg"] = detail::write_graph(cfg.nmg_graph);
    j["comm_graphs"] = graphs;
    j["controller_gains"] = {{"dsc", detail::write_gains(cfg.dsc)}, {"dqc", detail::write_gains(cfg.dqc)}};
    j["references"] = {{"f_sys_Hz", cfg.references.f_sys_Hz},
                       {"V_c_pu", cfg.references.V_c_pu},
                       {"critical_bus", cfg.references.critical_bus}};
    const auto& s = cfg.simulation;
    j["simulation"] = {{"dt_s", s.dt_s},
                       {"R_N_ohm", s.R_N_ohm},
                       {"omega_c_rad_per_s", s.omega_c_rad_per_s},
                       {"L_c_H", s.L_c_H},
                       {"R_c_ohm", s.R_c_ohm},
                       {"network_solver", s.network_solver},
                       {"frame_anchor", s.frame_anchor},
                       {"dqc_voltage_signal", s.dqc_voltage_signal},
                       {"pi_output", s.pi_output},
                       {"max_settle_s", s.max_settle_s}};
    const auto& y = cfg.sync;
    j["sync"] = {{"df_Hz", y.df_Hz},
                 {"dV_pu", y.dV_pu},
                 {"dphase_deg", y.dphase_deg},
                 {"k_theta_per_s", y.k_theta_per_s},
                 {"a_omega_per_s", y.a_omega_per_s},
                 {"a_v_per_s", y.a_v_per_s}};
    j["breakers"] = Json::array();
    for (const auto& b : cfg.breakers) j["breakers"].push_back({{"id", b.id}, {"branch", b.branch}});
    return j;
}

inline std::string write_system(const SystemConfig& cfg) { return write_system_json(cfg).dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Validation

struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    bool ok() const noexcept { return errors.empty(); }
};

namespace detail {

inline bool same_within(const std::vector<double>& v, double rel) {
    if (v.size() < 2) return true;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    return std::abs(*hi - *lo) <= rel * std::abs(mean);
}

// Reachability from a single pinned root over the drawn arcs.
inline bool graph_config_has_pinned_tree(const GraphConfig& g, const std::vector<std::string>& nodes) {
    const std::size_t n = nodes.size();
    auto idx = [&](const std::string& id) -> int {
        for (std::size_t k = 0; k < n; ++k)
            if (nodes[k] == id) return static_cast<int>(k);
        return -1;
    };
    std::vector<std::vector<int>> out(n);
    for (const auto& e : g.edges) {
        const int a = idx(e.from), b = idx(e.to);
        if (a < 0 || b < 0 || !(e.weight > 0.0)) continue;
        out[a].push_back(b);
        if (g.bidirectional) out[b].push_back(a);
    }
    for (const auto& [id, gain] : g.pinning) {
        const int root = idx(id);
        if (root < 0 || !(gain > 0.0)) continue;
        std::vector<bool> seen(n, false);
        std::vector<int> stack{root};
        seen[root] = true;
        std::size_t count = 1;
        while (!stack.empty()) {
            int j = stack.back();
            stack.pop_back();
            for (int i : out[j])
                if (!seen[i]) {
                    seen[i] = true;
                    ++count;
                    stack.push_back(i);
                }
        }
        if (count == n) return true;
    }
    return false;
}

inline void check_graph(const GraphConfig& g, const std::vector<std::string>& nodes, const std::string& what,
                        ValidationReport& rep) {
    std::set<std::string> known(nodes.begin(), nodes.end());
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& e : g.edges) {
        if (!known.count(e.from) || !known.count(e.to)) {
            rep.errors.push_back(what + ": edge " + e.from + "->" + e.to + " references an unknown node");
            continue;
        }
        if (e.from == e.to) rep.errors.push_back(what + ": self-loop on " + e.from);
        if (!(e.weight > 0.0)) rep.errors.push_back(what + ": edge " + e.from + "->" + e.to + " needs weight > 0");
        if (!seen.insert({e.from, e.to}).second)
            rep.errors.push_back(what + ": duplicate edge " + e.from + "->" + e.to);
    }
    bool any_pin = false;
    for (const auto& [id, gain] : g.pinning) {
        if (!known.count(id)) rep.errors.push_back(what + ": pinning references unknown node " + id);
        if (gain < 0.0) rep.errors.push_back(what + ": negative pinning gain on " + id);
        any_pin = any_pin || gain > 0.0;
    }
    if (!any_pin) rep.warnings.push_back(what + ": no pinned node, the reference cannot be tracked");
    else if (!graph_config_has_pinned_tree(g, nodes))
        rep.warnings.push_back(what + ": graph has no pinned spanning tree");
}

} // namespace detail

inline ValidationReport validate(const SystemConfig& cfg) {
    ValidationReport rep;
    auto err = [&](std::string s) { rep.errors.push_back(std::move(s)); };
    auto positive = [&](double v, const std::string& what) {
        if (!(v > 0.0) || !std::isfinite(v)) err(what + " must be positive and finite");
    };

    positive(cfg.f_n_Hz, "nominal.f_Hz");

    std::set<std::string> ids;
    auto unique = [&](const std::string& id, const std::string& kind) {
        if (id.empty()) err(kind + " with empty id");
        else if (!ids.insert(kind + ":" + id).second) err("duplicate " + kind + " id '" + id + "'");
    };
    for (const auto& l : cfg.levels) {
        unique(l.id, "level");
        positive(l.V_kV, "level " + l.id + " V_kV");
    }
    std::set<std::string> mg_ids;
    for (const auto& m : cfg.mgs) mg_ids.insert(m.id);
    for (const auto& b : cfg.buses) {
        unique(b.id, "bus");
        if (!cfg.find_level(b.level)) err("bus " + b.id + ": unknown level '" + b.level + "'");
        if (!b.mg.empty() && !mg_ids.count(b.mg)) err("bus " + b.id + ": unknown mg '" + b.mg + "'");
    }
    auto level_of = [&](const std::string& bus) -> std::string {
        const auto* b = cfg.find_bus(bus);
        return b ? b->level : std::string();
    };
    auto bus_mg = [&](const std::string& bus) -> std::string {
        const auto* b = cfg.find_bus(bus);
        return b ? b->mg : std::string();
    };

    std::set<std::string> branch_ids;
    auto branch_unique = [&](const std::string& id) {
        if (!branch_ids.insert(id).second) err("duplicate branch id '" + id + "' (lines, transformers and DGs share a namespace)");
    };
    for (const auto& l : cfg.lines) {
        branch_unique(l.id);
        if (!cfg.find_bus(l.from) || !cfg.find_bus(l.to)) {
            err("line " + l.id + ": unknown endpoint");
            continue;
        }
        if (l.from == l.to) err("line " + l.id + ": both endpoints on " + l.from);
        if (level_of(l.from) != level_of(l.to)) err("line " + l.id + ": endpoints at different voltage levels");
        if (l.R_ohm < 0.0) err("line " + l.id + ": R_ohm must be >= 0");
        if (l.X_ohm.has_value() == l.L_H.has_value()) err("line " + l.id + ": give exactly one of X_ohm or L_H");
        else positive(l.X_ohm.value_or(l.L_H.value_or(0.0)), "line " + l.id + " reactance");
    }
    for (const auto& t : cfg.transformers) {
        branch_unique(t.id);
        if (!cfg.find_bus(t.lv_bus) || !cfg.find_bus(t.mv_bus)) {
            err("transformer " + t.id + ": unknown endpoint");
            continue;
        }
        if (level_of(t.lv_bus) == level_of(t.mv_bus)) err("transformer " + t.id + ": both windings on one level");
        else if (cfg.bus_kV(t.lv_bus) >= cfg.bus_kV(t.mv_bus))
            err("transformer " + t.id + ": lv_bus must be on the lower voltage level");
        positive(t.rating_MVA, "transformer " + t.id + " rating_MVA");
        if (!(t.r_k_pct > 0.0 && t.r_k_pct < t.u_k_pct && t.u_k_pct < 100.0))
            err("transformer " + t.id + ": need 0 < r_k < u_k < 100 %");
    }
    for (const auto& l : cfg.loads) {
        unique(l.id, "load");
        if (!cfg.find_bus(l.bus)) err("load " + l.id + ": unknown bus '" + l.bus + "'");
        const bool pq = l.P_kW || l.Q_kvar;
        const bool rx = l.R_ohm || l.X_ohm || l.L_H;
        if (pq == rx) {
            err("load " + l.id + ": give either P_kW/Q_kvar or R_ohm with X_ohm/L_H");
            continue;
        }
        if (pq) {
            if (!l.P_kW || !(*l.P_kW > 0.0)) err("load " + l.id + ": P_kW must be positive");
            if (l.Q_kvar && *l.Q_kvar < 0.0) err("load " + l.id + ": capacitive loads are not supported");
        } else {
            if (!l.R_ohm || !(*l.R_ohm > 0.0)) err("load " + l.id + ": R_ohm must be positive");
            if (l.X_ohm && l.L_H) err("load " + l.id + ": give at most one of X_ohm or L_H");
            if ((l.X_ohm && *l.X_ohm < 0.0) || (l.L_H && *l.L_H < 0.0))
                err("load " + l.id + ": capacitive loads are not supported");
        }
    }
    for (const auto& d : cfg.dgs) {
        branch_unique(d.id);
        unique(d.id, "dg");
        if (!mg_ids.count(d.mg)) err("dg " + d.id + ": unknown mg '" + d.mg + "'");
        if (!cfg.find_bus(d.bus)) err("dg " + d.id + ": unknown bus '" + d.bus + "'");
        else if (bus_mg(d.bus) != d.mg) err("dg " + d.id + ": bus " + d.bus + " is not inside " + d.mg);
        positive(d.P_max_kW, "dg " + d.id + " P_max_kW");
        positive(d.Q_max_kvar, "dg " + d.id + " Q_max_kvar");
        positive(d.D_P_Hz_per_kW, "dg " + d.id + " D_P_Hz_per_kW");
        positive(d.D_Q_V_per_kvar, "dg " + d.id + " D_Q_V_per_kvar");
        if (d.L_c_H) positive(*d.L_c_H, "dg " + d.id + " L_c_H");
        if (d.R_c_ohm && *d.R_c_ohm < 0.0) err("dg " + d.id + ": R_c_ohm must be >= 0");
    }
    std::string pcc_level;
    for (const auto& m : cfg.mgs) {
        unique(m.id, "mg");
        if (cfg.dgs_of(m.id).empty()) err("mg " + m.id + ": has no DG");
        positive(m.P_SMG_kW, "mg " + m.id + " P_SMG_kW");
        positive(m.Q_SMG_kvar, "mg " + m.id + " Q_SMG_kvar");
        positive(m.D_P_Hz_per_kW, "mg " + m.id + " D_P_Hz_per_kW");
        positive(m.D_Q_V_per_kvar, "mg " + m.id + " D_Q_V_per_kvar");
        if (!cfg.find_bus(m.pcc_bus)) {
            err("mg " + m.id + ": unknown pcc_bus '" + m.pcc_bus + "'");
            continue;
        }
        if (bus_mg(m.pcc_bus) != m.id) err("mg " + m.id + ": pcc_bus " + m.pcc_bus + " is not inside the MG");
        if (pcc_level.empty()) pcc_level = level_of(m.pcc_bus);
        else if (pcc_level != level_of(m.pcc_bus)) err("mg " + m.id + ": all PCC buses must share one voltage level");
        std::string a, b;
        if (const auto* l = cfg.find_line(m.pcc_branch)) {
            a = l->from;
            b = l->to;
        } else if (const auto* t = cfg.find_transformer(m.pcc_branch)) {
            a = t->lv_bus;
            b = t->mv_bus;
        } else {
            err("mg " + m.id + ": pcc_branch '" + m.pcc_branch + "' is not a line or transformer");
            continue;
        }
        if (a != m.pcc_bus && b != m.pcc_bus) err("mg " + m.id + ": pcc_branch does not touch the PCC bus");
        else {
            const std::string other = a == m.pcc_bus ? b : a;
            if (bus_mg(other) == m.id) err("mg " + m.id + ": pcc_branch must leave the MG");
        }
    }

    // droop consistency per layer (equal full-span drop across units)
    {
        std::vector<double> p, q;
        for (const auto& d : cfg.dgs) {
            p.push_back(d.D_P_Hz_per_kW * d.P_max_kW);
            q.push_back(d.D_Q_V_per_kvar * d.Q_max_kvar);
        }
        if (!detail::same_within(p, 0.005)) rep.warnings.push_back("DG layer: D_P*P_max differs by more than 0.5% across units");
        if (!detail::same_within(q, 0.005)) rep.warnings.push_back("DG layer: D_Q*Q_max differs by more than 0.5% across units");
        p.clear();
        q.clear();
        for (const auto& m : cfg.mgs) {
            p.push_back(m.D_P_Hz_per_kW * m.P_SMG_kW);
            q.push_back(m.D_Q_V_per_kvar * m.Q_SMG_kvar);
        }
        if (!detail::same_within(p, 0.005)) rep.warnings.push_back("MG layer: D_P*P_SMG differs by more than 0.5% across units");
        if (!detail::same_within(q, 0.005)) rep.warnings.push_back("MG layer: D_Q*Q_SMG differs by more than 0.5% across units");
    }

    // communication graphs
    for (const auto& m : cfg.mgs) {
        const auto* g = cfg.find_mg_graph(m.id);
        std::vector<std::string> nodes;
        for (const auto* d : cfg.dgs_of(m.id)) nodes.push_back(d->id);
        if (!g) {
            err("comm_graphs.mg: missing graph for " + m.id);
            continue;
        }
        detail::check_graph(*g, nodes, "comm_graphs.mg." + m.id, rep);
    }
    for (const auto& g : cfg.mg_graphs)
        if (!mg_ids.count(g.id)) err("comm_graphs.mg: graph for unknown mg '" + g.id + "'");
    {
        std::vector<std::string> nodes;
        for (const auto& m : cfg.mgs) nodes.push_back(m.id);
        detail::check_graph(cfg.nmg_graph, nodes, "comm_graphs.nmg", rep);
    }

    auto gains = [&](const LayerGains& g, const std::string& what) {
        positive(g.c_omega_per_s, what + ".c_omega_per_s");
        positive(g.c_p_per_s, what + ".c_p_per_s");
        positive(g.c_v_per_s, what + ".c_v_per_s");
        positive(g.c_q_per_s, what + ".c_q_per_s");
        if (g.k_p_pu < 0.0) err(what + ".k_p_pu must be >= 0");
        if (g.k_i_per_s < 0.0) err(what + ".k_i_per_s must be >= 0");
    };
    gains(cfg.dsc, "controller_gains.dsc");
    gains(cfg.dqc, "controller_gains.dqc");

    positive(cfg.references.f_sys_Hz, "references.f_sys_Hz");
    positive(cfg.references.V_c_pu, "references.V_c_pu");
    if (!cfg.find_bus(cfg.references.critical_bus))
        err("references.critical_bus: unknown bus '" + cfg.references.critical_bus + "'");
    else if (!bus_mg(cfg.references.critical_bus).empty())
        err("references.critical_bus must lie outside every MG");

    const auto& s = cfg.simulation;
    positive(s.dt_s, "simulation.dt_s");
    positive(s.R_N_ohm, "simulation.R_N_ohm");
    positive(s.omega_c_rad_per_s, "simulation.omega_c_rad_per_s");
    positive(s.L_c_H, "simulation.L_c_H");
    positive(s.max_settle_s, "simulation.max_settle_s");
    if (s.pi_output != "level_base" && s.pi_output != "volt")
        err("simulation.pi_output must be 'level_base' or 'volt'");
    if (s.R_c_ohm < 0.0) err("simulation.R_c_ohm must be >= 0");
    if (s.network_solver != "nodal" && s.network_solver != "virtual_resistor")
        err("simulation.network_solver must be 'nodal' or 'virtual_resistor'");
    if (s.dqc_voltage_signal != "reference" && s.dqc_voltage_signal != "measured")
        err("simulation.dqc_voltage_signal must be 'reference' or 'measured'");
    if (!cfg.find_dg(s.frame_anchor)) err("simulation.frame_anchor: unknown DG '" + s.frame_anchor + "'");

    positive(cfg.sync.df_Hz, "sync.df_Hz");
    positive(cfg.sync.dV_pu, "sync.dV_pu");
    positive(cfg.sync.dphase_deg, "sync.dphase_deg");
    positive(cfg.sync.k_theta_per_s, "sync.k_theta_per_s");
    positive(cfg.sync.a_omega_per_s, "sync.a_omega_per_s");
    positive(cfg.sync.a_v_per_s, "sync.a_v_per_s");

    for (const auto& b : cfg.breakers) {
        unique(b.id, "breaker");
        if (!branch_ids.count(b.branch)) err("breaker " + b.id + ": unknown branch '" + b.branch + "'");
        if (b.branch == s.frame_anchor) err("breaker " + b.id + ": the frame-anchor DG must stay connected");
    }
    if (cfg.dgs.empty()) err("system has no DG");
    if (cfg.mgs.empty()) err("system has no MG");
    return rep;
}

/// Parses and validates a document; structural problems become errors.
inline ValidationReport validate_text(const std::string& text) {
    const Json j = detail::parse_json_text(text); // ParseError propagates
    try {
        return validate(parse_system_json(j));
    } catch (const ConfigError& e) {
        ValidationReport rep;
        rep.errors.push_back(e.what());
        return rep;
    }
}

// ---------------------------------------------------------------------------
// Scenario parsing

inline ScenarioConfig parse_scenario_json(const Json& root) {
    using detail::ObjectReader;
    ObjectReader r(root, "$");
    ScenarioConfig sc;
    sc.name = r.string("name", "");
    sc.config_path = r.string("config");
    sc.t_end_s = r.number("t_end_s");
    sc.dt_s = r.optional_number("dt_s");
    if (r.has("events")) {
        const Json& a = r.array("events");
        for (std::size_t k = 0; k < a.size(); ++k) {
            const std::string path = "$.events[" + std::to_string(k) + "]";
            ObjectReader e(a[k], path);
            ScheduledEvent ev;
            ev.t_s = e.number("t_s");
            const std::string kind = e.string("kind");
            if (kind == "activate") {
                const std::string lvl = e.string("level");
                if (lvl == "DSC") ev.kind = ActivateLevel{ControlLevel::DSC};
                else if (lvl == "TC") ev.kind = ActivateLevel{ControlLevel::TC};
                else if (lvl == "DQC") ev.kind = ActivateLevel{ControlLevel::DQC};
                else throw ConfigError(path + ": unknown control level '" + lvl + "'");
            } else if (kind == "scale_load") {
                ev.kind = ScaleLoad{e.string("load"), e.number("factor")};
            } else if (kind == "comm_link") {
                CommLinkSet c;
                c.layer = e.string("layer");
                c.from = e.string("from");
                c.to = e.string("to");
                c.up = e.boolean("up", false);
                c.both_directions = e.boolean("both_directions", true);
                ev.kind = c;
            } else if (kind == "breaker") {
                BreakerSet b;
                b.breaker = e.string("breaker");
                b.open = e.boolean("open", true);
                b.with_sync = e.boolean("with_sync", false);
                b.not_before_s = e.number("not_before_s", 0.0);
                ev.kind = b;
            } else if (kind == "set_reference") {
                ev.kind = SetReference{e.string("reference"), e.number("value")};
            } else {
                throw ConfigError(path + ": unknown event kind '" + kind + "'");
            }
            e.finish();
            sc.events.push_back(std::move(ev));
        }
    }
    r.finish();
    std::stable_sort(sc.events.begin(), sc.events.end(),
                     [](const ScheduledEvent& a, const ScheduledEvent& b) { return a.t_s < b.t_s; });
    return sc;
}

inline ScenarioConfig parse_scenario(const std::string& text) {
    return parse_scenario_json(detail::parse_json_text(text));
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) { return parse_scenario(read_text_file(path)); }

/// Checks event references and activation order against a system.
inline ValidationReport validate_scenario(const ScenarioConfig& sc, const SystemConfig& cfg) {
    ValidationReport rep;
    auto err = [&](std::string s) { rep.errors.push_back(std::move(s)); };
    if (!(sc.t_end_s >= 0.0)) err("scenario t_end_s must be >= 0");
    if (sc.dt_s && !(*sc.dt_s > 0.0)) err("scenario dt_s must be positive");
    double t_dsc = -1.0, t_tc = -1.0;
    for (const auto& ev : sc.events) {
        if (ev.t_s < 0.0) err("event at negative time");
        std::visit(
            [&](const auto& k) {
                using K = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<K, ActivateLevel>) {
                    if (k.level == ControlLevel::DSC) t_dsc = t_dsc < 0 ? ev.t_s : t_dsc;
                    if (k.level == ControlLevel::TC) t_tc = t_tc < 0 ? ev.t_s : t_tc;
                    if (k.level == ControlLevel::DQC && (t_dsc < 0.0 || t_tc < 0.0))
                        err("DQC activated before DSC and TC");
                } else if constexpr (std::is_same_v<K, ScaleLoad>) {
                    if (!cfg.find_load(k.load)) err("scale_load: unknown load '" + k.load + "'");
                    if (!(k.factor >= 0.0)) err("scale_load: factor must be >= 0");
                } else if constexpr (std::is_same_v<K, CommLinkSet>) {
                    if (k.layer != "nmg" && !cfg.find_mg(k.layer)) err("comm_link: unknown layer '" + k.layer + "'");
                } else if constexpr (std::is_same_v<K, BreakerSet>) {
                    if (!cfg.find_breaker(k.breaker)) err("breaker: unknown breaker '" + k.breaker + "'");
                } else if constexpr (std::is_same_v<K, SetReference>) {
                    if (k.reference != "f_sys" && k.reference != "V_c")
                        err("set_reference: reference must be 'f_sys' or 'V_c'");
                    if (!(k.value > 0.0)) err("set_reference: value must be positive");
                }
            },
            ev.kind);
    }
    return rep;
}

} // namespace nmg
