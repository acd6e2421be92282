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

// Command-line front end. Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.

#include "nmg/config.hpp"
#include "nmg/report.hpp"
#include "nmg/sim.hpp"
#include "nmg/smallsignal.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace nmg::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

class UsageError : public Error {
public:
    using Error::Error;
};

namespace detail {

namespace fs = std::filesystem;

inline void prepare_out_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw UsageError("output path '" + dir.string() + "' is not a directory");
        if (!fs::is_empty(dir) && !force)
            throw UsageError("output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
    } else {
        fs::create_directories(dir);
    }
}

inline SystemConfig load_checked(const fs::path& path, std::optional<double> dt, std::ostream& err) {
    auto cfg = load_system(path);
    if (dt) cfg.simulation.dt_s = *dt;
    const auto rep = validate(cfg);
    for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
    if (!rep.ok()) {
        for (const auto& e : rep.errors) err << "error: " << e << "\n";
        throw ConfigError("configuration has " + std::to_string(rep.errors.size()) + " error(s)");
    }
    return cfg;
}

inline ActivationFlags parse_levels(const std::string& s) {
    if (s == "pc") return ActivationFlags::primary_only();
    if (s == "dsc") return {true, false, false};
    if (s == "tc") return {true, true, false};
    if (s == "all") return ActivationFlags::all();
    throw UsageError("--levels must be pc, dsc, tc or all");
}

inline void write_modes(const fs::path& dir, const std::string& stem, const LinearModel& lm,
                        const std::vector<Mode>& ms) {
    write_file_atomic(dir / (stem + "_eigen.csv"), eigen_csv(lm, ms));
    write_file_atomic(dir / (stem + "_participation.csv"), participation_csv(lm, ms));
}

} // namespace detail

struct Options {
    std::string config, scenario, out = "out", levels = "all", param, single_mg;
    std::optional<double> dt;
    bool force = false, seedless = true, nmg_flag = false, compare = false;
    double f_max = 100.0, from = 0.0, to = 0.0;
    int steps = 1;
};

inline int cmd_validate(const Options& o, std::ostream& out, std::ostream& err) {
    const auto rep = validate_text(read_text_file(o.config));
    for (const auto& w : rep.warnings) out << "warning: " << w << "\n";
    for (const auto& e : rep.errors) out << "error: " << e << "\n";
    out << rep.errors.size() << " error(s), " << rep.warnings.size() << " warning(s)\n";
    (void)err;
    return rep.ok() ? kOk : kValidation;
}

inline int cmd_equilibrium(const Options& o, std::ostream& out, std::ostream& err) {
    const auto cfg = detail::load_checked(o.config, o.dt, err);
    detail::prepare_out_dir(o.out, o.force);
    SystemModel m(cfg);
    const auto flags = detail::parse_levels(o.levels);
    const auto r = find_equilibrium(m, flags);
    LiveSystem live(m);
    live.flags = flags;
    const auto obs = observe(live, r.x);
    CsvBuilder csv({"state", "value_si"});
    for (std::size_t j = 0; j < m.size(); ++j) csv.row({m.layout().labels[j], format_number(r.x[j])});
    write_file_atomic(std::filesystem::path(o.out) / "equilibrium.csv", csv.str());
    out << "residual " << format_number(r.residual) << " after " << format_number(r.integrated_s)
        << " s and " << r.newton_iterations << " Newton step(s)\n";
    out << "f_sys " << format_number(obs.f_sys_Hz) << " Hz, V_c " << format_number(obs.V_c_pu) << " pu\n";
    return kOk;
}

inline int cmd_simulate(const Options& o, std::ostream& out, std::ostream& err) {
    if (o.scenario.empty()) throw UsageError("simulate needs --scenario");
    std::optional<std::filesystem::path> over;
    if (!o.config.empty()) over = o.config;
    auto sc = load_scenario_file(o.scenario, over);
    if (o.dt) sc.dt_s = *o.dt;
    const auto rep = validate(sc.config);
    for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
    if (!rep.ok()) throw ConfigError(rep.errors.front());
    detail::prepare_out_dir(o.out, o.force);
    const auto tr = run(sc);
    const std::filesystem::path dir = o.out;
    write_file_atomic(dir / "trace.csv", trace_csv(tr));
    write_file_atomic(dir / "metrics.csv", metrics_csv(tr));
    write_file_atomic(dir / "trace.gp", trace_plot_script(tr, "trace.csv", sc.name.empty() ? "trace" : sc.name));
    std::string log;
    for (const auto& l : tr.event_log) log += l + "\n";
    for (const auto& w : tr.warnings) log += "warning: " + w + "\n";
    write_file_atomic(dir / "events.log", log);
    const auto m = metrics_at(tr, tr.samples() - 1);
    out << "t_end " << format_number(tr.t.back()) << " s: f_sys " << format_number(tr.f_sys_Hz.back())
        << " Hz, V_c " << format_number(tr.V_c_pu.back()) << " pu, PCC spreads P "
        << format_number(m.pcc_P_spread) << " Q " << format_number(m.pcc_Q_spread) << ", DG spreads P "
        << format_number(m.dg_P_spread_max) << " Q " << format_number(m.dg_Q_spread_max) << "\n";
    return kOk;
}

inline int cmd_eigen(const Options& o, std::ostream& out, std::ostream& err) {
    const auto cfg = detail::load_checked(o.config, o.dt, err);
    detail::prepare_out_dir(o.out, o.force);
    const std::filesystem::path dir = o.out;
    ModeOptions mo;
    mo.f_max_Hz = o.f_max;
    std::vector<std::string> plots;
    std::vector<LinearModel> singles;
    const bool want_single = !o.single_mg.empty() || o.compare;
    const bool want_nmg = o.nmg_flag || o.compare || o.single_mg.empty();
    if (want_single) {
        std::vector<std::string> ids;
        if (!o.single_mg.empty()) ids.push_back(o.single_mg);
        else
            for (const auto& mg : cfg.mgs) ids.push_back(mg.id);
        for (const auto& id : ids) {
            singles.push_back(single_mg_linear_model(cfg, id));
            const auto ms = modes(singles.back(), mo);
            detail::write_modes(dir, id, singles.back(), ms);
            plots.push_back(id + "_eigen.csv");
            out << id << ": " << ms.size() << " mode(s)\n";
        }
    }
    if (want_nmg) {
        SystemModel m(cfg);
        const auto lm = linearize_at_equilibrium(m, detail::parse_levels(o.levels));
        const auto ms = modes(lm, mo);
        detail::write_modes(dir, "nmg", lm, ms);
        plots.push_back("nmg_eigen.csv");
        double max_re = -INFINITY;
        for (const auto& x : ms) max_re = std::max(max_re, x.lambda.real());
        out << "nmg: " << ms.size() << " mode(s), max Re " << format_number(max_re) << " 1/s\n";
        if (o.compare) {
            CompareOptions co;
            co.f_max_Hz = o.f_max;
            const auto cmp = compare_spectra(singles, lm, co);
            CsvBuilder csv({"re_per_s", "im_per_s", "f_Hz", "zeta"});
            for (const auto& x : cmp.new_modes)
                csv.row(std::vector<double>{x.lambda.real(), x.lambda.imag(), x.f_Hz, x.zeta});
            write_file_atomic(dir / "new_modes.csv", csv.str());
            CsvBuilder mc({"single_model", "single_re_per_s", "single_im_per_s", "nmg_re_per_s", "nmg_im_per_s",
                           "distance_per_s", "matched"});
            for (const auto& s : cmp.single_modes)
                mc.row({singles[s.model].config_hash, format_number(s.single.real()), format_number(s.single.imag()),
                        s.nearest ? format_number(s.nearest->real()) : "", s.nearest ? format_number(s.nearest->imag()) : "",
                        format_number(s.distance), s.matched ? "1" : "0"});
            write_file_atomic(dir / "single_mg_matches.csv", mc.str());
            out << "new modes without a single-MG counterpart: " << cmp.new_modes.size() << "\n";
        }
    }
    write_file_atomic(dir / "spectrum.gp", spectrum_plot_script(plots, "spectrum"));
    return kOk;
}

inline int cmd_sweep(const Options& o, std::ostream& out, std::ostream& err) {
    if (o.param.empty()) throw UsageError("sweep needs --param");
    if (o.steps < 1) throw UsageError("--steps must be at least 1");
    const auto cfg = detail::load_checked(o.config, o.dt, err);
    detail::prepare_out_dir(o.out, o.force);
    std::vector<double> values;
    for (int k = 0; k < o.steps; ++k)
        values.push_back(o.steps == 1 ? o.from : o.from + (o.to - o.from) * k / (o.steps - 1));
    SweepOptions so;
    so.flags = detail::parse_levels(o.levels);
    so.dominant.f_max_Hz = o.f_max;
    const auto tr = sweep(cfg, o.param, values, so);
    if (tr.reordered) out << "note: range was descending; samples re-sorted ascending\n";
    const std::filesystem::path dir = o.out;
    std::vector<std::string> csvs;
    for (std::size_t t = 0; t < tr.tracks.size(); ++t) {
        const std::string name = "sweep_mode_" + std::to_string(t + 1) + ".csv";
        write_file_atomic(dir / name, sweep_track_csv(tr, t));
        csvs.push_back(name);
    }
    write_file_atomic(dir / "root_locus.gp", root_locus_script(csvs, o.param));
    std::size_t failed = 0;
    for (const auto& s : tr.samples)
        if (!s.ok) {
            ++failed;
            err << "sample " << format_number(s.value) << ": " << s.error << "\n";
        }
    out << tr.samples.size() << " sample(s), " << failed << " failed, " << tr.tracks.size() << " tracked mode(s)\n";
    return kOk;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Networked-microgrid dynamic phasor simulator and small-signal toolkit"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* c, bool needs_config) {
        auto* opt = c->add_option("--config", o.config, "system configuration (JSON)");
        if (needs_config) opt->required();
        c->add_option("--out", o.out, "output directory");
        c->add_flag("--force", o.force, "overwrite a non-empty output directory");
        c->add_option("--dt", o.dt, "integration step [s]");
        c->add_flag("--seedless-deterministic,!--no-seedless-deterministic", o.seedless,
                    "deterministic run without random numbers (default)");
    };
    auto* v = app.add_subcommand("validate", "check a configuration");
    v->add_option("--config", o.config, "system configuration (JSON)")->required();
    auto* e = app.add_subcommand("equilibrium", "find and write an equilibrium");
    common(e, true);
    e->add_option("--levels", o.levels, "pc | dsc | tc | all");
    auto* s = app.add_subcommand("simulate", "run a scenario");
    common(s, false);
    s->add_option("--scenario", o.scenario, "scenario document (JSON)")->required();
    auto* g = app.add_subcommand("eigen", "linearise and write modes");
    common(g, true);
    g->add_option("--levels", o.levels, "pc | dsc | tc | all");
    g->add_option("--single-mg", o.single_mg, "analyse one MG on its own");
    g->add_flag("--nmg", o.nmg_flag, "analyse the networked system");
    g->add_flag("--compare", o.compare, "compare single-MG and networked spectra");
    g->add_option("--f-max", o.f_max, "upper frequency of reported modes [Hz]");
    auto* w = app.add_subcommand("sweep", "track modes over a parameter range");
    common(w, true);
    w->add_option("--param", o.param, "dotted parameter path, e.g. dsc.c_p_per_s")->required();
    w->add_option("--from", o.from, "first value")->required();
    w->add_option("--to", o.to, "last value")->required();
    w->add_option("--steps", o.steps, "number of samples");
    w->add_option("--levels", o.levels, "pc | dsc | tc | all");
    w->add_option("--f-max", o.f_max, "upper frequency of tracked modes [Hz]");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& ex) {
        err << ex.what() << "\n";
        return kUsage;
    }
    try {
        if (!o.seedless) throw UsageError("only deterministic runs are supported");
        if (v->parsed()) return cmd_validate(o, out, err);
        if (e->parsed()) return cmd_equilibrium(o, out, err);
        if (s->parsed()) return cmd_simulate(o, out, err);
        if (g->parsed()) return cmd_eigen(o, out, err);
        if (w->parsed()) return cmd_sweep(o, out, err);
    } catch (const UsageError& ex) {
        err << "usage error: " << ex.what() << "\n";
        return kUsage;
    } catch (const ParseError& ex) {
        err << "parse error: " << ex.what() << "\n";
        return kValidation;
    } catch (const ConfigError& ex) {
        err << "invalid input: " << ex.what() << "\n";
        return kValidation;
    } catch (const UnknownId& ex) {
        err << "invalid input: " << ex.what() << "\n";
        return kValidation;
    } catch (const Error& ex) {
        err << "error: " << ex.what() << "\n";
        return kRuntime;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}

} // namespace nmg::cli
