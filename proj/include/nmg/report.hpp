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

// Flat-file output: CSV tables and gnuplot scripts. Every file is written
// whole to a temporary sibling and renamed into place.

#include "nmg/sim.hpp"
#include "nmg/smallsignal.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace nmg {

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
        out << content;
        out.flush();
        if (!out) throw Error("write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw Error("cannot move output into '" + path.string() + "'");
    }
}

// ---------------------------------------------------------------------------
// CSV

class CsvBuilder {
public:
    explicit CsvBuilder(std::vector<std::string> header) : cols_(header.size()) { line(header); }

    void row(const std::vector<double>& values) {
        if (values.size() != cols_) throw std::invalid_argument("CsvBuilder: row width mismatch");
        std::vector<std::string> s;
        s.reserve(values.size());
        for (double v : values) s.push_back(format_number(v));
        line(s);
    }
    void row(const std::vector<std::string>& cells) {
        if (cells.size() != cols_) throw std::invalid_argument("CsvBuilder: row width mismatch");
        line(cells);
    }
    std::string str() const { return out_.str(); }

private:
    void line(const std::vector<std::string>& cells) {
        for (std::size_t k = 0; k < cells.size(); ++k) {
            if (k) out_ << ',';
            const bool quote = cells[k].find_first_of(",\"\n") != std::string::npos;
            if (!quote) {
                out_ << cells[k];
                continue;
            }
            out_ << '"';
            for (char c : cells[k]) {
                if (c == '"') out_ << '"';
                out_ << c;
            }
            out_ << '"';
        }
        out_ << '\n';
    }

    std::size_t cols_;
    std::ostringstream out_;
};

inline std::string trace_csv(const Trace& tr) {
    std::vector<std::string> h{"t_s", "f_sys_Hz", "V_c_pu"};
    for (const auto& id : tr.mg_ids) {
        h.push_back("P_PCC_" + id + "_kW");
        h.push_back("Q_PCC_" + id + "_kvar");
    }
    for (const auto& id : tr.dg_ids) {
        h.push_back("P_" + id + "_kW");
        h.push_back("Q_" + id + "_kvar");
    }
    CsvBuilder csv(h);
    for (std::size_t s = 0; s < tr.samples(); ++s) {
        std::vector<double> r{tr.t[s], tr.f_sys_Hz[s], tr.V_c_pu[s]};
        for (std::size_t k = 0; k < tr.mg_ids.size(); ++k) {
            r.push_back(tr.P_pcc_W[s][k] / 1e3);
            r.push_back(tr.Q_pcc_W[s][k] / 1e3);
        }
        for (std::size_t i = 0; i < tr.dg_ids.size(); ++i) {
            r.push_back(tr.P_dg_W[s][i] / 1e3);
            r.push_back(tr.Q_dg_W[s][i] / 1e3);
        }
        csv.row(r);
    }
    return csv.str();
}

inline std::string metrics_csv(const Trace& tr) {
    std::vector<std::string> h{"t_s", "f_error_Hz", "V_c_error_pu", "pcc_P_spread_pu", "pcc_Q_spread_pu"};
    for (const auto& id : tr.mg_ids) {
        h.push_back("dg_P_spread_" + id + "_pu");
        h.push_back("dg_Q_spread_" + id + "_pu");
    }
    CsvBuilder csv(h);
    for (std::size_t s = 0; s < tr.samples(); ++s) {
        const auto m = metrics_at(tr, s);
        std::vector<double> r{m.t, m.f_error_Hz, m.V_c_error_pu, m.pcc_P_spread, m.pcc_Q_spread};
        for (std::size_t k = 0; k < tr.mg_ids.size(); ++k) {
            r.push_back(m.dg_P_spread[k]);
            r.push_back(m.dg_Q_spread[k]);
        }
        csv.row(r);
    }
    return csv.str();
}

inline std::string eigen_csv(const LinearModel& lm, const std::vector<Mode>& ms) {
    CsvBuilder csv({"re_per_s", "im_per_s", "f_Hz", "zeta", "top5_participating_states"});
    for (const auto& m : ms) {
        std::string top;
        if (!m.participation.empty())
            for (const auto& s : top_states(lm, m.participation, 5)) top += (top.empty() ? "" : ";") + s;
        csv.row({format_number(m.lambda.real()), format_number(m.lambda.imag()), format_number(m.f_Hz),
                 format_number(m.zeta), top});
    }
    return csv.str();
}

inline std::string participation_csv(const LinearModel& lm, const std::vector<Mode>& ms) {
    std::vector<std::string> h{"state"};
    for (std::size_t k = 0; k < ms.size(); ++k) h.push_back("mode_" + std::to_string(k + 1) + "_pu");
    CsvBuilder csv(h);
    for (std::size_t i = 0; i < lm.labels.size(); ++i) {
        std::vector<std::string> r{lm.labels[i]};
        for (const auto& m : ms) r.push_back(m.participation.empty() ? "" : format_number(m.participation[i]));
        csv.row(r);
    }
    return csv.str();
}

inline std::string sweep_track_csv(const SweepTrace& tr, std::size_t track) {
    CsvBuilder csv({"value", "ok", "re_per_s", "im_per_s", "f_Hz", "zeta"});
    for (std::size_t s = 0; s < tr.samples.size(); ++s) {
        const auto& l = tr.tracks.at(track)[s];
        if (!l) {
            csv.row({format_number(tr.values[s]), "0", "", "", "", ""});
            continue;
        }
        csv.row({format_number(tr.values[s]), "1", format_number(l->real()), format_number(l->imag()),
                 format_number(std::abs(l->imag()) / kTwoPi), format_number(damping_ratio(*l))});
    }
    return csv.str();
}

// ---------------------------------------------------------------------------
// gnuplot scripts. They only reference CSV files sitting next to them.

inline std::string trace_plot_script(const Trace& tr, const std::string& csv, const std::string& title) {
    std::ostringstream g;
    g << "# " << title << "\n";
    g << "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 1200,1400\n";
    g << "set output '" << title << ".png'\nset multiplot layout 3,2\nset xlabel 't [s]'\n";
    g << "set ylabel 'f_sys [Hz]'\nplot '" << csv << "' using 1:2 with lines\n";
    g << "set ylabel 'V_c [p.u.]'\nplot '" << csv << "' using 1:3 with lines\n";
    const std::size_t nm = tr.mg_ids.size();
    auto series = [&](std::size_t first, std::size_t count) {
        std::string s;
        for (std::size_t k = 0; k < count; ++k) {
            if (k) s += ", ";
            s += "'" + csv + "' using 1:" + std::to_string(first + 2 * k) + " with lines";
        }
        return s;
    };
    g << "set ylabel 'P_PCC [kW]'\nplot " << series(4, nm) << "\n";
    g << "set ylabel 'Q_PCC [kvar]'\nplot " << series(5, nm) << "\n";
    g << "set ylabel 'P_DG [kW]'\nplot " << series(4 + 2 * nm, tr.dg_ids.size()) << "\n";
    g << "set ylabel 'Q_DG [kvar]'\nplot " << series(5 + 2 * nm, tr.dg_ids.size()) << "\n";
    g << "unset multiplot\n";
    return g.str();
}

inline std::string spectrum_plot_script(const std::vector<std::string>& csvs, const std::string& title) {
    std::ostringstream g;
    g << "# " << title << "\n";
    g << "set datafile separator ','\nset terminal pngcairo size 900,700\nset output '" << title << ".png'\n";
    g << "set xlabel 'Re [1/s]'\nset ylabel 'Im [rad/s]'\nset grid\nplot ";
    for (std::size_t k = 0; k < csvs.size(); ++k) {
        if (k) g << ", ";
        g << "'" << csvs[k] << "' using 1:2 skip 1 with points title '" << csvs[k] << "'";
        g << ", '" << csvs[k] << "' using 1:(-$2) skip 1 with points notitle";
    }
    g << "\n";
    return g.str();
}

inline std::string root_locus_script(const std::vector<std::string>& csvs, const std::string& parameter) {
    std::ostringstream g;
    g << "# root locus over " << parameter << "\n";
    g << "set datafile separator ','\nset terminal pngcairo size 900,700\nset output 'root_locus.png'\n";
    g << "set xlabel 'Re [1/s]'\nset ylabel 'Im [rad/s]'\nset grid\nplot ";
    for (std::size_t k = 0; k < csvs.size(); ++k) {
        if (k) g << ", ";
        g << "'" << csvs[k] << "' using 3:4 skip 1 with linespoints title '" << csvs[k] << "'";
    }
    g << "\n";
    return g.str();
}

} // namespace nmg
