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

// Linearisation at an equilibrium, modal analysis, participation factors,
// single-MG vs networked spectrum comparison and parameter sweeps.

#include "nmg/config.hpp"
#include "nmg/control.hpp"
#include "nmg/model.hpp"
#include "nmg/numerics.hpp"
#include "nmg/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace nmg {

enum class Layer { Primary, Secondary, Tertiary, Quaternary, Network };

inline const char* to_string(Layer l) {
    switch (l) {
    case Layer::Primary: return "PC";
    case Layer::Secondary: return "DSC";
    case Layer::Tertiary: return "TC";
    case Layer::Quaternary: return "DQC";
    case Layer::Network: return "network";
    }
    return "?";
}

struct StateGroup {
    std::string unit;     // DG, MG, branch id, or "NMG"
    std::string mg;       // owning MG, empty for the MV side
    std::string quantity; // label suffix
    Layer layer = Layer::Network;
};

struct LinearModel {
    Matrix A;
    std::vector<std::string> labels;
    std::vector<StateGroup> groups;
    std::vector<double> equilibrium;
    ActivationFlags flags;
    std::string config_hash;
    std::size_t structural_zeros = 0; // eigenvalues pinned at 0 by conserved quantities
};

struct Mode {
    Complex lambda;
    double zeta = 1.0;
    double f_Hz = 0.0;
    std::vector<double> participation; // max-normalised, empty when not requested
    bool degenerate = false;
};

// ---------------------------------------------------------------------------
// Helpers

/// FNV-1a over the canonical serialisation.
inline std::string config_hash(const SystemConfig& cfg) {
    const std::string text = write_system(cfg);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline double damping_ratio(Complex l) {
    const double mag = std::abs(l);
    return mag > 0.0 ? -l.real() / mag : 1.0;
}

inline std::vector<StateGroup> state_groups(const SystemModel& m) {
    const auto& labels = m.layout().labels;
    std::map<std::string, std::string> owner;
    for (const auto& d : m.config().dgs) owner[d.id] = d.mg;
    for (const auto& g : m.config().mgs) owner[g.id] = g.id;
    for (const auto& l : m.config().lines) {
        const auto* b = m.config().find_bus(l.from);
        if (b) owner[l.id] = b->mg;
    }
    for (const auto& l : m.config().loads) {
        const auto* b = m.config().find_bus(l.bus);
        if (b) owner[l.id] = b->mg;
    }
    std::vector<StateGroup> out;
    out.reserve(labels.size());
    for (const auto& label : labels) {
        StateGroup g;
        const auto dot = label.find('.');
        g.unit = label.substr(0, dot);
        g.quantity = dot == std::string::npos ? "" : label.substr(dot + 1);
        if (auto it = owner.find(g.unit); it != owner.end()) g.mg = it->second;
        const bool is_dg = m.config().find_dg(g.unit) != nullptr;
        const bool is_mg = m.config().find_mg(g.unit) != nullptr;
        const std::string& q = g.quantity;
        if (is_dg) {
            if (q == "delta" || q == "P" || q == "Q") g.layer = Layer::Primary;
            else if (q == "Omega" || q == "lambda" || q == "h") g.layer = Layer::Secondary;
        } else if (is_mg) {
            if (q == "psi") g.layer = Layer::Secondary;
            else if (q == "P_PCC" || q == "Q_PCC") g.layer = Layer::Tertiary;
            else if (q == "Omega" || q == "lambda" || q == "h") g.layer = Layer::Quaternary;
        } else if (g.unit == "NMG") {
            g.layer = Layer::Quaternary;
        }
        out.push_back(std::move(g));
    }
    return out;
}

/// Central differences of an arbitrary vector field; step_j = max(rel |x_j|, abs_j).
inline Matrix central_difference_jacobian(const std::function<void(std::span<const double>, std::span<double>)>& f,
                                          std::span<const double> x, std::span<const double> abs_step,
                                          double rel = 1e-6) {
    const std::size_t n = x.size();
    if (abs_step.size() != n) throw std::invalid_argument("central_difference_jacobian: step size mismatch");
    Matrix J(n, n);
    std::vector<double> xp(x.begin(), x.end()), fp(n), fm(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double h = std::max(rel * std::abs(x[j]), abs_step[j]);
        xp[j] = x[j] + h;
        f(xp, fp);
        xp[j] = x[j] - h;
        f(xp, fm);
        xp[j] = x[j];
        for (std::size_t i = 0; i < n; ++i) J(i, j) = (fp[i] - fm[i]) / (2.0 * h);
    }
    return J;
}

inline double frobenius(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    return std::sqrt(s);
}

inline double relative_difference(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("relative_difference: shape mismatch");
    double d = 0.0;
    for (std::size_t k = 0; k < a.data().size(); ++k) d += std::pow(a.data()[k] - b.data()[k], 2);
    return std::sqrt(d) / std::max(frobenius(a), 1e-300);
}

// ---------------------------------------------------------------------------
// Linearisation

struct LinearizeOptions {
    double rel_step = 1e-6;
    double abs_step = 1e-9;          // times the state scale
    double residual_tolerance = 1e-6; // scaled residual accepted as an equilibrium
};

inline LinearModel linearize(const LiveSystem& live, std::span<const double> x, const LinearizeOptions& opt = {}) {
    const auto& m = live.model();
    if (x.size() != m.size()) throw std::invalid_argument("linearize: state size mismatch");
    const auto dx = evaluate_rhs(live, x);
    const double r = scaled_residual(m, dx);
    if (!(r < opt.residual_tolerance))
        throw NotAtEquilibrium("linearize: scaled residual " + std::to_string(r) + " is not an equilibrium");
    LinearModel lm;
    lm.A = numeric_jacobian(live, x, opt.rel_step, opt.abs_step);
    lm.labels = m.layout().labels;
    lm.groups = state_groups(m);
    lm.equilibrium.assign(x.begin(), x.end());
    lm.flags = live.flags;
    lm.config_hash = config_hash(m.config());
    const auto W = structural_invariants(live);
    if (!W.empty()) {
        Matrix w(W.size(), m.size());
        for (std::size_t i = 0; i < W.size(); ++i)
            for (std::size_t j = 0; j < m.size(); ++j) w(i, j) = W[i][j];
        lm.structural_zeros = W.size() - left_null_space(w).size();
    }
    return lm;
}

inline LinearModel linearize(const SystemModel& m, const ActivationFlags& flags, std::span<const double> x,
                             const LinearizeOptions& opt = {}) {
    LiveSystem live(m);
    live.flags = flags;
    return linearize(live, x, opt);
}

/// Equilibrium search followed by linearisation.
inline LinearModel linearize_at_equilibrium(const SystemModel& m, const ActivationFlags& flags,
                                            const EquilibriumOptions& eq = {}, const LinearizeOptions& opt = {}) {
    const auto r = find_equilibrium(m, flags, eq);
    return linearize(m, flags, r.x, opt);
}

// ---------------------------------------------------------------------------
// Modes

struct ModeOptions {
    double f_max_Hz = 100.0;
    bool participation = true;
    bool include_structural = false;
};

namespace detail {

inline std::vector<double> participation_of(const EigenDecomposition& e, std::size_t k) {
    const std::size_t n = e.values.size();
    std::vector<double> p(n);
    double mx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::abs(std::conj(e.left_vectors(i, k)) * e.right_vectors(i, k));
        mx = std::max(mx, p[i]);
    }
    if (!(mx > 0.0) || !std::isfinite(mx)) throw DegenerateEigenvector("participation: zero eigenvector product");
    for (auto& v : p) v /= mx;
    return p;
}

// Indices of the eigenvalues that are the structural zeros: the k closest to
// the origin.
inline std::vector<bool> structural_mask(const std::vector<Complex>& values, std::size_t k) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return std::abs(values[a]) < std::abs(values[b]); });
    std::vector<bool> mask(values.size(), false);
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i) mask[order[i]] = true;
    return mask;
}

} // namespace detail

/// Modes with |Im|/2pi <= f_max, one representative per conjugate pair
/// (Im >= 0), sorted by damping ascending.
inline std::vector<Mode> modes(const LinearModel& lm, const ModeOptions& opt = {}) {
    std::vector<Mode> out;
    std::vector<Complex> values;
    EigenDecomposition e;
    if (opt.participation) {
        e = eig_real(lm.A);
        values = e.values;
    } else {
        values = eigenvalues(lm.A);
    }
    const auto mask = detail::structural_mask(values, lm.structural_zeros);
    const double tiny = 1e-9 * std::max(1.0, norm_inf(lm.A));
    for (std::size_t k = 0; k < values.size(); ++k) {
        const Complex l = values[k];
        if (l.imag() < -tiny) continue;
        if (mask[k] && !opt.include_structural) continue;
        Mode md;
        md.lambda = std::abs(l.imag()) <= tiny ? Complex(l.real(), 0.0) : l;
        md.zeta = damping_ratio(md.lambda);
        md.f_Hz = std::abs(md.lambda.imag()) / kTwoPi;
        if (md.f_Hz > opt.f_max_Hz) continue;
        if (opt.participation) {
            md.degenerate = e.degenerate[k];
            if (!md.degenerate) md.participation = detail::participation_of(e, k);
        }
        out.push_back(std::move(md));
    }
    std::stable_sort(out.begin(), out.end(), [](const Mode& a, const Mode& b) {
        if (a.zeta != b.zeta) return a.zeta < b.zeta;
        return a.f_Hz < b.f_Hz;
    });
    return out;
}

/// Participation vector of the eigenvalue of A closest to mode.lambda.
inline std::vector<double> participation(const LinearModel& lm, const Mode& mode) {
    const auto e = eig_real(lm.A);
    std::size_t best = 0;
    for (std::size_t k = 1; k < e.values.size(); ++k)
        if (std::abs(e.values[k] - mode.lambda) < std::abs(e.values[best] - mode.lambda)) best = k;
    if (e.values.empty()) throw DegenerateEigenvector("participation: empty model");
    if (e.degenerate[best]) throw DegenerateEigenvector("participation: biorthogonalisation failed");
    return detail::participation_of(e, best);
}

inline std::map<std::string, double> aggregate_by_unit(const LinearModel& lm, const std::vector<double>& p) {
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < p.size(); ++i) out[lm.groups.at(i).unit] += p[i];
    return out;
}

inline std::map<std::string, double> aggregate_by_mg(const LinearModel& lm, const std::vector<double>& p) {
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < p.size(); ++i) out[lm.groups.at(i).mg.empty() ? "NMG" : lm.groups[i].mg] += p[i];
    return out;
}

inline std::map<Layer, double> aggregate_by_layer(const LinearModel& lm, const std::vector<double>& p) {
    std::map<Layer, double> out;
    for (std::size_t i = 0; i < p.size(); ++i) out[lm.groups.at(i).layer] += p[i];
    return out;
}

/// Labels of the n largest participations, largest first.
inline std::vector<std::string> top_states(const LinearModel& lm, const std::vector<double>& p, std::size_t n = 5) {
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::vector<std::string> out;
    for (std::size_t k = 0; k < std::min(n, idx.size()); ++k) out.push_back(lm.labels[idx[k]]);
    return out;
}

// ---------------------------------------------------------------------------
// Single-MG vs networked spectra

/// The MG on its own: its buses, lines, loads, DGs and PCC branch, with the
/// far end of the PCC branch left unloaded.
inline SystemConfig single_mg_config(const SystemConfig& cfg, const std::string& mg_id) {
    const auto* mg = cfg.find_mg(mg_id);
    if (!mg) throw UnknownId("unknown MG '" + mg_id + "'");
    SystemConfig out = cfg;
    out.name = cfg.name + "/" + mg_id;
    std::set<std::string> buses;
    for (const auto& b : cfg.buses)
        if (b.mg == mg_id) buses.insert(b.id);
    std::string far;
    if (const auto* t = cfg.find_transformer(mg->pcc_branch)) {
        far = t->lv_bus == mg->pcc_bus ? t->mv_bus : t->lv_bus;
        out.transformers = {*t};
    } else {
        out.transformers.clear();
    }
    if (const auto* l = cfg.find_line(mg->pcc_branch)) far = l->from == mg->pcc_bus ? l->to : l->from;
    if (!far.empty()) buses.insert(far);
    std::erase_if(out.buses, [&](const BusConfig& b) { return !buses.contains(b.id); });
    std::erase_if(out.lines, [&](const LineConfig& l) {
        return l.id != mg->pcc_branch && !(buses.contains(l.from) && buses.contains(l.to) && l.from != far &&
                                           l.to != far);
    });
    std::erase_if(out.loads, [&](const LoadConfig& l) { return !buses.contains(l.bus) || l.bus == far; });
    std::erase_if(out.dgs, [&](const DgConfig& d) { return d.mg != mg_id; });
    out.mgs = {*mg};
    std::erase_if(out.mg_graphs, [&](const GraphConfig& g) { return g.id != mg_id; });
    out.nmg_graph.edges.clear();
    out.nmg_graph.pinning = {{mg_id, 1.0}};
    if (!far.empty()) out.references.critical_bus = far;
    std::set<std::string> branches;
    for (const auto& d : out.dgs) branches.insert(d.id);
    for (const auto& l : out.lines) branches.insert(l.id);
    for (const auto& t : out.transformers) branches.insert(t.id);
    std::erase_if(out.breakers, [&](const BreakerConfig& b) { return !branches.contains(b.branch); });
    if (!out.find_dg(out.simulation.frame_anchor) && !out.dgs.empty()) out.simulation.frame_anchor = out.dgs.front().id;
    return out;
}

/// Single-MG spectrum: PC and DSC with the PCC references at nominal.
inline LinearModel single_mg_linear_model(const SystemConfig& cfg, const std::string& mg_id,
                                          const EquilibriumOptions& eq = {}) {
    SystemModel m(single_mg_config(cfg, mg_id));
    ActivationFlags f;
    f.dsc = true;
    return linearize_at_equilibrium(m, f, eq);
}

struct CompareOptions {
    double f_max_Hz = 100.0;
    double zeta_max = 0.5;
    double rel_tolerance = 0.1; // match radius relative to |lambda|
    double abs_tolerance = 0.5; // 1/s
};

struct ModeMatch {
    std::size_t model = 0; // index into the single-MG list
    Complex single;
    std::optional<Complex> nearest; // nearest NMG dominant mode, if any
    double distance = 0.0;
    bool matched = false; // within tolerance and not taken by a closer pair
};

struct SpectrumComparison {
    std::vector<ModeMatch> single_modes;
    std::vector<Mode> new_modes; // NMG dominant modes without a single-MG counterpart
};

inline std::vector<Mode> dominant_modes(const std::vector<Mode>& all, const CompareOptions& opt) {
    std::vector<Mode> out;
    for (const auto& m : all)
        if (m.f_Hz <= opt.f_max_Hz && m.zeta < opt.zeta_max) out.push_back(m);
    return out;
}

inline SpectrumComparison compare_spectra(const std::vector<std::vector<Mode>>& singles, const std::vector<Mode>& nmg,
                                          const CompareOptions& opt = {}) {
    SpectrumComparison out;
    const auto dn = dominant_modes(nmg, opt);
    struct Candidate {
        double d;
        std::size_t s, n;
    };
    std::vector<Candidate> pairs;
    for (std::size_t k = 0; k < singles.size(); ++k)
        for (const auto& m : dominant_modes(singles[k], opt)) {
            ModeMatch mm;
            mm.model = k;
            mm.single = m.lambda;
            double best = INFINITY;
            for (std::size_t j = 0; j < dn.size(); ++j) {
                const double d = std::abs(dn[j].lambda - m.lambda);
                if (d < best) {
                    best = d;
                    mm.nearest = dn[j].lambda;
                }
                if (d <= opt.rel_tolerance * std::abs(m.lambda) + opt.abs_tolerance)
                    pairs.push_back({d, out.single_modes.size(), j});
            }
            mm.distance = mm.nearest ? best : INFINITY;
            out.single_modes.push_back(mm);
        }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Candidate& a, const Candidate& b) { return a.d < b.d; });
    std::vector<bool> taken(dn.size(), false);
    for (const auto& c : pairs) {
        if (taken[c.n] || out.single_modes[c.s].matched) continue;
        taken[c.n] = true;
        out.single_modes[c.s].matched = true;
    }
    for (std::size_t j = 0; j < dn.size(); ++j)
        if (!taken[j]) out.new_modes.push_back(dn[j]);
    return out;
}

inline SpectrumComparison compare_spectra(const std::vector<LinearModel>& singles, const LinearModel& nmg,
                                          const CompareOptions& opt = {}) {
    std::vector<std::vector<Mode>> s;
    ModeOptions mo;
    mo.f_max_Hz = opt.f_max_Hz;
    mo.participation = false;
    for (const auto& m : singles) s.push_back(modes(m, mo));
    return compare_spectra(s, modes(nmg, mo), opt);
}

// ---------------------------------------------------------------------------
// Parameter paths and sweeps

/// Sets one numeric field addressed by a dotted path over the config
/// document; array members are addressed by id ("mgs.MG2.D_Q_V_per_kvar").
/// "dsc." and "dqc." abbreviate "controller_gains.dsc." and ".dqc.".
inline SystemConfig set_parameter(const SystemConfig& cfg, const std::string& path, double value) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        parts.push_back(path.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    if (!parts.empty() && (parts[0] == "dsc" || parts[0] == "dqc")) parts.insert(parts.begin(), "controller_gains");
    Json doc = write_system_json(cfg);
    Json* node = &doc;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& key = parts[i];
        if (node->is_array()) {
            Json* next = nullptr;
            for (auto& e : *node)
                if (e.is_object() && e.contains("id") && e["id"] == key) next = &e;
            if (!next) throw ConfigError("parameter '" + path + "': no element '" + key + "'");
            node = next;
        } else if (node->is_object() && node->contains(key)) {
            node = &(*node)[key];
        } else {
            throw ConfigError("parameter '" + path + "': no field '" + key + "'");
        }
    }
    if (!node->is_number()) throw ConfigError("parameter '" + path + "' is not numeric");
    *node = value;
    return parse_system_json(doc);
}

inline double get_parameter(const SystemConfig& cfg, const std::string& path) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        parts.push_back(path.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    if (!parts.empty() && (parts[0] == "dsc" || parts[0] == "dqc")) parts.insert(parts.begin(), "controller_gains");
    const Json doc = write_system_json(cfg);
    const Json* node = &doc;
    for (const auto& key : parts) {
        if (node->is_array()) {
            const Json* next = nullptr;
            for (const auto& e : *node)
                if (e.is_object() && e.contains("id") && e["id"] == key) next = &e;
            if (!next) throw ConfigError("parameter '" + path + "': no element '" + key + "'");
            node = next;
        } else if (node->is_object() && node->contains(key)) {
            node = &(*node)[key];
        } else {
            throw ConfigError("parameter '" + path + "': no field '" + key + "'");
        }
    }
    if (!node->is_number()) throw ConfigError("parameter '" + path + "' is not numeric");
    return node->get<double>();
}

struct SweepOptions {
    ActivationFlags flags = ActivationFlags::all();
    CompareOptions dominant;      // which modes are tracked
    std::size_t max_tracks = 12;  // least-damped dominant modes of the first sample
    EquilibriumOptions equilibrium;
};

struct SweepSample {
    double value = 0.0;
    bool ok = false;
    std::string error;
    std::vector<Mode> modes; // dominant modes, least damped first
};

struct SweepTrace {
    std::string parameter;
    std::vector<double> values; // ascending
    bool reordered = false;     // input was not ascending
    std::vector<SweepSample> samples;
    std::vector<std::vector<std::optional<Complex>>> tracks; // [track][sample]
};

namespace detail {

// Greedy nearest-neighbour assignment; ties broken by damping proximity.
inline std::vector<std::optional<Complex>> continue_tracks(const std::vector<std::optional<Complex>>& last,
                                                           const std::vector<Mode>& next) {
    struct Candidate {
        double d, dz;
        std::size_t t, m;
    };
    std::vector<Candidate> c;
    for (std::size_t t = 0; t < last.size(); ++t) {
        if (!last[t]) continue;
        for (std::size_t m = 0; m < next.size(); ++m)
            c.push_back({std::abs(next[m].lambda - *last[t]), std::abs(next[m].zeta - damping_ratio(*last[t])), t, m});
    }
    std::stable_sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
        if (a.d != b.d) return a.d < b.d;
        return a.dz < b.dz;
    });
    std::vector<std::optional<Complex>> out(last.size());
    std::vector<bool> used(next.size(), false);
    for (const auto& x : c) {
        if (out[x.t] || used[x.m]) continue;
        out[x.t] = next[x.m].lambda;
        used[x.m] = true;
    }
    return out;
}

} // namespace detail

inline SweepTrace sweep(const SystemConfig& cfg, const std::string& parameter, std::vector<double> values,
                        const SweepOptions& opt = {}) {
    SweepTrace tr;
    tr.parameter = parameter;
    tr.reordered = !std::is_sorted(values.begin(), values.end());
    std::sort(values.begin(), values.end());
    tr.values = values;
    (void)get_parameter(cfg, parameter);
    for (double v : values) {
        SweepSample s;
        s.value = v;
        try {
            SystemModel m(set_parameter(cfg, parameter, v));
            const auto lm = linearize_at_equilibrium(m, opt.flags, opt.equilibrium);
            ModeOptions mo;
            mo.f_max_Hz = opt.dominant.f_max_Hz;
            mo.participation = false;
            s.modes = dominant_modes(modes(lm, mo), opt.dominant);
            s.ok = true;
        } catch (const Error& e) {
            s.error = e.what();
        }
        tr.samples.push_back(std::move(s));
    }
    std::vector<std::optional<Complex>> last;
    std::size_t first = tr.samples.size();
    for (std::size_t k = 0; k < tr.samples.size(); ++k)
        if (tr.samples[k].ok) {
            first = k;
            break;
        }
    if (first == tr.samples.size()) return tr;
    for (std::size_t t = 0; t < std::min(opt.max_tracks, tr.samples[first].modes.size()); ++t)
        last.push_back(tr.samples[first].modes[t].lambda);
    tr.tracks.assign(last.size(), std::vector<std::optional<Complex>>(tr.samples.size()));
    for (std::size_t k = first; k < tr.samples.size(); ++k) {
        if (!tr.samples[k].ok) continue;
        const auto cur = k == first ? last : detail::continue_tracks(last, tr.samples[k].modes);
        for (std::size_t t = 0; t < cur.size(); ++t) {
            tr.tracks[t][k] = cur[t];
            if (cur[t]) last[t] = cur[t];
        }
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Isolated droop + secondary frequency consensus block, electrical network
// replaced by a linear synchronising-power map p = p0 + K (delta - delta0).
// Serves as an analytic oracle for the numeric linearisation.

struct DroopConsensusBlock {
    CommGraph graph;
    std::vector<double> D_P;  // rad/s per W
    Matrix K;                 // W per rad
    std::vector<double> p0;   // W
    double omega_n = kTwoPi * 50.0;
    double omega_ref = kTwoPi * 50.0;
    double omega_c = 31.4;
    ConsensusGains gains;

    std::size_t units() const { return D_P.size(); }
    std::size_t size() const { return 3 * units(); }

    // state: [delta_1..n, P_1..n, Omega_1..n]; delta measured against omega_n
    void rhs(std::span<const double> x, std::span<double> dx) const {
        const std::size_t n = units();
        std::vector<double> w(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = omega_n - D_P[i] * x[n + i] + x[2 * n + i];
            y[i] = D_P[i] * x[n + i];
        }
        const auto dO = dsc_freq_rhs(graph, w, y, omega_ref, gains);
        for (std::size_t i = 0; i < n; ++i) {
            double p = p0[i];
            for (std::size_t j = 0; j < n; ++j) p += K(i, j) * x[j];
            dx[i] = w[i] - omega_n;
            dx[n + i] = omega_c * (p - x[n + i]);
            dx[2 * n + i] = dO[i];
        }
    }

    Matrix analytic_jacobian() const {
        const std::size_t n = units();
        Matrix A(3 * n, 3 * n);
        Matrix L(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double a = graph.effective_weight(i, j);
                L(i, j) -= a;
                L(i, i) += a;
            }
        for (std::size_t i = 0; i < n; ++i) {
            A(i, n + i) = -D_P[i];
            A(i, 2 * n + i) = 1.0;
            for (std::size_t j = 0; j < n; ++j) A(n + i, j) = omega_c * K(i, j);
            A(n + i, n + i) = -omega_c;
            const double g = graph.effective_pinning(i);
            for (std::size_t j = 0; j < n; ++j) {
                const double lg = L(i, j) + (i == j ? g : 0.0);
                // d(dOmega_i)/dOmega_j = -c_w (L + G)_ij ; d/dP_j = c_w (L+G)_ij D_Pj - c_p L_ij D_Pj
                A(2 * n + i, 2 * n + j) = -gains.c_omega * lg;
                A(2 * n + i, n + j) = gains.c_omega * lg * D_P[j] - gains.c_p * L(i, j) * D_P[j];
            }
        }
        return A;
    }
};

} // namespace nmg
