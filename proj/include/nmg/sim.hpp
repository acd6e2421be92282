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

// Scenario execution: event engine, fixed-step integration, equilibrium
// search, synchronisation checks and the objective metrics.

#include "nmg/config.hpp"
#include "nmg/model.hpp"
#include "nmg/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace nmg {

// ---------------------------------------------------------------------------
// Scenario

struct Scenario {
    SystemConfig config;
    std::string name;
    double t_end_s = 0.0;
    double dt_s = 2e-4;
    std::vector<ScheduledEvent> events;
};

inline Scenario make_scenario(const SystemConfig& cfg, const ScenarioConfig& sc) {
    const auto rep = validate_scenario(sc, cfg);
    if (!rep.ok()) throw ConfigError("invalid scenario: " + rep.errors.front());
    Scenario s;
    s.config = cfg;
    s.name = sc.name;
    s.t_end_s = sc.t_end_s;
    s.dt_s = sc.dt_s.value_or(cfg.simulation.dt_s);
    s.events = sc.events;
    return s;
}

/// Loads a scenario document; its config path is resolved relative to it.
inline Scenario load_scenario_file(const std::filesystem::path& path,
                                   const std::optional<std::filesystem::path>& config_override = std::nullopt) {
    const auto sc = load_scenario(path);
    const auto cfg_path =
        config_override ? *config_override : path.parent_path() / std::filesystem::path(sc.config_path);
    return make_scenario(load_system(cfg_path), sc);
}

// ---------------------------------------------------------------------------
// Trace

struct Trace {
    std::vector<std::string> mg_ids;
    std::vector<std::string> dg_ids;
    std::vector<std::size_t> dg_mg;
    std::vector<double> P_star_W, Q_star_W;   // spare capacities of the MGs
    std::vector<double> P_max_W, Q_max_W;     // DG capacities
    std::vector<std::string> state_labels;

    std::vector<double> t;
    std::vector<double> f_sys_Hz, V_c_pu;
    std::vector<std::vector<double>> P_pcc_W, Q_pcc_W; // [sample][mg]
    std::vector<std::vector<double>> P_dg_W, Q_dg_W;   // [sample][dg]
    std::vector<std::vector<char>> mg_on, dg_on;       // attachment at each sample
    std::vector<double> f_ref_Hz, V_c_ref_pu;

    std::vector<double> snapshot_t;
    std::vector<std::vector<double>> snapshots;
    std::vector<double> final_state;

    std::vector<std::string> warnings;
    std::vector<std::string> event_log;

    std::size_t samples() const noexcept { return t.size(); }
};

// ---------------------------------------------------------------------------
// Synchronisation

struct SyncStatus {
    double df_Hz = 0.0;
    double dV_pu = 0.0;
    double dphase_deg = 0.0;
    bool ready = false;
};

struct SyncTolerances {
    double df_Hz = 0.05;
    double dV_pu = 0.02;
    double dphase_deg = 5.0;
};

inline SyncTolerances tolerances_of(const SystemConfig& cfg) {
    return {cfg.sync.df_Hz, cfg.sync.dV_pu, cfg.sync.dphase_deg};
}

/// Mismatch across a breaker. Strict inequalities: a mismatch equal to the
/// tolerance is not ready.
inline SyncStatus sync_status(const LiveSystem& live, std::span<const double> x, std::size_t breaker,
                              const SyncTolerances& tol) {
    const auto& m = live.model();
    const auto& bm = m.breakers().at(breaker);
    const auto el = detail::solve_electrical(live, x);
    SyncStatus s;
    double w_a, w_b, v_a, v_b, base;
    Complex pa, pb;
    if (bm.dg >= 0) {
        const auto& dg = m.dgs()[bm.dg];
        w_a = el.omega[bm.dg];
        w_b = detail::island_omega(live, el, live.node_island(dg.node));
        pa = el.E[dg.branch];
        pb = el.v[dg.node];
        base = m.node_base()[dg.node];
    } else {
        const auto& nb = live.network().branch(bm.branch);
        const std::size_t n1 = static_cast<std::size_t>(nb.node1), n2 = static_cast<std::size_t>(nb.node2);
        w_a = detail::island_omega(live, el, live.node_island(n1));
        w_b = detail::island_omega(live, el, live.node_island(n2));
        pa = el.v[n1];
        pb = (nb.alpha2 / nb.alpha1) * el.v[n2];
        base = m.node_base()[n1];
    }
    v_a = std::abs(pa) * kDqToLineRms;
    v_b = std::abs(pb) * kDqToLineRms;
    s.df_Hz = units::rad_to_hz(w_a - w_b);
    s.dV_pu = (v_a - v_b) / base;
    s.dphase_deg = (std::abs(pa) > 0.0 && std::abs(pb) > 0.0) ? wrap_angle(std::arg(pa) - std::arg(pb)) * 180.0 / kPi
                                                               : 180.0;
    s.ready = std::abs(s.df_Hz) < tol.df_Hz && std::abs(s.dV_pu) < tol.dV_pu && std::abs(s.dphase_deg) < tol.dphase_deg;
    return s;
}

inline bool sync_ready(const LiveSystem& live, std::span<const double> x, std::size_t breaker,
                       const SyncTolerances& tol) {
    return sync_status(live, x, breaker, tol).ready;
}

inline bool sync_ready(const LiveSystem& live, std::span<const double> x, const std::string& breaker) {
    return sync_ready(live, x, live.model().breaker_index(breaker), tolerances_of(live.model().config()));
}

// ---------------------------------------------------------------------------
// Events

namespace detail {

inline void reset_detached_dg(const SystemModel& m, std::size_t i, std::span<double> x) {
    const std::size_t o = m.dgs()[i].offset;
    x[o + kOmega] = x[o + kLambda] = x[o + kH] = 0.0;
}

inline void reset_detached_mg(const SystemModel& m, std::size_t k, std::span<double> x) {
    const std::size_t o = m.mgs()[k].upper_offset;
    x[o + kOmegaK] = x[o + kLambdaK] = x[o + kHK] = 0.0;
}

inline void check_spanning_trees(const LiveSystem& live, double t, std::vector<std::string>& warnings) {
    const auto& m = live.model();
    auto note = [&](const std::string& what) {
        warnings.push_back("t=" + std::to_string(t) + " s: " + what + " has no pinned spanning tree");
    };
    if (live.flags.dsc)
        for (std::size_t k = 0; k < m.mgs().size(); ++k)
            if (!has_pinned_spanning_tree(live.mg_graph(k))) note("graph of " + m.mgs()[k].id);
    if (live.flags.dqc && !has_pinned_spanning_tree(live.nmg_graph())) note("NMG graph");
}

inline void close_breaker(LiveSystem& live, std::size_t b) {
    live.set_breaker(b, false);
    const auto& bm = live.model().breakers()[b];
    if (bm.dg >= 0) live.dg_sync(bm.dg).pending = false;
    if (bm.mg >= 0) live.mg_sync(bm.mg).pending = false;
}

} // namespace detail

/// Applies one event. The state only changes where a detached unit's
/// controller corrections are reset; everything else stays continuous.
inline void apply_event(LiveSystem& live, std::span<double> x, const EventKind& ev, double t,
                        std::vector<std::string>* warnings = nullptr) {
    const auto& m = live.model();
    std::visit(
        [&](const auto& k) {
            using K = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<K, ActivateLevel>) {
                if (k.level == ControlLevel::DSC) live.flags.dsc = true;
                if (k.level == ControlLevel::TC) live.flags.tc = true;
                if (k.level == ControlLevel::DQC) {
                    if (!live.flags.dsc || !live.flags.tc)
                        throw ConfigError("DQC cannot be activated before DSC and TC");
                    live.flags.dqc = true;
                }
            } else if constexpr (std::is_same_v<K, ScaleLoad>) {
                if (!(k.factor >= 0.0)) throw ConfigError("load scale must be >= 0");
                live.set_load_scale(k.load, k.factor);
            } else if constexpr (std::is_same_v<K, CommLinkSet>) {
                CommGraph& g = k.layer == "nmg" ? live.nmg_graph() : live.mg_graph(m.mg_index(k.layer));
                const std::size_t a = g.index_of(k.from), b = g.index_of(k.to);
                bool any = false;
                if (g.has_arc(b, a)) {
                    g.set_link(b, a, k.up);
                    any = true;
                }
                if (k.both_directions && g.has_arc(a, b)) {
                    g.set_link(a, b, k.up);
                    any = true;
                }
                if (!any) throw UnknownId("no communication link " + k.from + "->" + k.to + " in layer " + k.layer);
            } else if constexpr (std::is_same_v<K, BreakerSet>) {
                const std::size_t b = m.breaker_index(k.breaker);
                const auto& bm = m.breakers()[b];
                if (k.open) {
                    if (bm.dg >= 0) live.dg_sync(bm.dg).pending = false;
                    if (bm.mg >= 0) live.mg_sync(bm.mg).pending = false;
                    if (live.breaker_open(b)) return;
                    live.set_breaker(b, true);
                    if (bm.dg >= 0) detail::reset_detached_dg(m, static_cast<std::size_t>(bm.dg), x);
                    if (bm.mg >= 0) detail::reset_detached_mg(m, static_cast<std::size_t>(bm.mg), x);
                } else {
                    if (!live.breaker_open(b)) return;
                    if (k.with_sync) {
                        SyncRequest req{true, k.not_before_s};
                        if (bm.dg >= 0) live.dg_sync(bm.dg) = req;
                        if (bm.mg >= 0) live.mg_sync(bm.mg) = req;
                        if (bm.dg < 0 && bm.mg < 0) {
                            if (!sync_ready(live, x, b, tolerances_of(m.config())))
                                throw SyncNotReady("breaker " + k.breaker + " has no synchroniser and sides differ");
                            detail::close_breaker(live, b);
                        }
                    } else {
                        if (!sync_ready(live, x, b, tolerances_of(m.config())))
                            throw SyncNotReady("breaker " + k.breaker + ": sides are not synchronised");
                        detail::close_breaker(live, b);
                    }
                }
            } else if constexpr (std::is_same_v<K, SetReference>) {
                if (k.reference == "f_sys") live.set_f_ref_Hz(k.value);
                else if (k.reference == "V_c") live.set_V_c_ref_pu(k.value);
                else throw UnknownId("unknown reference '" + k.reference + "'");
            }
        },
        ev);
    if (warnings) detail::check_spanning_trees(live, t, *warnings);
}

/// Closes every pending synchronised breaker whose sides now match.
inline std::vector<std::string> service_sync_requests(LiveSystem& live, std::span<const double> x, double t) {
    const auto& m = live.model();
    std::vector<std::string> closed;
    for (std::size_t b = 0; b < m.breakers().size(); ++b) {
        if (!live.breaker_open(b)) continue;
        const auto& bm = m.breakers()[b];
        const SyncRequest* req = bm.dg >= 0 ? &live.dg_sync(bm.dg) : bm.mg >= 0 ? &live.mg_sync(bm.mg) : nullptr;
        if (!req || !req->pending || t + 1e-12 < req->not_before) continue;
        if (sync_ready(live, x, b, tolerances_of(m.config()))) {
            detail::close_breaker(live, b);
            closed.push_back(bm.id);
        }
    }
    return closed;
}

// ---------------------------------------------------------------------------
// Equilibrium

/// Rows w with w.x conserved by the dynamics (frame anchor, frozen levels,
/// consensus sums on graphs without pinned reach).
inline std::vector<std::vector<double>> structural_invariants(const LiveSystem& live) {
    const auto& m = live.model();
    const std::size_t n = m.size();
    std::vector<std::vector<double>> rows;
    auto unit = [&](std::size_t j) {
        std::vector<double> w(n, 0.0);
        w[j] = 1.0;
        rows.push_back(std::move(w));
    };
    auto layer = [&](const CommGraph& g, const std::vector<std::size_t>& om, const std::vector<std::size_t>& la,
                     const std::vector<std::size_t>& hh) {
        const std::size_t k = g.size();
        Matrix Lt(k, k), M(2 * k, k);
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                const double a = g.effective_weight(i, j);
                Lt(j, i) -= a; // transpose of L = D - A
                Lt(i, i) += a;
            }
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) M(i, j) = Lt(i, j);
            M(k + i, i) = g.effective_pinning(i);
        }
        for (const auto& w : null_space(M)) {
            for (const auto* slots : {&om, &la}) {
                std::vector<double> r(n, 0.0);
                for (std::size_t i = 0; i < k; ++i) r[(*slots)[i]] = w[i];
                rows.push_back(std::move(r));
            }
        }
        for (const auto& w : null_space(Lt)) {
            std::vector<double> r(n, 0.0);
            for (std::size_t i = 0; i < k; ++i) r[hh[i]] = w[i];
            rows.push_back(std::move(r));
        }
    };

    unit(m.dgs()[m.anchor()].offset + kDelta);
    for (std::size_t k = 0; k < m.mgs().size(); ++k) {
        const auto& mg = m.mgs()[k];
        std::vector<std::size_t> om, la, hh;
        for (std::size_t i : mg.dgs) {
            om.push_back(m.dgs()[i].offset + kOmega);
            la.push_back(m.dgs()[i].offset + kLambda);
            hh.push_back(m.dgs()[i].offset + kH);
        }
        if (!live.flags.dsc) {
            for (auto* v : {&om, &la, &hh})
                for (std::size_t j : *v) unit(j);
            unit(mg.psi_offset);
        } else {
            layer(live.mg_graph(k), om, la, hh);
        }
    }
    std::vector<std::size_t> om, la, hh;
    for (const auto& mg : m.mgs()) {
        om.push_back(mg.upper_offset + kOmegaK);
        la.push_back(mg.upper_offset + kLambdaK);
        hh.push_back(mg.upper_offset + kHK);
    }
    if (!live.flags.dqc) {
        for (auto* v : {&om, &la, &hh})
            for (std::size_t j : *v) unit(j);
        unit(m.global_psi());
    } else {
        layer(live.nmg_graph(), om, la, hh);
    }
    return rows;
}

/// Central-difference Jacobian, step h_j = max(1e-6 |x_j|, 1e-9 scale_j).
inline Matrix numeric_jacobian(const LiveSystem& live, std::span<const double> x, double rel = 1e-6,
                               double abs_scale = 1e-9) {
    const auto& m = live.model();
    const std::size_t n = x.size();
    Matrix J(n, n);
    std::vector<double> xp(x.begin(), x.end()), fp(n), fm(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double h = std::max(rel * std::abs(x[j]), abs_scale * m.layout().scale[j]);
        xp[j] = x[j] + h;
        evaluate_rhs(live, xp, fp);
        xp[j] = x[j] - h;
        evaluate_rhs(live, xp, fm);
        xp[j] = x[j];
        for (std::size_t i = 0; i < n; ++i) J(i, j) = (fp[i] - fm[i]) / (2.0 * h);
    }
    return J;
}

struct EquilibriumOptions {
    double tolerance = 1e-8;         // scaled residual
    double handoff_tolerance = 1e-3; // integrate until this before polishing
    double stage_max_s = 4.0;
    double check_interval_s = 0.05;
    int newton_max_iterations = 40;
    std::optional<double> dt_s;
    std::optional<double> max_horizon_s; // default: simulation.max_settle_s
};

struct EquilibriumResult {
    std::vector<double> x;
    double residual = 0.0;
    double integrated_s = 0.0;
    int newton_iterations = 0;
};

namespace detail {

// Bordered Newton on scaled variables; returns true on convergence.
inline bool newton_polish(const LiveSystem& live, std::vector<double>& x, const EquilibriumOptions& opt, int& iters) {
    const auto& m = live.model();
    const std::size_t n = x.size();
    const auto& s = m.layout().scale;
    const auto W = structural_invariants(live);
    const std::size_t c = W.size();
    const std::vector<double> x_ref = x;
    std::vector<double> f(n);
    evaluate_rhs(live, x, f);
    double res = scaled_residual(m, f);
    for (int it = 0; it < opt.newton_max_iterations; ++it) {
        if (res < opt.tolerance) return true;
        ++iters;
        const Matrix J = numeric_jacobian(live, x);
        Matrix K(n + c, n + c);
        std::vector<double> rhs(n + c, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) K(i, j) = J(i, j) * s[j] / s[i];
            rhs[i] = -f[i] / s[i];
        }
        for (std::size_t r = 0; r < c; ++r) {
            double drift = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                K(n + r, j) = W[r][j] * s[j];
                K(j, n + r) = W[r][j] * s[j];
                drift += W[r][j] * (x_ref[j] - x[j]);
            }
            rhs[n + r] = drift;
        }
        std::vector<double> dz;
        try {
            dz = LuDecomposition<double>(K).solve(rhs);
        } catch (const SingularMatrix&) {
            return false;
        }
        // backtracking on the scaled residual
        double step = 1.0;
        std::vector<double> xt(n), ft(n);
        bool improved = false;
        for (int ls = 0; ls < 12; ++ls) {
            for (std::size_t j = 0; j < n; ++j) xt[j] = x[j] + step * dz[j] * s[j];
            try {
                evaluate_rhs(live, xt, ft);
            } catch (const Error&) {
                step *= 0.5;
                continue;
            }
            const double rt = scaled_residual(m, ft);
            if (std::isfinite(rt) && rt < res) {
                x = xt;
                f = ft;
                res = rt;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if (!improved) return false;
    }
    return res < opt.tolerance;
}

inline void check_finite(const SystemModel& m, std::span<const double> x, double t) {
    for (std::size_t j = 0; j < x.size(); ++j)
        if (!std::isfinite(x[j])) throw NonFiniteState(t, m.layout().labels[j]);
}

} // namespace detail

/// Settles the live system (its flags and topology) starting from x0.
inline EquilibriumResult settle(const LiveSystem& live, std::vector<double> x0, const EquilibriumOptions& opt = {}) {
    const auto& m = live.model();
    const double dt = opt.dt_s.value_or(m.config().simulation.dt_s);
    const double horizon = opt.max_horizon_s.value_or(m.config().simulation.max_settle_s);
    EquilibriumResult out;
    out.x = std::move(x0);
    Rk4Workspace ws(out.x.size());
    auto f = [&](double, std::span<const double> x, std::span<double> dx) { evaluate_rhs(live, x, dx); };
    std::vector<double> dx(out.x.size());
    const int per_check = std::max(1, static_cast<int>(std::lround(opt.check_interval_s / dt)));
    double stage_t = 0.0;
    while (true) {
        evaluate_rhs(live, out.x, dx);
        double res = scaled_residual(m, dx);
        if (res < opt.tolerance) {
            out.residual = res;
            return out;
        }
        if (res < opt.handoff_tolerance || stage_t >= opt.stage_max_s) {
            std::vector<double> trial = out.x;
            if (detail::newton_polish(live, trial, opt, out.newton_iterations)) {
                out.x = std::move(trial);
                evaluate_rhs(live, out.x, dx);
                out.residual = scaled_residual(m, dx);
                return out;
            }
            stage_t = 0.0;
        }
        if (out.integrated_s >= horizon)
            throw NotSettled("no equilibrium within " + std::to_string(horizon) + " s (scaled residual " +
                             std::to_string(res) + ")");
        for (int k = 0; k < per_check; ++k) {
            ws.step(f, std::span<double>(out.x), out.integrated_s, dt);
            out.integrated_s += dt;
        }
        stage_t += per_check * dt;
        detail::check_finite(m, out.x, out.integrated_s);
    }
}

/// Flat start, then PC only, then the requested levels added in order.
inline EquilibriumResult find_equilibrium(const LiveSystem& base, const ActivationFlags& flags,
                                          const EquilibriumOptions& opt = {}) {
    LiveSystem live = base;
    const double horizon = opt.max_horizon_s.value_or(live.model().config().simulation.max_settle_s);
    EquilibriumOptions o = opt;
    double used = 0.0;
    auto run_stage = [&](std::vector<double> x) {
        o.max_horizon_s = horizon - used;
        auto r = settle(live, std::move(x), o);
        used += r.integrated_s;
        r.integrated_s = used;
        return r;
    };
    live.flags = ActivationFlags::primary_only();
    int iters = 0;
    auto r = run_stage(live.model().flat_start());
    iters += r.newton_iterations;
    if (flags.dsc || flags.tc) {
        live.flags.dsc = flags.dsc;
        live.flags.tc = flags.tc;
        r = run_stage(std::move(r.x));
        iters += r.newton_iterations;
    }
    if (flags.dqc) {
        live.flags = flags;
        r = run_stage(std::move(r.x));
        iters += r.newton_iterations;
    }
    r.newton_iterations = iters;
    return r;
}

inline EquilibriumResult find_equilibrium(const SystemModel& model, const ActivationFlags& flags,
                                          const EquilibriumOptions& opt = {}) {
    return find_equilibrium(LiveSystem(model), flags, opt);
}

// ---------------------------------------------------------------------------
// Run

struct RunOptions {
    double record_interval_s = 1e-3;
    double snapshot_interval_s = 1e-2;
    std::optional<std::vector<double>> initial_state; // default: PC-only equilibrium
};

namespace detail {

inline Trace make_trace_header(const SystemModel& m) {
    Trace tr;
    for (const auto& mg : m.mgs()) {
        tr.mg_ids.push_back(mg.id);
        tr.P_star_W.push_back(mg.droop.P_max);
        tr.Q_star_W.push_back(mg.droop.Q_max);
    }
    for (const auto& dg : m.dgs()) {
        tr.dg_ids.push_back(dg.id);
        tr.dg_mg.push_back(dg.mg);
        tr.P_max_W.push_back(dg.droop.P_max);
        tr.Q_max_W.push_back(dg.droop.Q_max);
    }
    tr.state_labels = m.layout().labels;
    return tr;
}

inline void record(Trace& tr, const LiveSystem& live, std::span<const double> x, double t) {
    const auto obs = observe(live, x);
    tr.t.push_back(t);
    tr.f_sys_Hz.push_back(obs.f_sys_Hz);
    tr.V_c_pu.push_back(obs.V_c_pu);
    tr.P_pcc_W.push_back(obs.P_pcc_W);
    tr.Q_pcc_W.push_back(obs.Q_pcc_W);
    tr.P_dg_W.push_back(obs.P_dg_W);
    tr.Q_dg_W.push_back(obs.Q_dg_W);
    std::vector<char> mg_on(live.model().mgs().size()), dg_on(live.model().dgs().size());
    for (std::size_t k = 0; k < mg_on.size(); ++k) mg_on[k] = live.mg_attached(k) ? 1 : 0;
    for (std::size_t k = 0; k < dg_on.size(); ++k) dg_on[k] = live.dg_attached(k) ? 1 : 0;
    tr.mg_on.push_back(std::move(mg_on));
    tr.dg_on.push_back(std::move(dg_on));
    tr.f_ref_Hz.push_back(live.f_ref_Hz());
    tr.V_c_ref_pu.push_back(live.V_c_ref_pu());
}

} // namespace detail

/// Fixed-step RK4 with events snapped to the step grid.
inline Trace run(const Scenario& sc, const RunOptions& opt = {}) {
    if (!(sc.dt_s > 0.0)) throw ConfigError("scenario dt must be positive");
    const SystemModel model(sc.config);
    LiveSystem live(model);
    std::vector<double> x;
    if (opt.initial_state) {
        x = *opt.initial_state;
        if (x.size() != model.size()) throw std::invalid_argument("run: initial state has wrong size");
    } else {
        EquilibriumOptions eo;
        eo.dt_s = sc.dt_s;
        x = find_equilibrium(live, ActivationFlags::primary_only(), eo).x;
    }
    Trace tr = detail::make_trace_header(model);
    const double dt = sc.dt_s;
    const long steps = std::lround(sc.t_end_s / dt);
    const long rec_every = std::max(1L, std::lround(opt.record_interval_s / dt));
    const long snap_every = std::max(1L, std::lround(opt.snapshot_interval_s / dt));
    Rk4Workspace ws(x.size());
    auto f = [&](double, std::span<const double> xs, std::span<double> dx) { evaluate_rhs(live, xs, dx); };

    std::size_t next_event = 0;
    for (long k = 0;; ++k) {
        const double t = k * dt;
        bool changed = false;
        while (next_event < sc.events.size() && std::lround(sc.events[next_event].t_s / dt) <= k) {
            apply_event(live, x, sc.events[next_event].kind, t, &tr.warnings);
            tr.event_log.push_back("t=" + std::to_string(t) + " s: event " + std::to_string(next_event));
            ++next_event;
            changed = true;
        }
        for (const auto& id : service_sync_requests(live, x, t)) {
            tr.event_log.push_back("t=" + std::to_string(t) + " s: " + id + " closed after synchronisation");
            changed = true;
        }
        if (k % rec_every == 0 || k == steps || changed) detail::record(tr, live, x, t);
        if (k % snap_every == 0 || k == steps) {
            tr.snapshot_t.push_back(t);
            tr.snapshots.push_back(x);
        }
        if (k >= steps) break;
        ws.step(f, std::span<double>(x), t, dt);
        detail::check_finite(model, x, t + dt);
    }
    tr.final_state = x;
    return tr;
}

// ---------------------------------------------------------------------------
// Objective metrics

/// (max - min) / mean, or max - min when the mean vanishes.
inline double spread(const std::vector<double>& r) {
    if (r.size() < 2) return 0.0;
    const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    const double d = *hi - *lo;
    return std::abs(mean) > 1e-12 ? d / std::abs(mean) : d;
}

struct ObjectiveReport {
    double t = 0.0;
    double f_error_Hz = 0.0;       // objective (i)
    double V_c_error_pu = 0.0;     // objective (ii)
    double pcc_P_spread = 0.0;     // objective (iii)-1
    double pcc_Q_spread = 0.0;     // objective (iii)-2
    std::vector<double> dg_P_spread; // objective (iv) per MG
    std::vector<double> dg_Q_spread;
    double dg_P_spread_max = 0.0;
    double dg_Q_spread_max = 0.0;
};

inline ObjectiveReport metrics_at(const Trace& tr, std::size_t s) {
    ObjectiveReport r;
    r.t = tr.t[s];
    r.f_error_Hz = std::abs(tr.f_sys_Hz[s] - tr.f_ref_Hz[s]);
    r.V_c_error_pu = std::abs(tr.V_c_pu[s] - tr.V_c_ref_pu[s]);
    std::vector<double> rp, rq;
    for (std::size_t k = 0; k < tr.mg_ids.size(); ++k) {
        if (!tr.mg_on[s][k]) continue;
        rp.push_back(tr.P_pcc_W[s][k] / tr.P_star_W[k]);
        rq.push_back(tr.Q_pcc_W[s][k] / tr.Q_star_W[k]);
    }
    r.pcc_P_spread = spread(rp);
    r.pcc_Q_spread = spread(rq);
    for (std::size_t k = 0; k < tr.mg_ids.size(); ++k) {
        std::vector<double> p, q;
        for (std::size_t i = 0; i < tr.dg_ids.size(); ++i) {
            if (tr.dg_mg[i] != k || !tr.dg_on[s][i]) continue;
            p.push_back(tr.P_dg_W[s][i] / tr.P_max_W[i]);
            q.push_back(tr.Q_dg_W[s][i] / tr.Q_max_W[i]);
        }
        r.dg_P_spread.push_back(spread(p));
        r.dg_Q_spread.push_back(spread(q));
        r.dg_P_spread_max = std::max(r.dg_P_spread_max, r.dg_P_spread.back());
        r.dg_Q_spread_max = std::max(r.dg_Q_spread_max, r.dg_Q_spread.back());
    }
    return r;
}

/// Objective report at the final sample inside [t1, t2].
inline ObjectiveReport sharing_metrics(const Trace& tr, double t1, double t2) {
    std::optional<std::size_t> last;
    for (std::size_t s = 0; s < tr.t.size(); ++s)
        if (tr.t[s] >= t1 - 1e-12 && tr.t[s] <= t2 + 1e-12) last = s;
    if (!last) throw EmptyWindow("no trace samples in [" + std::to_string(t1) + ", " + std::to_string(t2) + "]");
    return metrics_at(tr, *last);
}

// ---------------------------------------------------------------------------
// Step-response figures

struct Channel {
    std::string name;
    std::vector<double> values;
    double floor = 0.0; // absolute settling band floor
};

/// Every reported channel with its settling floor (f: 0.005 Hz, V_c:
/// 0.005 pu, powers: 1 % of the unit rating).
inline std::vector<Channel> trace_channels(const Trace& tr) {
    std::vector<Channel> out;
    out.push_back({"f_sys_Hz", tr.f_sys_Hz, 0.005});
    out.push_back({"V_c_pu", tr.V_c_pu, 0.005});
    auto column = [&](const std::vector<std::vector<double>>& rows, std::size_t k) {
        std::vector<double> v(rows.size());
        for (std::size_t s = 0; s < rows.size(); ++s) v[s] = rows[s][k];
        return v;
    };
    for (std::size_t k = 0; k < tr.mg_ids.size(); ++k) {
        out.push_back({"P_PCC_" + tr.mg_ids[k], column(tr.P_pcc_W, k), 0.01 * tr.P_star_W[k]});
        out.push_back({"Q_PCC_" + tr.mg_ids[k], column(tr.Q_pcc_W, k), 0.01 * tr.Q_star_W[k]});
    }
    for (std::size_t i = 0; i < tr.dg_ids.size(); ++i) {
        out.push_back({"P_" + tr.dg_ids[i], column(tr.P_dg_W, i), 0.01 * tr.P_max_W[i]});
        out.push_back({"Q_" + tr.dg_ids[i], column(tr.Q_dg_W, i), 0.01 * tr.Q_max_W[i]});
    }
    return out;
}

struct StepResponse {
    double step = 0.0;        // final - initial
    double band = 0.0;
    double settling_s = 0.0;  // after the disturbance
    double overshoot = 0.0;   // beyond the final value, in the step direction
    bool step_defined = false;
};

/// Settling band max(5 % of step, floor); overshoot only for real steps.
inline StepResponse step_response(const std::vector<double>& t, const std::vector<double>& y, double t0,
                                  double t1, double floor) {
    std::size_t a = t.size(), b = 0;
    for (std::size_t s = 0; s < t.size(); ++s) {
        if (t[s] >= t0 - 1e-12 && a == t.size()) a = s;
        if (t[s] <= t1 + 1e-12) b = s;
    }
    if (a >= t.size() || b < a) throw EmptyWindow("step_response: empty window");
    StepResponse r;
    const double y0 = y[a], yf = y[b];
    r.step = yf - y0;
    r.band = std::max(0.05 * std::abs(r.step), floor);
    r.step_defined = std::abs(r.step) > floor;
    double last_out = t0;
    for (std::size_t s = a; s <= b; ++s) {
        if (std::abs(y[s] - yf) > r.band) last_out = t[s];
        if (r.step_defined) r.overshoot = std::max(r.overshoot, (r.step > 0 ? 1.0 : -1.0) * (y[s] - yf));
    }
    r.settling_s = last_out - t0;
    return r;
}

} // namespace nmg
