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

// The four control levels and the communication digraphs they run on.
// The secondary (per-MG) and quaternary (NMG) layers share one consensus
// kernel; only the node set, the graph and the gains differ.

#include "nmg/core.hpp"

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmg {

struct DroopParams {
    double D_P = 0.0;     // rad/s per W
    double D_Q = 0.0;     // V per var
    double omega_n = kTwoPi * 50.0;
    double V_n = 380.0;   // line-to-line rms
    double P_max = 0.0;   // W (P_SMG for an MG unit)
    double Q_max = 0.0;   // var (Q_SMG for an MG unit)
};

struct ConsensusGains {
    double c_omega = 0.0;
    double c_p = 0.0;
    double c_v = 0.0;
    double c_q = 0.0;
};

struct PiGains {
    double k_p = 0.0;          // per unit of voltage error
    double k_i = 0.0;          // 1/s, per unit
    double error_base = 1.0;   // volts the measured error is normalised by
    double output_base = 1.0;  // volts one per unit of output corresponds to
};

/// Consensus corrections of one agent (a DG in the secondary layer, an MG
/// unit in the quaternary layer).
struct ConsensusState {
    double Omega = 0.0;  // rad/s
    double lambda = 0.0; // V
    double h = 0.0;      // V
};
using DscState = ConsensusState;
using DqcState = ConsensusState;

// ---------------------------------------------------------------------------
// CommGraph. a(i, j) > 0 means agent i receives information from agent j.

class CommGraph {
public:
    CommGraph() = default;
    explicit CommGraph(std::vector<std::string> nodes)
        : nodes_(std::move(nodes)), a_(nodes_.size() * nodes_.size(), 0.0),
          up_(nodes_.size() * nodes_.size(), true), g_(nodes_.size(), 0.0), attached_(nodes_.size(), true) {}

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<std::string>& nodes() const noexcept { return nodes_; }

    std::size_t index_of(const std::string& id) const {
        for (std::size_t k = 0; k < nodes_.size(); ++k)
            if (nodes_[k] == id) return k;
        throw UnknownId("unknown graph node '" + id + "'");
    }

    /// Arc j -> i with weight w.
    void set_weight(std::size_t i, std::size_t j, double w) {
        check(i, j);
        if (i == j) throw std::invalid_argument("CommGraph: self-loops are not allowed");
        if (w < 0.0) throw std::invalid_argument("CommGraph: negative weight");
        a_[i * size() + j] = w;
    }
    double weight(std::size_t i, std::size_t j) const {
        check(i, j);
        return a_[i * size() + j];
    }
    void set_pinning(std::size_t i, double g) {
        if (g < 0.0) throw std::invalid_argument("CommGraph: negative pinning gain");
        g_.at(i) = g;
    }
    double pinning(std::size_t i) const { return g_.at(i); }

    bool has_arc(std::size_t i, std::size_t j) const { return weight(i, j) > 0.0; }

    void set_link(std::size_t i, std::size_t j, bool up) {
        check(i, j);
        up_[i * size() + j] = up;
    }
    bool link_up(std::size_t i, std::size_t j) const {
        check(i, j);
        return up_[i * size() + j];
    }

    /// A detached agent (breaker open) neither sends nor receives.
    void set_attached(std::size_t i, bool attached) { attached_.at(i) = attached; }
    bool attached(std::size_t i) const { return attached_.at(i); }

    /// Weight seen by the controllers: drawn weight masked by link status
    /// and attachment of both endpoints.
    double effective_weight(std::size_t i, std::size_t j) const {
        const std::size_t k = i * size() + j;
        return (up_[k] && attached_[i] && attached_[j]) ? a_[k] : 0.0;
    }
    double effective_pinning(std::size_t i) const { return attached_[i] ? g_[i] : 0.0; }

private:
    void check(std::size_t i, std::size_t j) const {
        if (i >= size() || j >= size()) throw std::out_of_range("CommGraph: node index out of range");
    }

    std::vector<std::string> nodes_;
    std::vector<double> a_;
    std::vector<bool> up_;
    std::vector<double> g_;
    std::vector<bool> attached_;
};

/// True iff a single pinned agent reaches every attached agent through
/// links that are currently up.
inline bool has_pinned_spanning_tree(const CommGraph& graph) {
    const std::size_t n = graph.size();
    std::size_t members = 0;
    for (std::size_t i = 0; i < n; ++i) members += graph.attached(i) ? 1 : 0;
    if (members == 0) return false;
    for (std::size_t root = 0; root < n; ++root) {
        if (!(graph.effective_pinning(root) > 0.0)) continue;
        std::vector<bool> seen(n, false);
        std::vector<std::size_t> stack{root};
        seen[root] = true;
        std::size_t count = 1;
        while (!stack.empty()) {
            const std::size_t j = stack.back();
            stack.pop_back();
            for (std::size_t i = 0; i < n; ++i)
                if (!seen[i] && graph.effective_weight(i, j) > 0.0) {
                    seen[i] = true;
                    ++count;
                    stack.push_back(i);
                }
        }
        if (count == members) return true;
    }
    return false;
}

// ---------------------------------------------------------------------------
// Shared consensus kernels

/// -c_omega [sum a_ij (w_i - w_j) + g_i (w_i - w_ref)] - c_p sum a_ij (y_i - y_j)
inline std::vector<double> consensus_freq_rhs(const CommGraph& graph, std::span<const double> omega,
                                              std::span<const double> weighted_p, double omega_ref,
                                              double c_omega, double c_p) {
    const std::size_t n = graph.size();
    if (omega.size() != n || weighted_p.size() != n)
        throw std::invalid_argument("consensus_freq_rhs: size mismatch with graph");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double track = graph.effective_pinning(i) * (omega[i] - omega_ref);
        double share = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double a = graph.effective_weight(i, j);
            if (a == 0.0) continue;
            track += a * (omega[i] - omega[j]);
            share += a * (weighted_p[i] - weighted_p[j]);
        }
        out[i] = -c_omega * track - c_p * share;
    }
    return out;
}

/// -c [sum a_ij (x_i - x_j) + g_i (x_i - ref)]
inline std::vector<double> consensus_tracking_rhs(const CommGraph& graph, std::span<const double> x, double ref,
                                                  double c) {
    const std::size_t n = graph.size();
    if (x.size() != n) throw std::invalid_argument("consensus_tracking_rhs: size mismatch with graph");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double e = graph.effective_pinning(i) * (x[i] - ref);
        for (std::size_t j = 0; j < n; ++j) e += graph.effective_weight(i, j) * (x[i] - x[j]);
        out[i] = -c * e;
    }
    return out;
}

/// -c sum a_ij (y_i - y_j), no pinning term.
inline std::vector<double> consensus_sharing_rhs(const CommGraph& graph, std::span<const double> y, double c) {
    const std::size_t n = graph.size();
    if (y.size() != n) throw std::invalid_argument("consensus_sharing_rhs: size mismatch with graph");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double e = 0.0;
        for (std::size_t j = 0; j < n; ++j) e += graph.effective_weight(i, j) * (y[i] - y[j]);
        out[i] = -c * e;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Primary (DG droop) and secondary layer

struct PrimaryOutput {
    double omega = 0.0; // rad/s
    double E_d = 0.0;   // V, line-to-line rms magnitude on the local d axis
    double E_q = 0.0;
};

inline PrimaryOutput primary_outputs(double P, double Q, const DscState& dsc, const DroopParams& droop) {
    return {droop.omega_n - droop.D_P * P + dsc.Omega, droop.V_n - droop.D_Q * Q + dsc.lambda + dsc.h, 0.0};
}

/// V_f = V_n - D_Q Q + lambda, the quantity the secondary voltage consensus runs on.
inline double secondary_voltage_reference(double Q, const DscState& dsc, const DroopParams& droop) {
    return droop.V_n - droop.D_Q * Q + dsc.lambda;
}

inline std::vector<double> dsc_freq_rhs(const CommGraph& graph, std::span<const double> omega,
                                        std::span<const double> weighted_p, double omega_mg,
                                        const ConsensusGains& gains) {
    return consensus_freq_rhs(graph, omega, weighted_p, omega_mg, gains.c_omega, gains.c_p);
}

inline std::vector<double> dsc_volt_rhs(const CommGraph& graph, std::span<const double> v_f, double v_f_star,
                                        double c_v) {
    return consensus_tracking_rhs(graph, v_f, v_f_star, c_v);
}

inline std::vector<double> dsc_q_rhs(const CommGraph& graph, std::span<const double> weighted_q, double c_q) {
    return consensus_sharing_rhs(graph, weighted_q, c_q);
}

struct PiResult {
    double reference = 0.0; // V
    double dpsi = 0.0;      // pu
};

/// V_ref = V_n + V_out (k_p e + k_i psi), e = (target - measured) / V_err, dpsi/dt = e.
inline PiResult pi_voltage(double target, double measured, double psi, double V_n, const PiGains& gains) {
    const double e = (target - measured) / gains.error_base;
    return {V_n + gains.output_base * (gains.k_p * e + gains.k_i * psi), e};
}

inline PiResult pcc_pi(double v_pcc_star, double v_pcc, double psi_k, double V_n, const PiGains& gains) {
    return pi_voltage(v_pcc_star, v_pcc, psi_k, V_n, gains);
}

inline PiResult critical_pi(double v_c_star, double v_c, double psi, double V_n, const PiGains& gains) {
    return pi_voltage(v_c_star, v_c, psi, V_n, gains);
}

// ---------------------------------------------------------------------------
// Tertiary (MG droop on PCC power) and quaternary layer

struct TertiaryOutput {
    double omega_mg = 0.0;   // rad/s
    double v_pcc_star = 0.0; // V, line-to-line rms
};

inline TertiaryOutput tc_outputs(double P_pcc, double Q_pcc, const DqcState& dqc, const DroopParams& droop) {
    return {droop.omega_n - droop.D_P * P_pcc + dqc.Omega, droop.V_n - droop.D_Q * Q_pcc + dqc.lambda + dqc.h};
}

inline std::vector<double> dqc_freq_rhs(const CommGraph& graph, std::span<const double> omega_mg,
                                        std::span<const double> weighted_p, double omega_sys_star,
                                        const ConsensusGains& gains) {
    return consensus_freq_rhs(graph, omega_mg, weighted_p, omega_sys_star, gains.c_omega, gains.c_p);
}

inline std::vector<double> dqc_volt_rhs(const CommGraph& graph, std::span<const double> v_pcc, double v_f_star,
                                        double c_v) {
    return consensus_tracking_rhs(graph, v_pcc, v_f_star, c_v);
}

inline std::vector<double> dqc_q_rhs(const CommGraph& graph, std::span<const double> weighted_q, double c_q) {
    return consensus_sharing_rhs(graph, weighted_q, c_q);
}

} // namespace nmg
