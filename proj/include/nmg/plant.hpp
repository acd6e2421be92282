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

// Electrical plant in the common rotating DQ frame. Branch currents are
// states; bus voltages are algebraic. Complex notation x = x_D + j x_Q is used
// internally, the Dq aggregate at the public boundary.

#include "nmg/core.hpp"
#include "nmg/numerics.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nmg {

/// Planar rotation of a DQ pair by delta (local frame -> common frame).
inline Dq rotate_to_common(Dq x, double delta) {
    const double c = std::cos(delta), s = std::sin(delta);
    return {c * x.d - s * x.q, s * x.d + c * x.q};
}

enum class VoltageLevel { LV, MV };

struct DgElectrical {
    double R_c = 0.05;   // ohm
    double L_c = 1.8e-3; // H
    std::string bus_id;
    std::string mg_id;
};

struct LineBranch {
    double R = 0.0; // ohm
    double L = 0.0; // H
    std::string from_bus;
    std::string to_bus;
    VoltageLevel level = VoltageLevel::LV;
};

struct RlLoad {
    double R = 0.0; // ohm
    double L = 0.0; // H, 0 means purely resistive (algebraic)
    std::string bus_id;
    double scale = 1.0;
};

struct TransformerSpec {
    double rating = 1e6;  // VA
    double u_k = 0.04;    // pu
    double r_k = 0.01;    // pu
    double ratio = 10.0 / 0.38; // primary (MV) / secondary (LV) volts
    double V_lv = 380.0;  // line-to-line rms at the LV side
};

struct SeriesImpedance {
    double R = 0.0; // ohm
    double X = 0.0; // ohm at rated frequency
};

/// Series equivalent referred to one side; Z_base = V_side^2 / rating.
inline SeriesImpedance transformer_equivalent(const TransformerSpec& t, VoltageLevel side) {
    const double v = side == VoltageLevel::LV ? t.V_lv : t.V_lv * t.ratio;
    const double z_base = v * v / t.rating;
    return {t.r_k * z_base, t.u_k * z_base};
}

// ---------------------------------------------------------------------------
// Branch dynamics: L di/dt = u - R i - j omega L i

inline Complex rl_branch_rhs(Complex i, Complex u, double omega_g, double R, double L) {
    return (u - R * i) / L - Complex(0.0, omega_g) * i;
}

inline Dq line_rhs(Dq i_line, Dq v_from, Dq v_to, double omega_g, const LineBranch& branch) {
    return Dq::from(rl_branch_rhs(i_line.complex(), (v_from - v_to).complex(), omega_g, branch.R, branch.L));
}

/// Admittance scaling: (scale * v - R i) / L, so scale = 0 leaves a free decay.
inline Dq load_rhs(Dq i_load, Dq v_bus, double omega_g, const RlLoad& load) {
    if (load.L <= 0.0) throw std::invalid_argument("load_rhs: resistive loads are algebraic, use load_current");
    return Dq::from(rl_branch_rhs(i_load.complex(), load.scale * v_bus.complex(), omega_g, load.R, load.L));
}

/// Algebraic current of a purely resistive load.
inline Dq load_current(Dq v_bus, const RlLoad& load) {
    return v_bus * (load.scale / load.R);
}

inline Dq dg_output_rhs(Dq i_o, Dq E, Dq v_bus, double omega_g, const DgElectrical& dg) {
    return Dq::from(rl_branch_rhs(i_o.complex(), (E - v_bus).complex(), omega_g, dg.R_c, dg.L_c));
}

struct PowerPair {
    double p = 0.0; // W
    double q = 0.0; // var
};

inline PowerPair measured_power(Dq v_o, Dq i_o) {
    return {1.5 * (v_o.d * i_o.d + v_o.q * i_o.q), 1.5 * (v_o.q * i_o.d - v_o.d * i_o.q)};
}

inline double filter_rhs(double P, double p_measured, double omega_c) {
    return omega_c * (p_measured - P);
}

// ---------------------------------------------------------------------------
// Virtual-resistor bus algebra: v_b = R_N * (net injection at b).

struct PlantBus {
    std::string id;
    VoltageLevel level = VoltageLevel::LV;
    bool energized = true;
};

struct PlantTopology {
    std::vector<PlantBus> buses;
    double R_N = 1000.0;
    std::string critical_bus_id;
    std::vector<std::string> pcc_bus_ids;

    std::size_t index_of(const std::string& id) const {
        for (std::size_t k = 0; k < buses.size(); ++k)
            if (buses[k].id == id) return k;
        throw UnknownId("unknown bus '" + id + "'");
    }
};

struct BusInjection {
    std::size_t bus = 0;
    Dq current;
};

inline std::vector<Dq> bus_voltages(std::span<const BusInjection> injections, const PlantTopology& topo) {
    if (!(topo.R_N > 0.0)) throw std::invalid_argument("bus_voltages: R_N must be positive");
    std::vector<Dq> net(topo.buses.size());
    for (const auto& inj : injections) {
        if (inj.bus >= topo.buses.size()) throw UnknownId("injection references bus index out of range");
        if (!topo.buses[inj.bus].energized)
            throw TopologyError("injection into de-energized bus '" + topo.buses[inj.bus].id + "'");
        net[inj.bus] += inj.current;
    }
    for (auto& v : net) v = v * topo.R_N;
    return net;
}

// ---------------------------------------------------------------------------
// Network solve. Every branch b carries a complex current i_b and obeys
//   L_b di_b/dt = s_b * (c_b . v) + E_b - R_b i_b - j w L_b i_b
// where c_b holds incidence coefficients (+alpha at the sending terminal,
// -alpha at the receiving one, ideal ratios folded into alpha), E_b is a
// source voltage and s_b an admittance scale. The current injected into node
// n is -sum_b c_b[n] i_b.
//
// Nodes carrying a resistive shunt G_n are algebraic: G_n v_n = -sum c i.
// The rest satisfy the differentiated current balance, solved for v with a
// Baumgarte term that pulls the balance residual back to zero. With a shunt
// of 1/R_N at every node this reduces to the virtual-resistor method.

struct NetworkBranch {
    int node1 = -1;
    double alpha1 = 1.0;
    int node2 = -1;
    double alpha2 = 1.0;
    double R = 0.0;
    double L = 1.0;
};

class NodalNetwork {
public:
    static constexpr double kBaumgarte = 200.0; // 1/s
    static constexpr double kOpenTimeConstant = 1e-3; // s, decay of an opened branch

    NodalNetwork() = default;
    NodalNetwork(std::size_t nodes, std::vector<NetworkBranch> branches)
        : nodes_(nodes), branches_(std::move(branches)), scale_(branches_.size(), 1.0),
          forced_(branches_.size(), false), shunt_(nodes, 0.0) {
        for (const auto& b : branches_) {
            if (b.node1 >= static_cast<int>(nodes) || b.node2 >= static_cast<int>(nodes))
                throw TopologyError("network branch references a missing node");
            if (!(b.L > 0.0)) throw TopologyError("network branch needs positive inductance");
        }
        dirty_ = true;
    }

    std::size_t node_count() const noexcept { return nodes_; }
    std::size_t branch_count() const noexcept { return branches_.size(); }
    const NetworkBranch& branch(std::size_t b) const { return branches_.at(b); }

    void set_scale(std::size_t b, double s) {
        if (scale_.at(b) != s) {
            scale_[b] = s;
            dirty_ = true;
        }
    }
    double scale(std::size_t b) const { return scale_.at(b); }
    void set_forced(std::size_t b, bool forced) {
        if (forced_.at(b) != forced) {
            forced_[b] = forced;
            dirty_ = true;
        }
    }
    bool forced(std::size_t b) const { return forced_.at(b); }
    void set_shunt(std::size_t n, double G) {
        if (shunt_.at(n) != G) {
            shunt_[n] = G;
            dirty_ = true;
        }
    }
    double shunt(std::size_t n) const { return shunt_.at(n); }
    bool energized(std::size_t n) const {
        prepare();
        return energized_.at(n);
    }

    /// Node voltages and branch derivatives for given currents and sources.
    void evaluate(std::span<const Complex> i, std::span<const Complex> E, double omega, std::span<Complex> v,
                  std::span<Complex> didt) const {
        prepare();
        const std::size_t nb = branches_.size();
        std::fill(v.begin(), v.end(), Complex{});
        // balance residual o_n = sum c_b[n] i_b
        std::vector<Complex> o(nodes_);
        for (std::size_t b = 0; b < nb; ++b) {
            const auto& br = branches_[b];
            if (br.node1 >= 0) o[br.node1] += br.alpha1 * i[b];
            if (br.node2 >= 0) o[br.node2] -= br.alpha2 * i[b];
        }
        for (std::size_t n = 0; n < nodes_; ++n)
            if (algebraic_[n]) v[n] = -o[n] / shunt_[n];
        if (!free_.empty()) {
            std::vector<Complex> rhs(nodes_);
            for (std::size_t n = 0; n < nodes_; ++n) rhs[n] = -kBaumgarte * o[n];
            const Complex jw(0.0, omega);
            for (std::size_t b = 0; b < nb; ++b) {
                const auto& br = branches_[b];
                Complex term;
                if (forced_[b]) {
                    term = i[b] / kOpenTimeConstant;
                } else {
                    // known part of c.di/dt, moved to the right-hand side
                    Complex known = s_effective(b) * coupling(b, v) + E[b];
                    term = (br.R * i[b] - known) / br.L + jw * i[b];
                    // coupling() used v of algebraic nodes only (free ones still zero)
                }
                if (br.node1 >= 0) rhs[br.node1] += br.alpha1 * term;
                if (br.node2 >= 0) rhs[br.node2] -= br.alpha2 * term;
            }
            std::vector<Complex> packed(free_.size());
            for (std::size_t k = 0; k < free_.size(); ++k) packed[k] = rhs[free_[k]];
            auto sol = lu_->solve(packed);
            for (std::size_t k = 0; k < free_.size(); ++k) v[free_[k]] = sol[k];
        }
        const Complex jw(0.0, omega);
        for (std::size_t b = 0; b < nb; ++b) {
            const auto& br = branches_[b];
            if (forced_[b]) {
                didt[b] = -i[b] / kOpenTimeConstant;
            } else {
                const Complex u = s_effective(b) * coupling(b, v) + E[b];
                didt[b] = (u - br.R * i[b]) / br.L - jw * i[b];
            }
        }
    }

private:
    double s_effective(std::size_t b) const { return forced_[b] ? 0.0 : scale_[b]; }

    Complex coupling(std::size_t b, std::span<const Complex> v) const {
        const auto& br = branches_[b];
        Complex u;
        if (br.node1 >= 0) u += br.alpha1 * v[br.node1];
        if (br.node2 >= 0) u -= br.alpha2 * v[br.node2];
        return u;
    }

    void prepare() const {
        if (!dirty_) return;
        algebraic_.assign(nodes_, false);
        energized_.assign(nodes_, false);
        for (std::size_t n = 0; n < nodes_; ++n) algebraic_[n] = shunt_[n] > 0.0;
        // K over differential nodes: sum s_b c_b c_b^T / L_b
        Matrix K(nodes_, nodes_);
        for (std::size_t b = 0; b < branches_.size(); ++b) {
            const double s = s_effective(b);
            if (s == 0.0) continue;
            const auto& br = branches_[b];
            const int ns[2] = {br.node1, br.node2};
            const double cs[2] = {br.alpha1, -br.alpha2};
            for (int x = 0; x < 2; ++x)
                for (int y = 0; y < 2; ++y)
                    if (ns[x] >= 0 && ns[y] >= 0) K(ns[x], ns[y]) += s * cs[x] * cs[y] / br.L;
        }
        free_.clear();
        for (std::size_t n = 0; n < nodes_; ++n) {
            if (algebraic_[n]) {
                energized_[n] = true;
                continue;
            }
            double rowsum = 0.0;
            for (std::size_t m = 0; m < nodes_; ++m)
                if (!algebraic_[m]) rowsum += std::abs(K(n, m));
            if (rowsum > 0.0) {
                free_.push_back(n);
                energized_[n] = true;
            }
        }
        ComplexMatrix Kf(free_.size(), free_.size());
        for (std::size_t a = 0; a < free_.size(); ++a)
            for (std::size_t c = 0; c < free_.size(); ++c) Kf(a, c) = K(free_[a], free_[c]);
        if (!free_.empty()) {
            try {
                lu_.emplace(std::move(Kf));
            } catch (const SingularMatrix&) {
                throw TopologyError("network contains a floating section without a current path to ground");
            }
        } else {
            lu_.reset();
        }
        dirty_ = false;
    }

    std::size_t nodes_ = 0;
    std::vector<NetworkBranch> branches_;
    std::vector<double> scale_;
    std::vector<bool> forced_;
    std::vector<double> shunt_;

    mutable bool dirty_ = true;
    mutable std::vector<bool> algebraic_;
    mutable std::vector<bool> energized_;
    mutable std::vector<std::size_t> free_;
    mutable std::optional<LuDecomposition<Complex>> lu_;
};

} // namespace nmg
