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

// The assembled nonlinear system: state layout, the immutable compiled
// model, the mutable live topology (breakers, links, activation flags), and
// the right-hand side shared by simulation and linearisation.

#include "nmg/config.hpp"
#include "nmg/control.hpp"
#include "nmg/core.hpp"
#include "nmg/numerics.hpp"
#include "nmg/plant.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace nmg {

struct ActivationFlags {
    bool dsc = false;
    bool tc = false;
    bool dqc = false;

    static ActivationFlags primary_only() { return {}; }
    static ActivationFlags all() { return {true, true, true}; }
    bool operator==(const ActivationFlags&) const = default;
};

/// Per-DG state slots, in order.
enum DgSlot : std::size_t { kDelta = 0, kP, kQ, kOmega, kLambda, kH, kIoD, kIoQ, kDgSlots };
/// Per-MG slots of the upper layer, in order.
enum MgSlot : std::size_t { kPpcc = 0, kQpcc, kOmegaK, kLambdaK, kHK, kIpccD, kIpccQ, kMgSlots };

enum class BranchKind { DgCoupling, Line, Load, Transformer };

struct StateLayout {
    std::vector<std::string> labels;
    std::vector<double> scale; // magnitude used to normalise residuals and finite-difference steps

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t index_of(const std::string& label) const {
        for (std::size_t k = 0; k < labels.size(); ++k)
            if (labels[k] == label) return k;
        throw UnknownId("unknown state '" + label + "'");
    }
    std::size_t add(std::string label, double s) {
        labels.push_back(std::move(label));
        scale.push_back(s);
        return labels.size() - 1;
    }
};

// ---------------------------------------------------------------------------
// Compiled model

struct DgModel {
    std::string id;
    std::size_t mg = 0;      // MG index
    std::size_t local = 0;   // position within the MG
    std::size_t node = 0;    // bus node
    std::size_t branch = 0;  // coupling branch in the network
    std::size_t offset = 0;  // first state
    DroopParams droop;
};

struct MgModel {
    std::string id;
    DroopParams droop;        // tertiary droop on PCC power
    std::size_t pcc_node = 0;
    std::size_t pcc_branch = 0;
    double pcc_coeff = 1.0;   // incidence of the PCC branch at the PCC node
    std::size_t far_node = 0; // other end of the PCC branch
    double far_ratio = 1.0;   // far-side voltage referred to the PCC side
    std::vector<std::size_t> dgs;
    std::size_t psi_offset = 0;
    std::size_t upper_offset = 0; // P_PCC slot of the upper block
    CommGraph graph;
    PiGains pcc_pi;
};

struct BranchModel {
    std::string id;
    BranchKind kind = BranchKind::Line;
    std::size_t offset = 0; // D-axis state, Q follows
    int owner = -1;         // DG index for couplings
};

struct ShuntLoad {
    std::string id;
    std::size_t node = 0;
    double R = 0.0;
};

struct BreakerModel {
    std::string id;
    std::size_t branch = 0;
    int dg = -1; // DG whose coupling the breaker switches
    int mg = -1; // MG whose PCC branch the breaker switches
};

class SystemModel {
public:
    explicit SystemModel(const SystemConfig& cfg) : cfg_(cfg) { build(); }

    const SystemConfig& config() const noexcept { return cfg_; }
    const StateLayout& layout() const noexcept { return layout_; }
    std::size_t size() const noexcept { return layout_.size(); }

    const std::vector<DgModel>& dgs() const noexcept { return dgs_; }
    const std::vector<MgModel>& mgs() const noexcept { return mgs_; }
    const std::vector<BranchModel>& branches() const noexcept { return branches_; }
    const std::vector<ShuntLoad>& shunt_loads() const noexcept { return shunts_; }
    const std::vector<BreakerModel>& breakers() const noexcept { return breakers_; }
    const std::vector<std::string>& nodes() const noexcept { return node_ids_; }
    const std::vector<double>& node_base() const noexcept { return node_base_; }
    const NodalNetwork& network_template() const noexcept { return network_; }
    const CommGraph& nmg_graph() const noexcept { return nmg_graph_; }

    std::size_t anchor() const noexcept { return anchor_; }
    std::size_t critical_node() const noexcept { return critical_node_; }
    double critical_base() const noexcept { return node_base_[critical_node_]; }
    std::size_t global_psi() const noexcept { return psi_; }
    const PiGains& critical_pi_gains() const noexcept { return critical_pi_; }
    double lv_nominal() const noexcept { return lv_nominal_; }
    double omega_n() const noexcept { return omega_n_; }

    std::size_t node_index(const std::string& id) const {
        for (std::size_t k = 0; k < node_ids_.size(); ++k)
            if (node_ids_[k] == id) return k;
        throw UnknownId("unknown bus '" + id + "'");
    }
    std::size_t dg_index(const std::string& id) const {
        for (std::size_t k = 0; k < dgs_.size(); ++k)
            if (dgs_[k].id == id) return k;
        throw UnknownId("unknown DG '" + id + "'");
    }
    std::size_t mg_index(const std::string& id) const {
        for (std::size_t k = 0; k < mgs_.size(); ++k)
            if (mgs_[k].id == id) return k;
        throw UnknownId("unknown MG '" + id + "'");
    }
    std::size_t breaker_index(const std::string& id) const {
        for (std::size_t k = 0; k < breakers_.size(); ++k)
            if (breakers_[k].id == id) return k;
        throw UnknownId("unknown breaker '" + id + "'");
    }
    /// Branch index of an RL load, or -1 for a shunt load.
    int load_branch(const std::string& id) const {
        for (std::size_t k = 0; k < branches_.size(); ++k)
            if (branches_[k].kind == BranchKind::Load && branches_[k].id == id) return static_cast<int>(k);
        return -1;
    }
    int shunt_index(const std::string& id) const {
        for (std::size_t k = 0; k < shunts_.size(); ++k)
            if (shunts_[k].id == id) return static_cast<int>(k);
        return -1;
    }

    /// Flat start: nominal-voltage sources aligned with the frame, no current.
    std::vector<double> flat_start() const { return std::vector<double>(size(), 0.0); }

private:
    void build();

    SystemConfig cfg_;
    StateLayout layout_;
    std::vector<DgModel> dgs_;
    std::vector<MgModel> mgs_;
    std::vector<BranchModel> branches_;
    std::vector<NetworkBranch> net_branches_;
    std::vector<ShuntLoad> shunts_;
    std::vector<BreakerModel> breakers_;
    std::vector<std::string> node_ids_;
    std::vector<double> node_base_; // line-to-line rms nominal volts
    NodalNetwork network_;
    CommGraph nmg_graph_;
    PiGains critical_pi_;
    std::size_t anchor_ = 0;
    std::size_t critical_node_ = 0;
    std::size_t psi_ = 0;
    double lv_nominal_ = 0.0;
    double omega_n_ = 0.0;
};

namespace detail {

inline CommGraph build_graph(const GraphConfig& g, const std::vector<std::string>& nodes) {
    CommGraph graph(nodes);
    for (const auto& e : g.edges) {
        const std::size_t from = graph.index_of(e.from), to = graph.index_of(e.to);
        graph.set_weight(to, from, e.weight);
        if (g.bidirectional) graph.set_weight(from, to, e.weight);
    }
    for (const auto& [id, gain] : g.pinning) graph.set_pinning(graph.index_of(id), gain);
    return graph;
}

} // namespace detail

inline void SystemModel::build() {
    const auto rep = validate(cfg_);
    if (!rep.ok()) throw ConfigError("invalid configuration: " + rep.errors.front());

    omega_n_ = kTwoPi * cfg_.f_n_Hz;
    for (const auto& b : cfg_.buses) {
        node_ids_.push_back(b.id);
        node_base_.push_back(cfg_.bus_kV(b.id) * 1e3);
    }
    auto node_of = [&](const std::string& id) { return node_index(id); };
    auto mg_of_bus = [&](const std::string& bus) { return cfg_.find_bus(bus)->mg; };

    // power scale used for current normalisation
    double s_total = 0.0;
    for (const auto& d : cfg_.dgs) s_total += d.P_max_kW * 1e3;

    const auto& sim = cfg_.simulation;
    std::set<std::string> pcc_branches;
    for (const auto& m : cfg_.mgs) pcc_branches.insert(m.pcc_branch);

    auto add_branch = [&](std::string id, BranchKind kind, NetworkBranch nb, int owner, std::size_t offset) {
        branches_.push_back({std::move(id), kind, offset, owner});
        net_branches_.push_back(nb);
        return branches_.size() - 1;
    };
    auto line_branch = [&](const LineConfig& l) {
        NetworkBranch nb;
        nb.node1 = static_cast<int>(node_of(l.from));
        nb.node2 = static_cast<int>(node_of(l.to));
        nb.R = l.R_ohm;
        nb.L = l.L_H ? *l.L_H : *l.X_ohm / omega_n_;
        return nb;
    };
    auto transformer_branch = [&](const TransformerConfig& t) {
        TransformerSpec spec;
        spec.rating = t.rating_MVA * 1e6;
        spec.u_k = t.u_k_pct / 100.0;
        spec.r_k = t.r_k_pct / 100.0;
        spec.V_lv = cfg_.bus_kV(t.lv_bus) * 1e3;
        spec.ratio = cfg_.bus_kV(t.mv_bus) / cfg_.bus_kV(t.lv_bus);
        const auto z = transformer_equivalent(spec, VoltageLevel::LV);
        NetworkBranch nb;
        nb.node1 = static_cast<int>(node_of(t.lv_bus));
        nb.node2 = static_cast<int>(node_of(t.mv_bus));
        nb.alpha2 = 1.0 / spec.ratio;
        nb.R = z.R;
        nb.L = z.X / omega_n_;
        return nb;
    };
    // Loads given as P/Q are converted at the rated voltage of their bus.
    auto load_impedance = [&](const LoadConfig& l) {
        double R, X = 0.0, L = 0.0;
        if (l.P_kW) {
            const double V = cfg_.bus_kV(l.bus) * 1e3;
            const double P = *l.P_kW * 1e3, Q = l.Q_kvar.value_or(0.0) * 1e3;
            const double s2 = P * P + Q * Q;
            R = V * V * P / s2;
            X = V * V * Q / s2;
            L = X / omega_n_;
        } else {
            R = *l.R_ohm;
            if (l.L_H) L = *l.L_H;
            else if (l.X_ohm) L = *l.X_ohm / omega_n_;
        }
        return std::pair<double, double>(R, L);
    };
    auto add_loads = [&](const std::string& mg, const std::string& prefix_unused) {
        (void)prefix_unused;
        for (const auto& l : cfg_.loads) {
            if (mg_of_bus(l.bus) != mg) continue;
            auto [R, L] = load_impedance(l);
            const double i_scale = s_total / (cfg_.bus_kV(l.bus) * 1e3);
            if (L > 0.0) {
                const std::size_t off = layout_.add(l.id + ".iD", i_scale);
                layout_.add(l.id + ".iQ", i_scale);
                NetworkBranch nb;
                nb.node1 = static_cast<int>(node_of(l.bus));
                nb.R = R;
                nb.L = L;
                add_branch(l.id, BranchKind::Load, nb, -1, off);
            } else {
                shunts_.push_back({l.id, node_of(l.bus), R});
            }
        }
    };

    // per-MG blocks
    for (std::size_t k = 0; k < cfg_.mgs.size(); ++k) {
        const auto& mc = cfg_.mgs[k];
        MgModel mg;
        mg.id = mc.id;
        mg.pcc_node = node_of(mc.pcc_bus);
        const double v_pcc = cfg_.bus_kV(mc.pcc_bus) * 1e3;
        mg.droop = {units::droop_p_to_si(mc.D_P_Hz_per_kW), units::droop_q_to_si(mc.D_Q_V_per_kvar), omega_n_,
                    v_pcc, mc.P_SMG_kW * 1e3, mc.Q_SMG_kvar * 1e3};
        mg.pcc_pi = {cfg_.dsc.k_p_pu, cfg_.dsc.k_i_per_s, v_pcc, sim.pi_output == "volt" ? 1.0 : v_pcc};
        if (lv_nominal_ == 0.0) lv_nominal_ = v_pcc;
        std::vector<std::string> names;
        for (const auto* dc : cfg_.dgs_of(mc.id)) {
            DgModel dg;
            dg.id = dc->id;
            dg.mg = k;
            dg.local = names.size();
            dg.node = node_of(dc->bus);
            const double v_n = cfg_.bus_kV(dc->bus) * 1e3;
            dg.droop = {units::droop_p_to_si(dc->D_P_Hz_per_kW), units::droop_q_to_si(dc->D_Q_V_per_kvar), omega_n_,
                        v_n, dc->P_max_kW * 1e3, dc->Q_max_kvar * 1e3};
            const double P = dg.droop.P_max, Q = dg.droop.Q_max;
            dg.offset = layout_.add(dc->id + ".delta", 1.0);
            layout_.add(dc->id + ".P", P);
            layout_.add(dc->id + ".Q", Q);
            layout_.add(dc->id + ".Omega", omega_n_ * 0.01);
            layout_.add(dc->id + ".lambda", v_n * 0.01);
            layout_.add(dc->id + ".h", v_n * 0.01);
            const double i_scale = P / v_n;
            layout_.add(dc->id + ".ioD", i_scale);
            layout_.add(dc->id + ".ioQ", i_scale);
            NetworkBranch nb;
            nb.node2 = static_cast<int>(dg.node);
            nb.R = dc->R_c_ohm.value_or(sim.R_c_ohm);
            nb.L = dc->L_c_H.value_or(sim.L_c_H);
            dg.branch = add_branch(dc->id, BranchKind::DgCoupling, nb, static_cast<int>(dgs_.size()),
                                   dg.offset + kIoD);
            mg.dgs.push_back(dgs_.size());
            names.push_back(dc->id);
            dgs_.push_back(dg);
        }
        for (const auto& l : cfg_.lines) {
            if (mg_of_bus(l.from) != mc.id || mg_of_bus(l.to) != mc.id) continue;
            const double i_scale = s_total / (cfg_.bus_kV(l.from) * 1e3);
            const std::size_t off = layout_.add(l.id + ".iD", i_scale);
            layout_.add(l.id + ".iQ", i_scale);
            add_branch(l.id, BranchKind::Line, line_branch(l), -1, off);
        }
        add_loads(mc.id, mc.id);
        mg.psi_offset = layout_.add(mc.id + ".psi", 1.0);
        mg.graph = detail::build_graph(*cfg_.find_mg_graph(mc.id), names);
        mgs_.push_back(std::move(mg));
    }

    // upper (NMG) block
    for (std::size_t k = 0; k < mgs_.size(); ++k) {
        auto& mg = mgs_[k];
        const auto& mc = cfg_.mgs[k];
        mg.upper_offset = layout_.add(mc.id + ".P_PCC", mg.droop.P_max);
        layout_.add(mc.id + ".Q_PCC", mg.droop.Q_max);
        layout_.add(mc.id + ".Omega", omega_n_ * 0.01);
        layout_.add(mc.id + ".lambda", mg.droop.V_n * 0.01);
        layout_.add(mc.id + ".h", mg.droop.V_n * 0.01);
        const double i_scale = s_total / mg.droop.V_n;
        const std::size_t off = layout_.add(mc.id + ".iPCC_D", i_scale);
        layout_.add(mc.id + ".iPCC_Q", i_scale);
        NetworkBranch nb;
        BranchKind kind;
        if (const auto* l = cfg_.find_line(mc.pcc_branch)) {
            nb = line_branch(*l);
            kind = BranchKind::Line;
        } else {
            nb = transformer_branch(*cfg_.find_transformer(mc.pcc_branch));
            kind = BranchKind::Transformer;
        }
        mg.pcc_branch = add_branch(mc.pcc_branch, kind, nb, -1, off);
        if (nb.node1 == static_cast<int>(mg.pcc_node)) {
            mg.pcc_coeff = nb.alpha1;
            mg.far_node = static_cast<std::size_t>(nb.node2);
            mg.far_ratio = nb.alpha2 / nb.alpha1;
        } else {
            mg.pcc_coeff = -nb.alpha2;
            mg.far_node = static_cast<std::size_t>(nb.node1);
            mg.far_ratio = nb.alpha1 / nb.alpha2;
        }
    }
    for (const auto& l : cfg_.lines) {
        const bool internal = !mg_of_bus(l.from).empty() && mg_of_bus(l.from) == mg_of_bus(l.to);
        if (internal || pcc_branches.count(l.id)) continue;
        const double i_scale = s_total / (cfg_.bus_kV(l.from) * 1e3);
        const std::size_t off = layout_.add(l.id + ".iD", i_scale);
        layout_.add(l.id + ".iQ", i_scale);
        add_branch(l.id, BranchKind::Line, line_branch(l), -1, off);
    }
    for (const auto& t : cfg_.transformers) {
        if (pcc_branches.count(t.id)) continue;
        const double i_scale = s_total / (cfg_.bus_kV(t.lv_bus) * 1e3);
        const std::size_t off = layout_.add(t.id + ".iD", i_scale);
        layout_.add(t.id + ".iQ", i_scale);
        add_branch(t.id, BranchKind::Transformer, transformer_branch(t), -1, off);
    }
    add_loads("", "nmg");
    psi_ = layout_.add("NMG.psi", 1.0);

    // communication and references
    std::vector<std::string> mg_names;
    for (const auto& m : mgs_) mg_names.push_back(m.id);
    nmg_graph_ = detail::build_graph(cfg_.nmg_graph, mg_names);
    anchor_ = dg_index(sim.frame_anchor);
    critical_node_ = node_of(cfg_.references.critical_bus);
    critical_pi_ = {cfg_.dqc.k_p_pu, cfg_.dqc.k_i_per_s, node_base_[critical_node_],
                    sim.pi_output == "volt" ? 1.0 : lv_nominal_};

    for (const auto& b : cfg_.breakers) {
        BreakerModel bm;
        bm.id = b.id;
        bool found = false;
        for (std::size_t k = 0; k < branches_.size(); ++k)
            if (branches_[k].id == b.branch && branches_[k].kind != BranchKind::Load) {
                bm.branch = k;
                found = true;
                if (branches_[k].kind == BranchKind::DgCoupling) bm.dg = branches_[k].owner;
            }
        if (!found) throw ConfigError("breaker " + b.id + ": branch '" + b.branch + "' not found");
        for (std::size_t k = 0; k < mgs_.size(); ++k)
            if (mgs_[k].pcc_branch == bm.branch) bm.mg = static_cast<int>(k);
        breakers_.push_back(bm);
    }

    network_ = NodalNetwork(node_ids_.size(), net_branches_);
    for (std::size_t n = 0; n < node_ids_.size(); ++n) {
        double G = sim.network_solver == "virtual_resistor" ? 1.0 / sim.R_N_ohm : 0.0;
        for (const auto& s : shunts_)
            if (s.node == n) G += 1.0 / s.R;
        network_.set_shunt(n, G);
    }
}

// ---------------------------------------------------------------------------
// Live system: everything events may change.

struct SyncRequest {
    bool pending = false;
    double not_before = 0.0;
};

struct ObservedOutputs {
    double f_sys_Hz = 0.0;
    double V_c_pu = 0.0;
    std::vector<double> P_pcc_W, Q_pcc_W; // filtered states
    std::vector<double> P_dg_W, Q_dg_W;   // filtered states
    std::vector<double> omega_dg;         // rad/s
    std::vector<Complex> v_nodes;         // peak-phase DQ volts
};

class LiveSystem {
public:
    explicit LiveSystem(const SystemModel& model)
        : model_(&model), network_(model.network_template()), nmg_graph_(model.nmg_graph()) {
        for (const auto& m : model.mgs()) mg_graphs_.push_back(m.graph);
        load_scale_.assign(model.branches().size(), 1.0);
        shunt_scale_.assign(model.shunt_loads().size(), 1.0);
        breaker_open_.assign(model.breakers().size(), false);
        dg_attached_.assign(model.dgs().size(), true);
        mg_attached_.assign(model.mgs().size(), true);
        dg_sync_.assign(model.dgs().size(), {});
        mg_sync_.assign(model.mgs().size(), {});
        f_ref_Hz_ = model.config().references.f_sys_Hz;
        V_c_ref_pu_ = model.config().references.V_c_pu;
        refresh();
    }

    const SystemModel& model() const noexcept { return *model_; }
    const NodalNetwork& network() const noexcept { return network_; }
    ActivationFlags flags;

    double f_ref_Hz() const noexcept { return f_ref_Hz_; }
    double V_c_ref_pu() const noexcept { return V_c_ref_pu_; }
    void set_f_ref_Hz(double f) { f_ref_Hz_ = f; }
    void set_V_c_ref_pu(double v) { V_c_ref_pu_ = v; }

    const CommGraph& mg_graph(std::size_t k) const { return mg_graphs_.at(k); }
    CommGraph& mg_graph(std::size_t k) { return mg_graphs_.at(k); }
    const CommGraph& nmg_graph() const noexcept { return nmg_graph_; }
    CommGraph& nmg_graph() noexcept { return nmg_graph_; }

    bool dg_attached(std::size_t i) const { return dg_attached_.at(i); }
    bool mg_attached(std::size_t k) const { return mg_attached_.at(k); }
    bool breaker_open(std::size_t b) const { return breaker_open_.at(b); }
    const SyncRequest& dg_sync(std::size_t i) const { return dg_sync_.at(i); }
    const SyncRequest& mg_sync(std::size_t k) const { return mg_sync_.at(k); }
    SyncRequest& dg_sync(std::size_t i) { return dg_sync_.at(i); }
    SyncRequest& mg_sync(std::size_t k) { return mg_sync_.at(k); }

    void set_load_scale(const std::string& load, double s) {
        const int b = model_->load_branch(load);
        if (b >= 0) {
            load_scale_[b] = s;
            network_.set_scale(static_cast<std::size_t>(b), s);
        } else {
            const int k = model_->shunt_index(load);
            if (k < 0) throw UnknownId("unknown load '" + load + "'");
            shunt_scale_[k] = s;
        }
        refresh();
    }
    double load_scale(const std::string& load) const {
        const int b = model_->load_branch(load);
        if (b >= 0) return load_scale_[b];
        const int k = model_->shunt_index(load);
        if (k < 0) throw UnknownId("unknown load '" + load + "'");
        return shunt_scale_[k];
    }

    /// Opens or closes a breaker (no synchronisation check here).
    void set_breaker(std::size_t b, bool open) {
        const auto& bm = model_->breakers().at(b);
        breaker_open_[b] = open;
        network_.set_forced(bm.branch, open);
        if (bm.dg >= 0) {
            dg_attached_[bm.dg] = !open;
            auto& g = mg_graphs_[model_->dgs()[bm.dg].mg];
            g.set_attached(model_->dgs()[bm.dg].local, !open);
        }
        if (bm.mg >= 0) {
            mg_attached_[bm.mg] = !open;
            nmg_graph_.set_attached(static_cast<std::size_t>(bm.mg), !open);
        }
        refresh();
    }

    /// Electrical island of each node (-1 when de-energised) and of each DG.
    int node_island(std::size_t n) const { return node_island_.at(n); }
    int dg_island(std::size_t i) const { return dg_island_.at(i); }

private:
    void refresh() {
        const auto& m = *model_;
        const auto& sim = m.config().simulation;
        for (std::size_t n = 0; n < m.nodes().size(); ++n) {
            double G = sim.network_solver == "virtual_resistor" ? 1.0 / sim.R_N_ohm : 0.0;
            for (std::size_t k = 0; k < m.shunt_loads().size(); ++k)
                if (m.shunt_loads()[k].node == n) G += shunt_scale_[k] / m.shunt_loads()[k].R;
            network_.set_shunt(n, G);
        }
        // union-find over closed lines/transformers
        const std::size_t nn = m.nodes().size();
        std::vector<std::size_t> parent(nn);
        std::iota(parent.begin(), parent.end(), std::size_t{0});
        auto find = [&](std::size_t x) {
            while (parent[x] != x) x = parent[x] = parent[parent[x]];
            return x;
        };
        for (std::size_t b = 0; b < m.branches().size(); ++b) {
            const auto kind = m.branches()[b].kind;
            if (kind != BranchKind::Line && kind != BranchKind::Transformer) continue;
            if (network_.forced(b)) continue;
            const auto& nb = network_.branch(b);
            parent[find(nb.node1)] = find(nb.node2);
        }
        node_island_.assign(nn, -1);
        for (std::size_t n = 0; n < nn; ++n)
            if (network_.energized(n)) node_island_[n] = static_cast<int>(find(n));
        dg_island_.assign(m.dgs().size(), -1);
        for (std::size_t i = 0; i < m.dgs().size(); ++i)
            dg_island_[i] = dg_attached_[i] ? node_island_[m.dgs()[i].node] : -2 - static_cast<int>(i);
    }

    const SystemModel* model_;
    NodalNetwork network_;
    std::vector<CommGraph> mg_graphs_;
    CommGraph nmg_graph_;
    std::vector<double> load_scale_;
    std::vector<double> shunt_scale_;
    std::vector<bool> breaker_open_;
    std::vector<bool> dg_attached_;
    std::vector<bool> mg_attached_;
    std::vector<SyncRequest> dg_sync_;
    std::vector<SyncRequest> mg_sync_;
    std::vector<int> node_island_;
    std::vector<int> dg_island_;
    double f_ref_Hz_ = 50.0;
    double V_c_ref_pu_ = 1.0;
};

// ---------------------------------------------------------------------------
// Right-hand side

namespace detail {

struct Electrical {
    std::vector<Complex> E;     // per branch source
    std::vector<Complex> i;     // per branch current
    std::vector<Complex> v;     // per node
    std::vector<Complex> didt;  // per branch
    std::vector<double> omega;  // per DG
    std::vector<double> E_ll;   // per DG, line-to-line rms magnitude
};

inline Electrical solve_electrical(const LiveSystem& live, std::span<const double> x) {
    const auto& m = live.model();
    Electrical el;
    const std::size_t nb = m.branches().size();
    el.E.assign(nb, Complex{});
    el.i.resize(nb);
    el.didt.resize(nb);
    el.v.resize(m.nodes().size());
    el.omega.resize(m.dgs().size());
    el.E_ll.resize(m.dgs().size());
    for (std::size_t k = 0; k < m.dgs().size(); ++k) {
        const auto& dg = m.dgs()[k];
        const double* s = x.data() + dg.offset;
        const auto out = primary_outputs(s[kP], s[kQ], {s[kOmega], s[kLambda], s[kH]}, dg.droop);
        el.omega[k] = out.omega;
        el.E_ll[k] = out.E_d;
        el.E[dg.branch] = std::polar(out.E_d * kLineRmsToDq, s[kDelta]);
    }
    for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t o = m.branches()[b].offset;
        el.i[b] = {x[o], x[o + 1]};
    }
    const double omega_g = el.omega[m.anchor()];
    live.network().evaluate(el.i, el.E, omega_g, el.v, el.didt);
    return el;
}

/// Mean DG frequency of an island; falls back to nominal when it has none.
inline double island_omega(const LiveSystem& live, const Electrical& el, int island) {
    double s = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < el.omega.size(); ++k)
        if (live.dg_island(k) == island) {
            s += el.omega[k];
            ++n;
        }
    return n > 0 ? s / n : live.model().omega_n();
}

inline double pcc_voltage_ll(const MgModel& mg, const Electrical& el) {
    return std::abs(el.v[mg.pcc_node]) * kDqToLineRms;
}

} // namespace detail

/// Evaluates dx/dt (and optionally the observed outputs) at state x.
inline void evaluate_rhs(const LiveSystem& live, std::span<const double> x, std::span<double> dx,
                         ObservedOutputs* obs = nullptr) {
    const auto& m = live.model();
    const auto& cfg = m.config();
    if (x.size() != m.size() || dx.size() != m.size()) throw std::invalid_argument("evaluate_rhs: size mismatch");
    std::fill(dx.begin(), dx.end(), 0.0);

    auto el = detail::solve_electrical(live, x);
    const double omega_g = el.omega[m.anchor()];
    const double omega_c = cfg.simulation.omega_c_rad_per_s;
    const auto& sync = cfg.sync;

    for (std::size_t b = 0; b < m.branches().size(); ++b) {
        const std::size_t o = m.branches()[b].offset;
        dx[o] = el.didt[b].real();
        dx[o + 1] = el.didt[b].imag();
    }

    // measurements and frame angles
    for (std::size_t k = 0; k < m.dgs().size(); ++k) {
        const auto& dg = m.dgs()[k];
        const auto pq = measured_power(Dq::from(el.E[dg.branch]), Dq::from(el.i[dg.branch]));
        dx[dg.offset + kP] = filter_rhs(x[dg.offset + kP], pq.p, omega_c);
        dx[dg.offset + kQ] = filter_rhs(x[dg.offset + kQ], pq.q, omega_c);
        dx[dg.offset + kDelta] = k == m.anchor() ? 0.0 : el.omega[k] - omega_g;
    }
    std::vector<double> v_pcc(m.mgs().size());
    for (std::size_t k = 0; k < m.mgs().size(); ++k) {
        const auto& mg = m.mgs()[k];
        const Complex i_exp = mg.pcc_coeff * el.i[mg.pcc_branch];
        const auto pq = measured_power(Dq::from(el.v[mg.pcc_node]), Dq::from(i_exp));
        dx[mg.upper_offset + kPpcc] = filter_rhs(x[mg.upper_offset + kPpcc], pq.p, omega_c);
        dx[mg.upper_offset + kQpcc] = filter_rhs(x[mg.upper_offset + kQpcc], pq.q, omega_c);
        v_pcc[k] = detail::pcc_voltage_ll(mg, el);
    }

    const double V_c_volts = std::abs(el.v[m.critical_node()]) * kDqToLineRms;
    const double V_c_pu = V_c_volts / m.critical_base();
    const double omega_sys_star = kTwoPi * live.f_ref_Hz();

    // quaternary level
    const std::size_t nm = m.mgs().size();
    std::vector<ConsensusState> dqc(nm);
    for (std::size_t k = 0; k < nm; ++k) {
        const std::size_t o = m.mgs()[k].upper_offset;
        dqc[k] = {x[o + kOmegaK], x[o + kLambdaK], x[o + kHK]};
    }
    if (live.flags.dqc) {
        std::vector<double> omega_mg(nm), yP(nm), vsig(nm), yQ(nm);
        for (std::size_t k = 0; k < nm; ++k) {
            const auto& mg = m.mgs()[k];
            const double P = x[mg.upper_offset + kPpcc], Q = x[mg.upper_offset + kQpcc];
            omega_mg[k] = tc_outputs(P, Q, dqc[k], mg.droop).omega_mg;
            yP[k] = mg.droop.D_P * P;
            yQ[k] = mg.droop.D_Q * Q;
            vsig[k] = cfg.simulation.dqc_voltage_signal == "measured"
                          ? v_pcc[k]
                          : mg.droop.V_n - mg.droop.D_Q * Q + dqc[k].lambda;
        }
        const auto pi = critical_pi(live.V_c_ref_pu() * m.critical_base(), V_c_volts, x[m.global_psi()],
                                    m.lv_nominal(), m.critical_pi_gains());
        dx[m.global_psi()] = pi.dpsi;
        const auto& g = live.nmg_graph();
        const auto dO = dqc_freq_rhs(g, omega_mg, yP, omega_sys_star,
                                     {cfg.dqc.c_omega_per_s, cfg.dqc.c_p_per_s, 0.0, 0.0});
        const auto dL = dqc_volt_rhs(g, vsig, pi.reference, cfg.dqc.c_v_per_s);
        const auto dH = dqc_q_rhs(g, yQ, cfg.dqc.c_q_per_s);
        for (std::size_t k = 0; k < nm; ++k) {
            if (!live.mg_attached(k)) continue;
            const std::size_t o = m.mgs()[k].upper_offset;
            dx[o + kOmegaK] = dO[k];
            dx[o + kLambdaK] = dL[k];
            dx[o + kHK] = dH[k];
        }
    }

    // tertiary level -> references for the secondary level
    std::vector<TertiaryOutput> tert(nm);
    for (std::size_t k = 0; k < nm; ++k) {
        const auto& mg = m.mgs()[k];
        if (live.mg_sync(k).pending) {
            // drive the island onto the far side in frequency, phase and magnitude
            const Complex v_far = mg.far_ratio * el.v[mg.far_node];
            const double dphi = wrap_angle(std::arg(el.v[mg.pcc_node]) - std::arg(v_far));
            const double w_far = detail::island_omega(live, el, live.node_island(mg.far_node));
            tert[k] = {w_far - sync.k_theta_per_s * dphi, std::abs(v_far) * kDqToLineRms};
        } else if (live.flags.tc && live.mg_attached(k)) {
            tert[k] = tc_outputs(x[mg.upper_offset + kPpcc], x[mg.upper_offset + kQpcc], dqc[k], mg.droop);
        } else {
            tert[k] = {mg.droop.omega_n, mg.droop.V_n};
        }
    }

    // secondary level
    if (live.flags.dsc) {
        for (std::size_t k = 0; k < nm; ++k) {
            const auto& mg = m.mgs()[k];
            const std::size_t n = mg.dgs.size();
            std::vector<double> w(n), yP(n), vf(n), yQ(n);
            for (std::size_t j = 0; j < n; ++j) {
                const auto& dg = m.dgs()[mg.dgs[j]];
                const double* s = x.data() + dg.offset;
                w[j] = el.omega[mg.dgs[j]];
                yP[j] = dg.droop.D_P * s[kP];
                yQ[j] = dg.droop.D_Q * s[kQ];
                vf[j] = secondary_voltage_reference(s[kQ], {s[kOmega], s[kLambda], s[kH]}, dg.droop);
            }
            const auto pi = pcc_pi(tert[k].v_pcc_star, v_pcc[k], x[mg.psi_offset], mg.droop.V_n, mg.pcc_pi);
            dx[mg.psi_offset] = pi.dpsi;
            const auto& g = live.mg_graph(k);
            const auto dO = dsc_freq_rhs(g, w, yP, tert[k].omega_mg,
                                         {cfg.dsc.c_omega_per_s, cfg.dsc.c_p_per_s, 0.0, 0.0});
            const auto dL = dsc_volt_rhs(g, vf, pi.reference, cfg.dsc.c_v_per_s);
            const auto dH = dsc_q_rhs(g, yQ, cfg.dsc.c_q_per_s);
            for (std::size_t j = 0; j < n; ++j) {
                if (!live.dg_attached(mg.dgs[j])) continue;
                const std::size_t o = m.dgs()[mg.dgs[j]].offset;
                dx[o + kOmega] = dO[j];
                dx[o + kLambda] = dL[j];
                dx[o + kH] = dH[j];
            }
        }
    }

    // DG synchronisation overrides the secondary corrections of that unit
    for (std::size_t k = 0; k < m.dgs().size(); ++k) {
        if (!live.dg_sync(k).pending) continue;
        const auto& dg = m.dgs()[k];
        const Complex v_bus = el.v[dg.node];
        const double dphi = wrap_angle(std::arg(el.E[dg.branch]) - std::arg(v_bus));
        const double w_bus = detail::island_omega(live, el, live.node_island(dg.node));
        dx[dg.offset + kOmega] = -sync.a_omega_per_s * (el.omega[k] - (w_bus - sync.k_theta_per_s * dphi));
        dx[dg.offset + kLambda] = -sync.a_v_per_s * (el.E_ll[k] - std::abs(v_bus) * kDqToLineRms);
        dx[dg.offset + kH] = 0.0;
    }
    // MG synchronisation: the PCC loop alone is too slow to close the magnitude gap, so the
    // secondary voltage corrections of the island are driven on the PCC error directly
    for (std::size_t k = 0; k < nm; ++k) {
        if (!live.mg_sync(k).pending) continue;
        const auto& mg = m.mgs()[k];
        const double v_far = std::abs(mg.far_ratio * el.v[mg.far_node]) * kDqToLineRms;
        dx[mg.psi_offset] = 0.0;
        for (const std::size_t i : mg.dgs) {
            if (!live.dg_attached(i) || live.dg_sync(i).pending) continue;
            const std::size_t o = m.dgs()[i].offset;
            dx[o + kLambda] = -sync.a_v_per_s * (v_pcc[k] - v_far);
            dx[o + kH] = 0.0;
        }
    }

    if (obs) {
        const int crit_island = live.node_island(m.critical_node());
        obs->f_sys_Hz = units::rad_to_hz(detail::island_omega(live, el, crit_island));
        obs->V_c_pu = V_c_pu;
        obs->P_pcc_W.resize(nm);
        obs->Q_pcc_W.resize(nm);
        for (std::size_t k = 0; k < nm; ++k) {
            obs->P_pcc_W[k] = x[m.mgs()[k].upper_offset + kPpcc];
            obs->Q_pcc_W[k] = x[m.mgs()[k].upper_offset + kQpcc];
        }
        obs->P_dg_W.resize(m.dgs().size());
        obs->Q_dg_W.resize(m.dgs().size());
        for (std::size_t k = 0; k < m.dgs().size(); ++k) {
            obs->P_dg_W[k] = x[m.dgs()[k].offset + kP];
            obs->Q_dg_W[k] = x[m.dgs()[k].offset + kQ];
        }
        obs->omega_dg = el.omega;
        obs->v_nodes = el.v;
    }
}

inline std::vector<double> evaluate_rhs(const LiveSystem& live, std::span<const double> x) {
    std::vector<double> dx(x.size());
    evaluate_rhs(live, x, dx);
    return dx;
}

inline ObservedOutputs observe(const LiveSystem& live, std::span<const double> x) {
    std::vector<double> dx(x.size());
    ObservedOutputs obs;
    evaluate_rhs(live, x, dx, &obs);
    return obs;
}

/// max_j |dx_j/dt| / scale_j
inline double scaled_residual(const SystemModel& m, std::span<const double> dx) {
    double r = 0.0;
    for (std::size_t j = 0; j < dx.size(); ++j) r = std::max(r, std::abs(dx[j]) / m.layout().scale[j]);
    return r;
}

} // namespace nmg
