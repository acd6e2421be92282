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
#include "nmg/plant.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace nmg;

namespace {

constexpr double kW = 2.0 * 3.14159265358979323846 * 50.0;

double norm(Dq x) { return std::hypot(x.d, x.q); }

} // namespace

TEST(Rotation, HandCases) {
    auto r = rotate_to_common({1, 0}, 0.0);
    EXPECT_DOUBLE_EQ(r.d, 1.0);
    EXPECT_DOUBLE_EQ(r.q, 0.0);
    r = rotate_to_common({1, 0}, kPi / 2);
    EXPECT_NEAR(r.d, 0.0, 1e-15);
    EXPECT_NEAR(r.q, 1.0, 1e-15);
    r = rotate_to_common({1, 0}, kPi / 6);
    EXPECT_NEAR(r.d, 0.8660254038, 1e-9);
    EXPECT_NEAR(r.q, 0.5, 1e-9);
}

TEST(Rotation, NormAndComposition) {
    for (double a : {-2.0, -0.3, 0.7, 3.1}) {
        for (double b : {-1.1, 0.4, 2.5}) {
            const Dq x{3.0, -4.0};
            EXPECT_NEAR(norm(rotate_to_common(x, a)), 5.0, 1e-12);
            const auto ab = rotate_to_common(rotate_to_common(x, b), a);
            const auto c = rotate_to_common(x, a + b);
            EXPECT_NEAR(ab.d, c.d, 1e-12);
            EXPECT_NEAR(ab.q, c.q, 1e-12);
        }
    }
}

TEST(BusVoltages, VirtualResistorCases) {
    PlantTopology topo;
    topo.buses = {{"b1", VoltageLevel::LV, true}, {"b2", VoltageLevel::LV, true}};
    std::vector<BusInjection> one{{0, {1, 0}}};
    auto v = bus_voltages(one, topo);
    EXPECT_DOUBLE_EQ(v[0].d, 1000.0);
    EXPECT_DOUBLE_EQ(v[0].q, 0.0);
    EXPECT_EQ(v[1].d, 0.0);
    v = bus_voltages(std::vector<BusInjection>{}, topo);
    EXPECT_EQ(v[0].d, 0.0);
    EXPECT_EQ(v[1].q, 0.0);
    std::vector<BusInjection> cancel{{0, {1, 0}}, {0, {-1, 0}}};
    v = bus_voltages(cancel, topo);
    EXPECT_EQ(v[0].d, 0.0);
}

TEST(BusVoltages, Superposition) {
    PlantTopology topo;
    topo.R_N = 750.0;
    topo.buses = {{"a", VoltageLevel::LV, true}, {"b", VoltageLevel::MV, true}, {"c", VoltageLevel::LV, true}};
    std::vector<BusInjection> s1{{0, {1.5, -2}}, {2, {0.25, 4}}};
    std::vector<BusInjection> s2{{1, {-3, 1}}, {2, {1, 1}}};
    auto both = s1;
    both.insert(both.end(), s2.begin(), s2.end());
    const auto v1 = bus_voltages(s1, topo), v2 = bus_voltages(s2, topo), v = bus_voltages(both, topo);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_NEAR(v[k].d, v1[k].d + v2[k].d, 1e-12 * std::max(1.0, norm(v[k])));
        EXPECT_NEAR(v[k].q, v1[k].q + v2[k].q, 1e-12 * std::max(1.0, norm(v[k])));
    }
}

TEST(BusVoltages, DeEnergizedBusThrows) {
    PlantTopology topo;
    topo.buses = {{"a", VoltageLevel::LV, false}};
    std::vector<BusInjection> inj{{0, {1, 0}}};
    EXPECT_THROW(bus_voltages(inj, topo), TopologyError);
}

TEST(LineRhs, PhasorEquilibrium) {
    const LineBranch br{0.3, 2e-3, "a", "b", VoltageLevel::LV};
    const Complex i(40.0, -12.0);
    const Complex du = (br.R + Complex(0, kW * br.L)) * i;
    const Dq v_to{300.0, 20.0};
    const Dq v_from = v_to + Dq::from(du);
    const auto r = line_rhs(Dq::from(i), v_from, v_to, kW, br);
    EXPECT_LT(norm(r), 1e-9 * std::abs(du) / br.L);
}

TEST(LineRhs, InductorStepAndLinearity) {
    LineBranch br{0.3, 2e-3, "a", "b", VoltageLevel::LV};
    auto r = line_rhs({0, 0}, {1, 0}, {0, 0}, kW, br);
    EXPECT_DOUBLE_EQ(r.d, 1.0 / br.L);
    EXPECT_DOUBLE_EQ(r.q, 0.0);
    br.L *= 2.0;
    const auto r2 = line_rhs({0, 0}, {1, 0}, {0, 0}, kW, br);
    EXPECT_DOUBLE_EQ(r2.d, 0.5 * r.d);
}

TEST(LoadRhs, OpenLoadDecaysAndPhasorEquilibrium) {
    RlLoad load{2.0, 5e-3, "b", 0.0};
    const auto r = load_rhs({10, 0}, {300, 0}, kW, load);
    EXPECT_LT(r.d, 0.0); // -R/L i
    EXPECT_NEAR(r.d, -load.R / load.L * 10.0, 1e-9);
    load.scale = 1.5;
    const Complex v(310.0, -25.0);
    const Complex i = load.scale * v / (load.R + Complex(0, kW * load.L));
    EXPECT_LT(norm(load_rhs(Dq::from(i), Dq::from(v), kW, load)), 1e-9 * std::abs(v) / load.L);
}

TEST(LoadRhs, ResistiveLoadIsAlgebraic) {
    RlLoad load{4.0, 0.0, "b", 1.0};
    EXPECT_THROW(load_rhs({0, 0}, {1, 0}, kW, load), std::invalid_argument);
    const auto i1 = load_current({200, 40}, load);
    load.R *= 2.0;
    const auto i2 = load_current({200, 40}, load);
    EXPECT_DOUBLE_EQ(i2.d, 0.5 * i1.d);
    EXPECT_DOUBLE_EQ(i2.q, 0.5 * i1.q);
}

TEST(DgOutputRhs, MirrorsLineCases) {
    DgElectrical dg;
    const Complex i(25.0, 5.0);
    const Dq v{305.0, -3.0};
    const Dq E = v + Dq::from((dg.R_c + Complex(0, kW * dg.L_c)) * i);
    EXPECT_LT(norm(dg_output_rhs(Dq::from(i), E, v, kW, dg)), 1e-9 * norm(E) / dg.L_c);
    const auto r = dg_output_rhs({0, 0}, {1, 0}, {0, 0}, kW, dg);
    EXPECT_DOUBLE_EQ(r.d, 1.0 / dg.L_c);
    dg.L_c *= 2.0;
    EXPECT_DOUBLE_EQ(dg_output_rhs({0, 0}, {1, 0}, {0, 0}, kW, dg).d, 0.5 * r.d);
}

TEST(MeasuredPower, HandCases) {
    auto pq = measured_power({100, 0}, {2, 0});
    EXPECT_DOUBLE_EQ(pq.p, 300.0);
    EXPECT_DOUBLE_EQ(pq.q, 0.0);
    pq = measured_power({100, 0}, {0, 0});
    EXPECT_EQ(pq.p, 0.0);
    EXPECT_EQ(pq.q, 0.0);
    // inductive current lagging the voltage absorbs positive reactive power at the source
    pq = measured_power({100, 0}, {0, -2});
    EXPECT_DOUBLE_EQ(pq.q, 300.0);
    EXPECT_EQ(filter_rhs(42.0, 42.0, 31.4), 0.0);
    EXPECT_DOUBLE_EQ(filter_rhs(0.0, 10.0, 31.4), 314.0);
}

TEST(Transformer, PerUnitArithmetic) {
    TransformerSpec t;
    const auto lv = transformer_equivalent(t, VoltageLevel::LV);
    EXPECT_NEAR(lv.R, 1.4440e-3, 1e-9);
    EXPECT_NEAR(lv.X, 5.7760e-3, 1e-9);
    const auto mv = transformer_equivalent(t, VoltageLevel::MV);
    const double k = std::pow(10.0 / 0.38, 2);
    EXPECT_NEAR(mv.R / lv.R, k, 1e-9 * k);
    EXPECT_NEAR(mv.X / lv.X, k, 1e-9 * k);
    t.u_k = t.r_k = 0.0;
    const auto ideal = transformer_equivalent(t, VoltageLevel::LV);
    EXPECT_EQ(ideal.R, 0.0);
    EXPECT_EQ(ideal.X, 0.0);
}

namespace {

// Source E behind (R1, L1) feeding node 0, RL load (R2, L2) from node 0 to
// ground, optional shunt G at the node. Integrated to steady state.
struct TwoBranch {
    double R1 = 0.1, L1 = 2e-3, R2 = 5.0, L2 = 8e-3;
    Complex E{330.0, 0.0};

    NodalNetwork network(double G) const {
        NodalNetwork n(1, {{-1, 1.0, 0, 1.0, R1, L1}, {0, 1.0, -1, 1.0, R2, L2}});
        if (G > 0.0) n.set_shunt(0, G);
        return n;
    }

    std::vector<Complex> settle(const NodalNetwork& net, double dt, double t_end) const {
        std::vector<Complex> i(2), v(1), d(2), k1(2), k2(2), k3(2), k4(2), tmp(2);
        const std::vector<Complex> src{E, Complex{}};
        auto f = [&](const std::vector<Complex>& x, std::vector<Complex>& out) { net.evaluate(x, src, kW, v, out); };
        const int steps = static_cast<int>(t_end / dt);
        for (int s = 0; s < steps; ++s) {
            f(i, k1);
            for (int b = 0; b < 2; ++b) tmp[b] = i[b] + 0.5 * dt * k1[b];
            f(tmp, k2);
            for (int b = 0; b < 2; ++b) tmp[b] = i[b] + 0.5 * dt * k2[b];
            f(tmp, k3);
            for (int b = 0; b < 2; ++b) tmp[b] = i[b] + dt * k3[b];
            f(tmp, k4);
            for (int b = 0; b < 2; ++b) i[b] += dt / 6.0 * (k1[b] + 2.0 * k2[b] + 2.0 * k3[b] + k4[b]);
        }
        net.evaluate(i, src, kW, v, d);
        return {i[0], i[1], v[0]};
    }
};

} // namespace

TEST(NodalNetwork, SteadyStateMatchesPhasorSolution) {
    const TwoBranch c;
    const Complex z1 = c.R1 + Complex(0, kW * c.L1), z2 = c.R2 + Complex(0, kW * c.L2);
    const Complex i_ref = c.E / (z1 + z2);
    const Complex v_ref = i_ref * z2;
    const auto r = c.settle(c.network(0.0), 2e-5, 0.2);
    EXPECT_LT(std::abs(r[0] - i_ref), 1e-6 * std::abs(i_ref));
    EXPECT_LT(std::abs(r[1] - i_ref), 1e-6 * std::abs(i_ref));
    EXPECT_LT(std::abs(r[2] - v_ref), 1e-6 * std::abs(v_ref));
}

TEST(NodalNetwork, VirtualResistorResidualScalesWithRn) {
    const TwoBranch c;
    auto residual = [&](double R_N) {
        const auto r = c.settle(c.network(1.0 / R_N), 0.2 * (c.L1 * c.L2 / (c.L1 + c.L2)) / R_N, 0.2);
        return std::abs(r[2]) / R_N; // current lost into the virtual resistor
    };
    const double r1 = residual(1000.0), r10 = residual(10000.0);
    EXPECT_NEAR(r1 / r10, 10.0, 0.1);
}

TEST(NodalNetwork, FloatingSectionIsATopologyError) {
    NodalNetwork n(2, {{0, 1.0, 1, 1.0, 0.1, 1e-3}});
    std::vector<Complex> i(1), E(1), v(2), d(1);
    EXPECT_THROW(n.evaluate(i, E, kW, v, d), TopologyError);
    NodalNetwork grounded(2, {{0, 1.0, 1, 1.0, 0.1, 1e-3}, {1, 1.0, -1, 1.0, 1.0, 1e-3}, {0, 1.0, -1, 1.0, 1.0, 1e-3}});
    std::vector<Complex> i3(3), E3(3), d3(3);
    EXPECT_NO_THROW(grounded.evaluate(i3, E3, kW, v, d3));
}
