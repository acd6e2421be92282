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
#include "nmg/control.hpp"
#include "nmg/numerics.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <random>
#include <vector>

using namespace nmg;

namespace {

CommGraph ring(std::size_t n, double w = 1.0) {
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < n; ++k) ids.push_back("u" + std::to_string(k));
    CommGraph g(ids);
    for (std::size_t k = 0; k < n; ++k) {
        g.set_weight(k, (k + 1) % n, w);
        g.set_weight((k + 1) % n, k, w);
    }
    return g;
}

CommGraph random_graph(std::mt19937& rng, std::size_t n) {
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < n; ++k) ids.push_back("u" + std::to_string(k));
    CommGraph g(ids);
    std::uniform_real_distribution<double> w(0.2, 3.0), coin(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && coin(rng) < 0.5) g.set_weight(i, j, w(rng));
    g.set_pinning(0, w(rng));
    return g;
}

// L + G from the effective weights, built independently of the kernels
Eigen::MatrixXd laplacian_plus_pinning(const CommGraph& g) {
    const auto n = static_cast<Eigen::Index>(g.size());
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            M(i, j) -= g.effective_weight(i, j);
            M(i, i) += g.effective_weight(i, j);
        }
        M(i, i) += g.effective_pinning(i);
    }
    return M;
}

Eigen::VectorXd to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace

TEST(CommGraph, RejectsBadInput) {
    CommGraph g({"a", "b"});
    EXPECT_THROW(g.set_weight(0, 0, 1.0), std::invalid_argument);
    EXPECT_THROW(g.set_weight(0, 1, -1.0), std::invalid_argument);
    EXPECT_THROW(g.set_pinning(1, -0.5), std::invalid_argument);
    EXPECT_THROW(g.weight(0, 2), std::out_of_range);
    EXPECT_THROW(g.index_of("c"), UnknownId);
    EXPECT_EQ(g.index_of("b"), 1u);
}

TEST(CommGraph, PinnedSpanningTree) {
    CommGraph g({"a", "b", "c"});
    g.set_weight(1, 0, 1.0); // a -> b
    g.set_weight(2, 1, 1.0); // b -> c
    EXPECT_FALSE(has_pinned_spanning_tree(g)); // nobody pinned
    g.set_pinning(2, 1.0);
    EXPECT_FALSE(has_pinned_spanning_tree(g)); // the leaf cannot reach the others
    g.set_pinning(0, 1.0);
    EXPECT_TRUE(has_pinned_spanning_tree(g));
    g.set_link(2, 1, false);
    EXPECT_FALSE(has_pinned_spanning_tree(g));
    g.set_attached(2, false); // c leaves, the remaining pair is still spanned
    EXPECT_TRUE(has_pinned_spanning_tree(g));
    EXPECT_EQ(g.effective_weight(2, 1), 0.0);
    EXPECT_EQ(g.effective_pinning(2), 0.0);
}

TEST(Consensus, FixedPointIsTheReference) {
    auto g = ring(4);
    g.set_pinning(0, 2.0);
    const std::vector<double> w(4, 314.0), y(4, 0.37);
    for (double r : consensus_freq_rhs(g, w, y, 314.0, 20.0, 5.0)) EXPECT_EQ(r, 0.0);
    for (double r : consensus_tracking_rhs(g, w, 314.0, 3.0)) EXPECT_EQ(r, 0.0);
    for (double r : consensus_sharing_rhs(g, y, 7.0)) EXPECT_EQ(r, 0.0);
    // off the reference only the pinned agent feels the tracking term
    const auto off = consensus_tracking_rhs(g, w, 300.0, 3.0);
    EXPECT_DOUBLE_EQ(off[0], -3.0 * 2.0 * 14.0);
    EXPECT_EQ(off[1], 0.0);
}

TEST(Consensus, MatchesMatrixFormOnRandomGraphs) {
    std::mt19937 rng(7);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(trial % 6);
        auto g = random_graph(rng, n);
        if (trial % 3 == 0) g.set_link(n - 1, 0, false);
        std::vector<double> x(n), y(n);
        for (std::size_t k = 0; k < n; ++k) {
            x[k] = nd(rng);
            y[k] = nd(rng);
        }
        const double ref = nd(rng), c1 = 2.5, c2 = 0.7;
        const Eigen::MatrixXd M = laplacian_plus_pinning(g);
        Eigen::MatrixXd L = M;
        for (std::size_t i = 0; i < n; ++i) L(i, i) -= g.effective_pinning(i);
        Eigen::VectorXd G(n);
        for (std::size_t i = 0; i < n; ++i) G(i) = g.effective_pinning(i);
        const Eigen::VectorXd expect_f = -c1 * (M * to_eigen(x) - G * ref) - c2 * (L * to_eigen(y));
        const Eigen::VectorXd expect_t = -c1 * (M * to_eigen(x) - G * ref);
        const Eigen::VectorXd expect_s = -c2 * (L * to_eigen(y));
        EXPECT_LT((to_eigen(consensus_freq_rhs(g, x, y, ref, c1, c2)) - expect_f).norm(), 1e-12);
        EXPECT_LT((to_eigen(consensus_tracking_rhs(g, x, ref, c1)) - expect_t).norm(), 1e-12);
        EXPECT_LT((to_eigen(consensus_sharing_rhs(g, y, c2)) - expect_s).norm(), 1e-12);
    }
}

TEST(Consensus, SpanningTreeMeansStableTracking) {
    std::mt19937 rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        auto g = random_graph(rng, 5);
        const Eigen::MatrixXd M = laplacian_plus_pinning(g);
        const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(-M).eigenvalues();
        double max_re = -1e300;
        for (Eigen::Index k = 0; k < ev.size(); ++k) max_re = std::max(max_re, ev(k).real());
        if (has_pinned_spanning_tree(g))
            EXPECT_LT(max_re, -1e-9);
        else
            EXPECT_GT(max_re, -1e-9);
    }
}

TEST(Consensus, TrackingConvergesUnderRk4) {
    auto g = ring(5, 1.5);
    g.set_pinning(2, 1.0);
    std::vector<double> x{1, -2, 0.5, 3, 7};
    const double ref = 4.0;
    const RhsFunction f = [&](double, std::span<const double> s, std::span<double> d) {
        const auto r = consensus_tracking_rhs(g, s, ref, 4.0);
        std::copy(r.begin(), r.end(), d.begin());
    };
    Rk4Workspace ws;
    for (int k = 0; k < 6000; ++k) ws.step(f, x, k * 1e-2, 1e-2);
    for (double v : x) EXPECT_NEAR(v, ref, 1e-6);
}

TEST(Consensus, UndirectedSharingConservesSum) {
    auto g = ring(6, 0.8);
    const std::vector<double> y{0.1, 0.9, 0.3, 0.2, 0.7, 0.5};
    const auto r = consensus_sharing_rhs(g, y, 3.0);
    double s = 0.0;
    for (double v : r) s += v;
    EXPECT_NEAR(s, 0.0, 1e-14);
}

TEST(Consensus, SizeMismatchThrows) {
    auto g = ring(3);
    const std::vector<double> two(2, 0.0), three(3, 0.0);
    EXPECT_THROW(consensus_freq_rhs(g, two, three, 0, 1, 1), std::invalid_argument);
    EXPECT_THROW(consensus_tracking_rhs(g, two, 0, 1), std::invalid_argument);
    EXPECT_THROW(consensus_sharing_rhs(g, two, 1), std::invalid_argument);
}

TEST(Layers, SecondaryAndQuaternaryShareTheLaw) {
    auto g = ring(3);
    g.set_pinning(1, 1.0);
    const std::vector<double> w{313.0, 314.5, 315.0}, y{0.2, 0.4, 0.3}, v{379.0, 381.0, 380.5};
    const ConsensusGains gains{20.0, 9.0, 2.0, 4.0};
    EXPECT_EQ(dsc_freq_rhs(g, w, y, 314.16, gains), dqc_freq_rhs(g, w, y, 314.16, gains));
    EXPECT_EQ(dsc_volt_rhs(g, v, 380.0, 2.0), dqc_volt_rhs(g, v, 380.0, 2.0));
    EXPECT_EQ(dsc_q_rhs(g, y, 4.0), dqc_q_rhs(g, y, 4.0));
    const DroopParams droop{1e-4, 2e-3, 314.16, 380.0, 8e3, 6e3};
    const ConsensusState s{0.5, 3.0, -1.0};
    const auto p = primary_outputs(2e3, 1e3, s, droop);
    const auto t = tc_outputs(2e3, 1e3, s, droop);
    EXPECT_DOUBLE_EQ(p.omega, t.omega_mg);
    EXPECT_DOUBLE_EQ(p.E_d, t.v_pcc_star);
}

TEST(Primary, DroopHandCases) {
    const DroopParams droop{2.0 * kPi * 50.0 * 0.01 / 1e4, 380.0 * 0.05 / 1e4, kTwoPi * 50.0, 380.0, 1e4, 1e4};
    const auto nl = primary_outputs(0.0, 0.0, {}, droop);
    EXPECT_DOUBLE_EQ(nl.omega, kTwoPi * 50.0);
    EXPECT_DOUBLE_EQ(nl.E_d, 380.0);
    EXPECT_EQ(nl.E_q, 0.0);
    const auto fl = primary_outputs(1e4, 1e4, {}, droop);
    EXPECT_NEAR(units::rad_to_hz(fl.omega), 49.5, 1e-12);
    EXPECT_NEAR(fl.E_d, 361.0, 1e-12);
    const auto c = primary_outputs(1e4, 1e4, {0.5 * kPi * 2.0, 19.0, 0.0}, droop);
    EXPECT_NEAR(units::rad_to_hz(c.omega), 50.0, 1e-12);
    EXPECT_NEAR(c.E_d, 380.0, 1e-12);
    EXPECT_NEAR(secondary_voltage_reference(1e4, {0, 19.0, 5.0}, droop), 380.0, 1e-12);
}

TEST(Pi, HandCases) {
    const PiGains gains{0.5, 10.0, 380.0, 380.0};
    auto r = pi_voltage(380.0, 380.0, 0.0, 380.0, gains);
    EXPECT_DOUBLE_EQ(r.reference, 380.0);
    EXPECT_EQ(r.dpsi, 0.0);
    r = pi_voltage(380.0, 361.0, 0.0, 380.0, gains);
    EXPECT_DOUBLE_EQ(r.dpsi, 0.05);
    EXPECT_DOUBLE_EQ(r.reference, 380.0 + 380.0 * 0.5 * 0.05);
    r = pi_voltage(380.0, 380.0, 0.01, 380.0, gains);
    EXPECT_DOUBLE_EQ(r.reference, 380.0 + 380.0 * 0.1);
    const PiGains volt{0.5, 10.0, 380.0, 1.0};
    EXPECT_DOUBLE_EQ(pcc_pi(380.0, 361.0, 0.0, 380.0, volt).reference, 380.025);
    EXPECT_DOUBLE_EQ(critical_pi(380.0, 361.0, 0.0, 380.0, volt).reference, 380.025);
}
