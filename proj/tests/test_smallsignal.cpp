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
#include "nmg/smallsignal.hpp"
#include "test_support.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace nmg;
using nmg::testing::data_path;

namespace {

LinearModel hand_model(const Matrix& A) {
    LinearModel lm;
    lm.A = A;
    for (std::size_t i = 0; i < A.rows(); ++i) {
        lm.labels.push_back("x" + std::to_string(i));
        lm.groups.push_back({"u" + std::to_string(i % 2), "", "x", Layer::Network});
    }
    return lm;
}

SystemConfig small() { return load_system(data_path("small_mg.json")); }

const LinearModel& small_all() {
    static const LinearModel lm = [] {
        const SystemModel m(small());
        return linearize_at_equilibrium(m, ActivationFlags::all());
    }();
    return lm;
}

} // namespace

TEST(Jacobian, LinearRhsIsExact) {
    std::mt19937 rng(5);
    const Matrix M = nmg::testing::random_matrix(rng, 7, 3.0);
    std::vector<double> x0(7);
    for (std::size_t k = 0; k < 7; ++k) x0[k] = 0.3 * static_cast<double>(k) - 1.0;
    auto f = [&](std::span<const double> x, std::span<double> dx) {
        for (std::size_t i = 0; i < 7; ++i) {
            dx[i] = 0.0;
            for (std::size_t j = 0; j < 7; ++j) dx[i] += M(i, j) * x[j];
        }
    };
    const Matrix J = central_difference_jacobian(f, x0, std::vector<double>(7, 1e-3), 1e-6);
    EXPECT_LT(relative_difference(J, M), 1e-8);
}

TEST(Linearize, RejectsNonEquilibrium) {
    const SystemModel m(small());
    EXPECT_THROW(linearize(m, ActivationFlags::primary_only(), m.flat_start()), NotAtEquilibrium);
}

TEST(Linearize, AnchorRowIsZeroAndLabelsMatchLayout) {
    const auto& lm = small_all();
    const SystemModel m(small());
    ASSERT_EQ(lm.A.rows(), m.size());
    ASSERT_EQ(lm.A.cols(), m.size());
    EXPECT_EQ(lm.labels, m.layout().labels);
    const std::size_t d = m.layout().index_of("DG1.delta");
    for (std::size_t j = 0; j < m.size(); ++j) EXPECT_EQ(lm.A(d, j), 0.0);
    EXPECT_EQ(lm.config_hash, config_hash(small()));
    EXPECT_EQ(lm.groups[m.layout().index_of("DG2.lambda")].layer, Layer::Secondary);
    EXPECT_EQ(lm.groups[m.layout().index_of("MG1.h")].layer, Layer::Quaternary);
    EXPECT_EQ(lm.groups[m.layout().index_of("DG2.P")].layer, Layer::Primary);
}

TEST(Linearize, StepHalvingConverges) {
    const SystemModel m(load_system(data_path("nmg_test_system.json")));
    const auto eq = find_equilibrium(m, ActivationFlags::all());
    LinearizeOptions a, b;
    b.rel_step = 0.5 * a.rel_step;
    b.abs_step = 0.5 * a.abs_step;
    const auto la = linearize(m, ActivationFlags::all(), eq.x, a);
    const auto lb = linearize(m, ActivationFlags::all(), eq.x, b);
    EXPECT_LT(relative_difference(la.A, lb.A), 1e-6);
}

TEST(Modes, HandCases) {
    auto lm = hand_model(Matrix::from_rows(2, 2, {-1, 0, 0, -2}));
    auto ms = modes(lm);
    ASSERT_EQ(ms.size(), 2u);
    for (const auto& m : ms) {
        EXPECT_DOUBLE_EQ(m.zeta, 1.0);
        EXPECT_EQ(m.lambda.imag(), 0.0);
    }
    lm = hand_model(Matrix::from_rows(2, 2, {0, 1, -2, -2}));
    ms = modes(lm);
    ASSERT_EQ(ms.size(), 1u); // conjugate pair folded
    EXPECT_NEAR(ms[0].lambda.real(), -1.0, 1e-12);
    EXPECT_NEAR(ms[0].lambda.imag(), 1.0, 1e-12);
    EXPECT_NEAR(ms[0].zeta, 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(ms[0].f_Hz, 1.0 / kTwoPi, 1e-12);

    ModeOptions lowpass;
    lowpass.f_max_Hz = 0.1;
    EXPECT_TRUE(modes(lm, lowpass).empty());
}

TEST(Modes, SortedByDampingWithStructuralZerosMasked) {
    auto lm = hand_model(Matrix::from_rows(4, 4, {0, 0, 0, 0, 0, -0.1, 5, 0, 0, -5, -0.1, 0, 0, 0, 0, -3}));
    lm.structural_zeros = 1;
    const auto ms = modes(lm);
    ASSERT_EQ(ms.size(), 2u);
    EXPECT_LT(ms[0].zeta, ms[1].zeta);
    EXPECT_NEAR(ms[1].lambda.real(), -3.0, 1e-12);
    ModeOptions all;
    all.include_structural = true;
    EXPECT_EQ(modes(lm, all).size(), 3u);
}

TEST(Participation, DiagonalIsIndicator) {
    const auto lm = hand_model(Matrix::from_rows(3, 3, {-1, 0, 0, 0, -4, 0, 0, 0, -9}));
    for (const auto& m : modes(lm)) {
        const std::size_t hot = m.lambda.real() == -1 ? 0 : m.lambda.real() == -4 ? 1 : 2;
        for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(m.participation[i], i == hot ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Participation, TwoByTwoClosedForm) {
    // symmetric A: left = right eigenvectors, p_i = v_i^2 / max
    const auto lm = hand_model(Matrix::from_rows(2, 2, {-1, 0.1, 0.1, -2}));
    const double disc = std::sqrt(0.25 + 0.01);
    const double l1 = -1.5 + disc; // near -1
    // eigenvector (0.1, l1 + 1) up to scale
    const double a = 0.1, b = l1 + 1.0;
    const double small_share = std::min(a * a, b * b) / std::max(a * a, b * b);
    Mode m;
    m.lambda = l1;
    const auto p = participation(lm, m);
    EXPECT_NEAR(p[0], 1.0, 1e-12);
    EXPECT_NEAR(p[1], small_share, 1e-10);
}

TEST(Participation, MovesWithPermutationSimilarity) {
    std::mt19937 rng(21);
    const Matrix A = nmg::testing::random_matrix(rng, 6);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Matrix B(6, 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) B(i, j) = A(perm[i], perm[j]);
    const auto la = hand_model(A), lb = hand_model(B);
    for (const auto& m : modes(la)) {
        const auto pb = participation(lb, m);
        for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(pb[i], m.participation[perm[i]], 1e-8);
    }
}

TEST(Participation, NormalisedOnTheSmallSystem) {
    const auto& lm = small_all();
    ModeOptions opt;
    opt.f_max_Hz = 1e6;
    for (const auto& m : modes(lm, opt)) {
        if (m.degenerate) continue;
        double mx = 0.0;
        for (double p : m.participation) {
            EXPECT_GE(p, 0.0);
            EXPECT_LE(p, 1.0 + 1e-12);
            mx = std::max(mx, p);
        }
        EXPECT_DOUBLE_EQ(mx, 1.0);
        double sum = 0.0;
        for (const auto& [layer, v] : aggregate_by_layer(lm, m.participation)) sum += v;
        EXPECT_NEAR(sum, std::accumulate(m.participation.begin(), m.participation.end(), 0.0), 1e-9);
    }
}

TEST(Spectrum, SmallSystemIsStableAndConjugateClosed) {
    const auto& lm = small_all();
    const auto ev = eigenvalues(lm.A);
    const auto mask = detail::structural_mask(ev, lm.structural_zeros);
    for (std::size_t k = 0; k < ev.size(); ++k) {
        if (!mask[k]) EXPECT_LT(ev[k].real(), 0.0) << ev[k];
        double best = INFINITY;
        for (const auto& o : ev) best = std::min(best, std::abs(o - std::conj(ev[k])));
        EXPECT_LT(best, 1e-8 * std::max(1.0, std::abs(ev[k])));
    }
}

TEST(Spectrum, TimeDomainDecayMatchesDominantMode) {
    const SystemModel m(small());
    const auto& lm = small_all();
    ModeOptions opt;
    opt.f_max_Hz = 100.0;
    const auto ms = modes(lm, opt);
    const Mode* osc = nullptr;
    for (const auto& md : ms)
        if (md.lambda.imag() > 1.0 && !md.degenerate) {
            osc = &md;
            break;
        }
    ASSERT_NE(osc, nullptr);
    // excite along the real part of the right eigenvector
    const auto e = eig_real(lm.A);
    std::size_t k = 0;
    for (std::size_t j = 1; j < e.values.size(); ++j)
        if (std::abs(e.values[j] - osc->lambda) < std::abs(e.values[k] - osc->lambda)) k = j;
    double vmax = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) vmax = std::max(vmax, std::abs(e.right_vectors(i, k)) / m.layout().scale[i]);
    std::vector<double> x = lm.equilibrium;
    for (std::size_t i = 0; i < m.size(); ++i) x[i] += 1e-4 * e.right_vectors(i, k).real() / vmax;
    // projection onto the mode via the left eigenvector isolates its envelope
    LiveSystem live(m);
    live.flags = ActivationFlags::all();
    Rk4Workspace ws(x.size());
    auto f = [&](double, std::span<const double> xs, std::span<double> dx) { evaluate_rhs(live, xs, dx); };
    const double dt = 1e-4, T = std::min(3.0 / -osc->lambda.real(), 2.0);
    auto modal = [&](const std::vector<double>& s) {
        Complex z;
        for (std::size_t i = 0; i < m.size(); ++i) z += std::conj(e.left_vectors(i, k)) * (s[i] - lm.equilibrium[i]);
        return std::abs(z);
    };
    const double z0 = modal(x);
    const long n = std::lround(T / dt);
    for (long s = 0; s < n; ++s) ws.step(f, std::span<double>(x), s * dt, dt);
    const double decay = -std::log(modal(x) / z0) / (n * dt);
    const double zeta_td = decay / std::abs(osc->lambda);
    EXPECT_NEAR(zeta_td, osc->zeta, 0.1 * osc->zeta);
}

TEST(Compare, IdenticalAndDisjointSpectra) {
    auto mk = [](Complex l) {
        Mode m;
        m.lambda = l;
        m.zeta = damping_ratio(l);
        m.f_Hz = l.imag() / kTwoPi;
        return m;
    };
    const std::vector<Mode> a{mk({-1, 20}), mk({-3, 50}), mk({-0.5, 5})};
    auto same = compare_spectra({a}, a);
    EXPECT_TRUE(same.new_modes.empty());
    for (const auto& mm : same.single_modes) {
        EXPECT_TRUE(mm.matched);
        EXPECT_EQ(mm.distance, 0.0);
    }
    const std::vector<Mode> b{mk({-2, 200}), mk({-10, 300})};
    auto disjoint = compare_spectra({a}, b);
    EXPECT_EQ(disjoint.new_modes.size(), 2u);
    for (const auto& mm : disjoint.single_modes) EXPECT_FALSE(mm.matched);
    // two single-MG copies of one mode claim only one NMG counterpart
    auto twice = compare_spectra({a, a}, a);
    EXPECT_TRUE(twice.new_modes.empty());
    EXPECT_EQ(std::count_if(twice.single_modes.begin(), twice.single_modes.end(),
                            [](const ModeMatch& m) { return m.matched; }),
              3);
}

TEST(SingleMg, ConfigKeepsOnlyTheMicrogrid) {
    const auto cfg = load_system(data_path("nmg_test_system.json"));
    const auto one = single_mg_config(cfg, "MG2");
    EXPECT_TRUE(validate(one).ok());
    EXPECT_EQ(one.mgs.size(), 1u);
    EXPECT_EQ(one.dgs.size(), 3u);
    for (const auto& d : one.dgs) EXPECT_EQ(d.mg, "MG2");
    EXPECT_THROW(single_mg_config(cfg, "MG9"), UnknownId);
}

TEST(Parameters, DottedPaths) {
    const auto cfg = small();
    EXPECT_DOUBLE_EQ(get_parameter(cfg, "dsc.c_v_per_s"), 20.0);
    const auto c2 = set_parameter(cfg, "dsc.c_v_per_s", 30.0);
    EXPECT_DOUBLE_EQ(c2.dsc.c_v_per_s, 30.0);
    EXPECT_DOUBLE_EQ(get_parameter(cfg, "dgs.DG2.P_max_kW"), 60.0);
    EXPECT_DOUBLE_EQ(set_parameter(cfg, "mgs.MG1.D_Q_V_per_kvar", 0.6).mgs[0].D_Q_V_per_kvar, 0.6);
    EXPECT_THROW(get_parameter(cfg, "dsc.c_nope"), ConfigError);
    EXPECT_THROW(set_parameter(cfg, "dgs.DG7.P_max_kW", 1.0), ConfigError);
}

TEST(Sweep, SingleSampleEqualsModes) {
    const auto cfg = small();
    SweepOptions opt;
    const auto tr = sweep(cfg, "dsc.c_q_per_s", {100.0}, opt);
    ASSERT_EQ(tr.samples.size(), 1u);
    ASSERT_TRUE(tr.samples[0].ok) << tr.samples[0].error;
    ModeOptions mo;
    mo.participation = false;
    const auto direct = dominant_modes(modes(small_all(), mo), opt.dominant);
    ASSERT_EQ(tr.samples[0].modes.size(), direct.size());
    for (std::size_t k = 0; k < direct.size(); ++k)
        EXPECT_LT(std::abs(tr.samples[0].modes[k].lambda - direct[k].lambda), 1e-9 * std::abs(direct[k].lambda));
}

TEST(Sweep, ConstantParameterGivesFlatTracksAndReordering) {
    const auto cfg = small();
    const auto flat = sweep(cfg, "dsc.c_q_per_s", {100.0, 100.0, 100.0});
    for (const auto& track : flat.tracks)
        for (const auto& l : track) {
            ASSERT_TRUE(l.has_value());
            EXPECT_LT(std::abs(*l - *track.front()), 1e-9 * std::abs(*track.front()));
        }
    const auto rev = sweep(cfg, "dsc.c_q_per_s", {120.0, 80.0});
    EXPECT_TRUE(rev.reordered);
    EXPECT_EQ(rev.values, (std::vector<double>{80.0, 120.0}));
}

TEST(Sweep, TrackContinuationPrefersNearestThenDamping) {
    std::vector<std::optional<Complex>> last{Complex(-1, 10), Complex(-2, 20)};
    auto mk = [](Complex l) {
        Mode m;
        m.lambda = l;
        m.zeta = damping_ratio(l);
        return m;
    };
    const auto next = detail::continue_tracks(last, {mk({-2.1, 20.5}), mk({-1.1, 10.2}), mk({-7, 60})});
    EXPECT_EQ(*next[0], Complex(-1.1, 10.2));
    EXPECT_EQ(*next[1], Complex(-2.1, 20.5));
}

TEST(Oracle, DroopConsensusBlockMatchesAnalyticJacobian) {
    DroopConsensusBlock blk;
    blk.graph = CommGraph({"a", "b", "c"});
    blk.graph.set_weight(0, 1, 1.0);
    blk.graph.set_weight(1, 0, 1.0);
    blk.graph.set_weight(1, 2, 2.0);
    blk.graph.set_weight(2, 1, 0.5);
    blk.graph.set_pinning(0, 1.0);
    blk.D_P = {units::droop_p_to_si(0.01667), units::droop_p_to_si(0.025), units::droop_p_to_si(0.01667)};
    blk.K = Matrix::from_rows(3, 3, {9e4, -5e4, -4e4, -5e4, 8e4, -3e4, -4e4, -3e4, 7e4});
    blk.p0 = {2e4, 1.5e4, 2e4};
    blk.gains = {560.0, 50.0, 20.0, 100.0};
    std::vector<double> x(9, 0.0);
    for (std::size_t i = 0; i < 3; ++i) x[3 + i] = blk.p0[i];
    std::vector<double> steps(9);
    for (std::size_t i = 0; i < 9; ++i) steps[i] = i < 3 ? 1e-6 : i < 6 ? 1.0 : 1e-3;
    auto f = [&](std::span<const double> s, std::span<double> d) { blk.rhs(s, d); };
    const Matrix A = blk.analytic_jacobian();
    const Matrix J = central_difference_jacobian(f, x, steps, 1e-6);
    EXPECT_LT(relative_difference(J, A), 1e-8);
    // eigenvalues agree with an independent solver on the analytic matrix
    Eigen::MatrixXd Ae(9, 9);
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j) Ae(i, j) = A(i, j);
    const Eigen::VectorXcd ev = Eigen::EigenSolver<Eigen::MatrixXd>(Ae).eigenvalues();
    std::vector<Complex> ref(ev.data(), ev.data() + ev.size());
    EXPECT_LT(nmg::testing::multiset_distance(eigenvalues(J), ref), 1e-6 * norm_inf(A));
}
