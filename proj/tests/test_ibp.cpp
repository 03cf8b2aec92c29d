#include <cmath>
#include <random>

#include "doctest.h"
#include "mvlab/ibp.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"
#include "support.hpp"

using namespace mvlab;

namespace {

InitialLaw point_law(std::vector<double> mean, double spread) {
    InitialLaw law;
    law.mean = std::move(mean);
    law.spread = spread;
    return law;
}

IbpConfig ibp_config(const PathGrid& g, double T, std::size_t n_samples, std::uint64_t seed) {
    IbpConfig c;
    c.grid = g;
    c.T = T;
    c.n_flow = 500;
    c.n_samples = n_samples;
    c.batch = 4096;
    c.seed = seed;
    return c;
}

MeasureFlow record_flow(const CoefficientModel& model, const EmpiricalPathMeasure& init, double T, std::uint64_t seed) {
    SimConfig sc;
    sc.grid = init.grid();
    sc.n_particles = init.size();
    sc.T = T;
    sc.seed = seed;
    SimOptions opt;
    opt.record = true;
    return std::move(*simulate_mckean(model, init, sc, opt).flow);
}

CameronMartinVector random_eta(std::mt19937_64& gen, const PathGrid& g, int dim) {
    std::normal_distribution<double> nd;
    std::vector<double> v(g.points() * static_cast<std::size_t>(dim));
    for (double& x : v) x = nd(gen);
    return CameronMartinVector::from_values(g, dim, v);
}

Matrix random_matrix(std::mt19937_64& gen, int d, double scale) {
    std::normal_distribution<double> nd(0.0, scale);
    Matrix m(d, d);
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) m(i, j) = nd(gen);
    }
    return m;
}

}  // namespace

TEST_CASE("zero shift gives a zero plan") {
    const PathGrid g(0.5, 4);
    const auto plan = build_shift_plan(eta_zero(g, 2), 1.5, g);
    CHECK(plan.steps == 12);
    for (double v : plan.phi) CHECK(v == 0.0);
    for (double v : plan.theta) CHECK(v == 0.0);
    CHECK(plan.energy() == 0.0);
}

TEST_CASE("the plan transports zero to eta") {
    std::mt19937_64 gen(1);
    for (int trial = 0; trial < 20; ++trial) {
        const PathGrid g(0.25 + 0.25 * (trial % 3), 4 + trial);
        const double T = g.r0() + g.dt() * (1 + trial % 7);
        const auto eta = random_eta(gen, g, 2);
        const auto plan = build_shift_plan(eta, T, g);
        const auto seg = plan.theta_segment(plan.steps);
        // Oracle: left-endpoint quadrature of eta' from eta(-r0).
        std::vector<double> quad(eta.value(0).begin(), eta.value(0).end());
        for (std::size_t k = 0; k < g.points(); ++k) {
            if (k > 0) {
                for (std::size_t c = 0; c < 2; ++c) quad[c] += eta.slope(k - 1)[c] * g.dt();
            }
            for (std::size_t c = 0; c < 2; ++c) {
                CHECK(std::abs(seg.point(k)[c] - eta.value(k)[c]) <= 1e-10 * g.m());
                CHECK(std::abs(seg.point(k)[c] - quad[c]) <= 1e-10 * g.m());
            }
        }
        double energy = 0.0;
        for (double v : plan.phi) energy += v * v * g.dt();
        CHECK(plan.energy() == doctest::Approx(energy).epsilon(1e-10));
        const auto start = plan.theta_segment(0);
        for (double v : start.data) CHECK(v == 0.0);
    }
}

TEST_CASE("plan preconditions") {
    const PathGrid g(0.5, 4);
    const auto eta = eta_linear_ramp(g, {1.0});
    CHECK_THROWS_AS(build_shift_plan(eta, 0.5, g), std::invalid_argument);
    CHECK_THROWS_AS(build_shift_plan(eta, 1.3, g), std::out_of_range);
    CHECK_THROWS_AS(build_shift_plan(eta, 1.5, PathGrid(0.5, 8)), std::invalid_argument);
}

TEST_CASE("shift constant formula") {
    const PathGrid g(0.5, 10);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.2, 2.0, 0.5);
    const auto plan = build_shift_plan(eta_linear_ramp(g, {1.0}), 2.0, g);
    const auto& c = model.constants();
    // Ramp from 0 to 1 over r0: |eta(-r0)| = 0, ||eta||_H1^2 = 1/r0.
    CHECK(plan.energy() == doctest::Approx(2.0).epsilon(1e-12));
    const double expected = 0.25 * (1.0 + 4.0 * 1.5 * 1.5) * 2.0;
    CHECK(c.lambda == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(c.kappa2 == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(shift_constant(c, plan) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero shift gives zero weights") {
    const double r0 = 0.5;
    const PathGrid g(r0, 5);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto init = point_law({1.0}, 0.5).sample(g, 200, rng::derive_key(2, "init"));
    const auto flow = record_flow(model, init, 1.5, 2);
    const auto plan = build_shift_plan(eta_zero(g, 1), 1.5, g);
    const auto ws = simulate_weighted(model, flow, plan, init, rng::derive_key(2, "w"), 0, true);
    for (double w : ws.weight) CHECK(w == 0.0);
}

TEST_CASE("driftless weights satisfy the Ito isometry") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    std::mt19937_64 gen(3);
    const Matrix Z = Matrix::Zero(2, 2);
    const Matrix S = random_matrix(gen, 2, 0.3) + Matrix::Identity(2, 2);
    const auto model = make_linear_meanfield_delay(2, Z, Z, Z, S, r0);
    const auto init = point_law({0.0, 0.0}, 1.0).sample(g, 50000, rng::derive_key(3, "init"));
    const auto flow = record_flow(model, point_law({0.0, 0.0}, 1.0).sample(g, 100, rng::derive_key(3, "f")), 1.5, 3);
    const auto eta = eta_sine(g, {1.0, -0.5}, 3.0);
    const auto plan = build_shift_plan(eta, 1.5, g);
    const auto ws = simulate_weighted(model, flow, plan, init, rng::derive_key(3, "w"), 0, true);
    std::vector<double> sq(ws.weight.size());
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = ws.weight[i] * ws.weight[i];
    // Oracle: sum_k |sigma^{-1} Phi_k|^2 h by direct quadrature.
    const Matrix inv = S.inverse();
    double expected = 0.0;
    for (std::size_t k = 0; k < plan.steps; ++k) {
        Vector phi(2);
        phi << plan.phi_at(k)[0], plan.phi_at(k)[1];
        expected += (inv * phi).squaredNorm() * g.dt();
    }
    const Estimate m2 = mean_estimate(sq), m1 = mean_estimate(ws.weight);
    CHECK(std::abs(m2.mean - expected) <= 3.0 * m2.std_error);
    CHECK(std::abs(m1.mean) <= 3.0 * m1.std_error);
}

TEST_CASE("weight matches a hand-assembled integrand on stored paths") {
    const double r0 = 0.5;
    const PathGrid g(r0, 6);
    std::mt19937_64 gen(4);
    const Matrix A0 = random_matrix(gen, 2, 0.5) - Matrix::Identity(2, 2), A1 = random_matrix(gen, 2, 0.3),
                 B = random_matrix(gen, 2, 0.3), S = random_matrix(gen, 2, 0.3) + Matrix::Identity(2, 2);
    const auto model = make_linear_meanfield_delay(2, A0, A1, B, S, r0);
    auto law = point_law({0.5, -0.5}, 0.5);
    law.kind = InitialLaw::Kind::bridge;
    law.bridge_scale = 0.4;
    const auto flow = record_flow(model, law.sample(g, 300, rng::derive_key(4, "flow_init")), 1.5, 4);
    const auto eta = eta_affine(g, {0.3, 0.1}, {1.0, -2.0});
    const auto plan = build_shift_plan(eta, 1.5, g);
    const auto init = law.sample(g, 8, rng::derive_key(4, "init"));
    const auto key = rng::derive_key(4, "w");
    const auto ws = simulate_weighted(model, flow, plan, init, key, 100, false, true);
    const std::size_t m = 6, total = m + 1 + plan.steps;
    REQUIRE(ws.paths.size() == 8 * total * 2);
    const Matrix inv = S.inverse();
    const double h = g.dt();
    for (std::size_t i = 0; i < 8; ++i) {
        const double* p = ws.paths.data() + i * total * 2;
        auto at = [&](std::size_t j) {
            Vector v(2);
            v << p[2 * j], p[2 * j + 1];
            return v;
        };
        auto theta = [&](std::size_t j) {
            Vector v(2);
            v << plan.theta[2 * j], plan.theta[2 * j + 1];
            return v;
        };
        double expected = 0.0;
        for (std::size_t k = 0; k < plan.steps; ++k) {
            const std::size_t j = m + k;
            Vector mean(2);
            mean << flow.features_at(k)[0], flow.features_at(k)[1];
            const Vector drift = A0 * at(j) + A1 * at(j - m) + B * mean;
            // Increment recovered from the path itself.
            const Vector dw = inv * (at(j + 1) - at(j) - drift * h);
            const Vector grad = A0 * theta(j) + A1 * theta(j - m);
            Vector phi(2);
            phi << plan.phi_at(k)[0], plan.phi_at(k)[1];
            expected += (inv * (phi - grad)).dot(dw);
        }
        CHECK(ws.weight[i] == doctest::Approx(expected).epsilon(1e-9));

        const Trajectory traj(g, 2, 0.0, std::vector<double>(p, p + total * 2));
        CHECK(malliavin_weight(model, flow, plan, traj, key, 100 + i) == ws.weight[i]);
    }
}

TEST_CASE("weighted simulation is independent of batching and threads") {
    const double r0 = 0.5;
    const PathGrid g(r0, 4);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto law = point_law({1.0}, 0.5);
    const auto flow = record_flow(model, law.sample(g, 200, rng::derive_key(5, "f")), 1.0, 5);
    const auto plan = build_shift_plan(eta_linear_ramp(g, {1.0}), 1.0, g);
    const auto key = rng::derive_key(5, "w"), ikey = rng::derive_key(5, "i");
    const auto all = simulate_weighted(model, flow, plan, law.sample(g, 300, ikey), key, 0, true);
    const auto serial = simulate_weighted(model, flow, plan, law.sample(g, 300, ikey), key, 0, false);
    CHECK(all.weight == serial.weight);
    const auto tail = simulate_weighted(model, flow, plan, law.sample(g, 100, ikey, 200), key, 200, true);
    for (std::size_t i = 0; i < 100; ++i) CHECK(tail.weight[i] == all.weight[200 + i]);
}

TEST_CASE("IBP examples") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto law = point_law({0.5}, 0.5);
    const auto eta = eta_linear_ramp(g, {1.0});
    const auto cfg = ibp_config(g, 1.5, 40000, 6);

    const auto c = ibp_check(model, law, eta, functional_linear({0.0}), cfg);
    CHECK(c.lhs == 0.0);
    CHECK(c.rhs == 0.0);
    CHECK(std::abs(c.weight_mean) <= 3.0 * c.weight_se);

    const auto lin = ibp_check(model, law, eta, functional_linear({2.0}), cfg);
    CHECK(lin.lhs == 2.0);
    CHECK(std::abs(lin.lhs - lin.rhs) <= 3.0 * lin.diff_se);

    const auto three = ibp_check(model, law, eta, functional_constant(3.0), cfg);
    CHECK(three.lhs == 0.0);
    CHECK(std::abs(three.rhs) <= 3.0 * three.rhs_se);

    PathFunctional no_derivative = functional_constant(1.0);
    no_derivative.derivative = nullptr;
    CHECK_THROWS_AS(ibp_check(model, law, eta, no_derivative, cfg), std::invalid_argument);
    const double c0[] = {1.0};
    CHECK_THROWS_AS(ibp_check(make_constant_drift(c0, 0.0, r0), law, eta, functional_linear({1.0}), cfg),
                    std::invalid_argument);
}

TEST_CASE("refinement check") {
    const auto a = refinement_check(0.2, 0.01, 0.1, 0.01, 0.1);
    CHECK(a.C == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(a.passed);
    const auto b = refinement_check(0.2, 0.01, 0.2, 0.01, 0.1);
    CHECK(b.C == 0.0);
    CHECK_FALSE(b.passed);
    CHECK(refinement_check(0.02, 0.01, -0.01, 0.01, 0.1).passed);
    CHECK_THROWS_AS(refinement_check(0.0, 0.0, 0.0, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("shift-Harnack examples") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto ou = make_ou(1, 1.0, 1.0, r0);
    const auto law = point_law({0.0}, 0.5);
    const auto cfg = ibp_config(g, 1.5, 20000, 7);

    const auto zero = shift_harnack_check(ou, law, eta_zero(g, 1), functional_sin_point({1.0}), 2.0, cfg);
    CHECK(zero.factor == 1.0);
    CHECK(zero.margin >= -3.0 * zero.std_error);
    const auto zero_log = shift_harnack_check(ou, law, eta_zero(g, 1), functional_sin_point({1.0}), 0.0, cfg);
    CHECK(zero_log.factor == 0.0);
    CHECK(zero_log.margin >= -3.0 * zero_log.std_error);

    const auto ramp = eta_linear_ramp(g, {1.0});
    const auto one = shift_harnack_check(ou, law, ramp, functional_constant(1.0), 2.0, cfg);
    CHECK(one.lhs == 1.0);
    CHECK(one.rhs == one.factor);
    CHECK(one.factor >= 1.0);

    const auto r = shift_harnack_check(ou, law, ramp, functional_gaussian_average(1.0), 2.0, cfg);
    CHECK(r.margin >= -3.0 * r.std_error);
    CHECK_THROWS_AS(shift_harnack_check(ou, law, ramp, functional_constant(1.0), 0.5, cfg), std::invalid_argument);
    CHECK_THROWS_AS(shift_harnack_check(ou, law, ramp, functional_linear({1.0}), 0.0, cfg), std::invalid_argument);
}

TEST_CASE("binned density estimate is dominated by the weight second moment") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto rep = density_bound_check(model, point_law({0.5}, 0.5), eta_linear_ramp(g, {1.0}),
                                         ibp_config(g, 1.5, 20000, 8), {1, 4, 16, 64});
    REQUIRE(rep.g_sq.size() == 4);
    for (double v : rep.g_sq) CHECK(v <= rep.weight_sq_mean * (1.0 + 1e-12));
    CHECK(std::abs(rep.g_sq[0]) <= 1e-2 * rep.weight_sq_mean);
    CHECK(rep.weight_sq_mean <= rep.bound + 3.0 * rep.weight_sq_se);
}
