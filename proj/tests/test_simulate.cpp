#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mvlab/rng.hpp"
#include "mvlab/simulate.hpp"
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

SimConfig config_for(const PathGrid& g, std::size_t n, double T, std::uint64_t seed) {
    SimConfig c;
    c.grid = g;
    c.n_particles = n;
    c.T = T;
    c.seed = seed;
    return c;
}

/// Linear mean-field delay drift with no noise.
CoefficientModel noiseless_linear(double a0, double a1, double b, double r0) {
    const auto base = std::make_shared<CoefficientModel>(testing::scalar_linear(a0, a1, b, 1.0, r0));
    ModelDefinition def;
    def.name = "noiseless";
    def.dim = 1;
    def.kind = DiffusionKind::none;
    def.constants = base->constants();
    def.feature_count = base->feature_count();
    def.features = [base](const SegmentBatch& mu, std::span<double> out) { base->features(mu, out); };
    def.drift = [base](double t, SegmentView xi, std::span<const double> f, std::span<double> out) {
        base->drift(t, xi, f, out);
    };
    def.diffusion = [](double, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    def.delay = r0;
    return CoefficientModel(def);
}

}  // namespace

TEST_CASE("zero coefficients keep trajectories constant") {
    const PathGrid g(0.5, 4);
    const double zero[] = {0.0, 0.0};
    const auto model = make_constant_drift(zero, 0.0, 0.5);
    const auto init = point_law({1.0, -2.0}, 1.0).sample(g, 50, rng::derive_key(1, "init"));
    const auto out = simulate_mckean(model, init, config_for(g, 50, 2.0, 1));
    for (std::size_t i = 0; i < 50; ++i) {
        for (std::size_t k = 0; k < g.points(); ++k) {
            CHECK(out.final_measure.particle(i).point(k)[0] == init.particle(i).endpoint()[0]);
            CHECK(out.final_measure.particle(i).point(k)[1] == init.particle(i).endpoint()[1]);
        }
    }
}

TEST_CASE("constant drift without noise is integrated exactly") {
    // Dyadic drift, step and start values keep every partial sum exact.
    const PathGrid g(0.25, 2);
    const double c[] = {0.5, -1.5};
    const auto model = make_constant_drift(c, 0.0, 0.25);
    const auto init = point_law({0.75, 2.0}, 0.0).sample(g, 8, rng::derive_key(2, "init"));
    const auto out = simulate_mckean(model, init, config_for(g, 8, 3.0, 2));
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(out.final_measure.particle(i).endpoint()[0] == 0.75 + 0.5 * 3.0);
        CHECK(out.final_measure.particle(i).endpoint()[1] == 2.0 - 1.5 * 3.0);
        CHECK(out.final_measure.particle(i).start()[0] == 0.75 + 0.5 * 2.75);
    }
}

TEST_CASE("OU variance at t = 5 matches the closed form") {
    const double r0 = 1.0 / 16.0;
    const PathGrid g(r0, 16);
    const auto model = make_ou(1, 1.0, 1.0, r0);
    const std::size_t n = 100000;
    const auto init = point_law({0.0}, 0.0).sample(g, n, rng::derive_key(3, "init"));
    const auto out = simulate_mckean(model, init, config_for(g, n, 5.0, 3));
    std::vector<double> sq(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out.final_measure.particle(i).endpoint()[0];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = out.final_measure.particle(i).endpoint()[0] - mean;
        sq[i] = x * x;
    }
    const Estimate var = mean_estimate(sq);
    const double exact = 0.5 * (1.0 - std::exp(-10.0));
    CHECK(std::abs(var.mean - exact) <= 3.0 * var.std_error);
}

TEST_CASE("serial and parallel kernels agree bitwise") {
    const double r0 = 0.5;
    const PathGrid g(r0, 10);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.4, 0.8, r0);
    const auto init = point_law({1.0}, 0.5).sample(g, 3000, rng::derive_key(4, "init"));
    SimOptions serial, parallel;
    serial.parallel = false;
    serial.record = parallel.record = true;
    const auto a = simulate_mckean(model, init, config_for(g, 3000, 2.0, 4), serial);
    const auto b = simulate_mckean(model, init, config_for(g, 3000, 2.0, 4), parallel);
    CHECK(a.flow->paths == b.flow->paths);
    CHECK(a.flow->features == b.flow->features);
    const auto c = simulate_mckean(model, init, config_for(g, 3000, 2.0, 5), parallel);
    CHECK(c.flow->paths != b.flow->paths);
}

TEST_CASE("snapshots are taken at the requested times") {
    const PathGrid g(0.5, 4);
    const auto model = make_ou(1, 1.0, 1.0, 0.5);
    const auto init = point_law({0.0}, 1.0).sample(g, 100, rng::derive_key(5, "init"));
    SimOptions opt;
    opt.record = true;
    opt.snapshot_times = {0.0, 0.5, 1.25};
    const auto out = simulate_mckean(model, init, config_for(g, 100, 1.5, 5), opt);
    REQUIRE(out.snapshots.size() == 3);
    for (const auto& s : out.snapshots) {
        const auto k = out.flow->step_of(s.t);
        const auto ref = out.flow->measure(k);
        CHECK(std::ranges::equal(s.measure.flat(), ref.flat()));
    }
    opt.snapshot_times = {0.3};
    CHECK_THROWS_AS(simulate_mckean(model, init, config_for(g, 100, 1.5, 5), opt), std::out_of_range);
}

TEST_CASE("off-grid horizons and blow-ups are reported") {
    const PathGrid g(0.5, 4);
    CHECK_THROWS_AS(config_for(g, 10, 0.3, 0).steps(), std::out_of_range);
    // dx = x^2 dt explodes before t = 1 from x = 1.
    ModelDefinition def;
    def.name = "explosive";
    def.kind = DiffusionKind::none;
    def.drift = [](double, SegmentView xi, std::span<const double>, std::span<double> out) {
        out[0] = xi.endpoint()[0] * xi.endpoint()[0];
    };
    def.diffusion = [](double, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    const CoefficientModel model(def);
    const auto init = point_law({1.0}, 0.0).sample(g, 4, rng::derive_key(6, "init"));
    CHECK_THROWS_AS(simulate_mckean(model, init, config_for(g, 4, 10.0, 6)), SimulationAbort);
}

TEST_CASE("permuting the initial particles permutes the outputs") {
    const double r0 = 0.5;
    const PathGrid g(r0, 5);
    const auto model = noiseless_linear(-1.0, 0.3, 0.5, r0);
    auto init = point_law({0.0}, 2.0).sample(g, 257, rng::derive_key(7, "init"));
    std::vector<Segment> segs;
    for (std::size_t i = 0; i < init.size(); ++i) segs.push_back(init.segment(i));
    std::mt19937_64 gen(7);
    std::shuffle(segs.begin(), segs.end(), gen);
    const EmpiricalPathMeasure shuffled(segs);

    const auto a = simulate_mckean(model, init, config_for(g, 257, 3.0, 7)).final_measure;
    const auto b = simulate_mckean(model, shuffled, config_for(g, 257, 3.0, 7)).final_measure;
    std::vector<double> ea, eb;
    for (std::size_t i = 0; i < 257; ++i) {
        ea.push_back(a.particle(i).endpoint()[0]);
        eb.push_back(b.particle(i).endpoint()[0]);
    }
    std::sort(ea.begin(), ea.end());
    std::sort(eb.begin(), eb.end());
    for (std::size_t i = 0; i < 257; ++i) CHECK(std::abs(ea[i] - eb[i]) <= 1e-12 * (1.0 + std::abs(ea[i])));
}

TEST_CASE("second moments stay bounded for the dissipative linear model") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-2.0, 0.3, 0.4, 1.0, r0);
    const auto init = point_law({3.0}, 1.0).sample(g, 2000, rng::derive_key(8, "init"));
    SimOptions opt;
    for (int k = 0; k <= 20; ++k) opt.snapshot_times.push_back(static_cast<double>(k));
    const auto out = simulate_mckean(model, init, config_for(g, 2000, 20.0, 8), opt);
    const double m0 = init.second_moment();
    double late_max = 0.0;
    for (const auto& s : out.snapshots) {
        const double m = s.measure.second_moment();
        CHECK(std::isfinite(m));
        CHECK(m <= 2.0 * (1.0 + m0));
        if (s.t >= 10.0) late_max = std::max(late_max, m);
    }
    CHECK(late_max <= 3.0);
}

TEST_CASE("Picard iterates coincide for measure-independent coefficients") {
    const PathGrid g(0.25, 8);
    const auto model = make_ou(2, 1.0, 0.7, 0.25);
    const auto init = point_law({1.0, 0.0}, 0.5).sample(g, 500, rng::derive_key(9, "init"));
    auto cfg = config_for(g, 500, 1.0, 9);
    cfg.picard_iters = 4;
    cfg.picard_window = 0.5;
    const auto r = picard_solve(model, init, cfg);
    REQUIRE(r.report.windows.size() == 2);
    for (const auto& w : r.report.windows) {
        REQUIRE(w.gaps.size() == 4);
        CHECK(w.gaps[0] > 0.0);
        for (std::size_t n = 1; n < w.gaps.size(); ++n) CHECK(w.gaps[n] == 0.0);
    }
}

TEST_CASE("Picard reports are deterministic and thread independent") {
    const double r0 = 0.5;
    const PathGrid g(r0, 100);
    const auto model = testing::scalar_linear(-1.0, 0.2, 0.5, 1.0, r0);
    const auto init = point_law({1.0}, 0.5).sample(g, 1500, rng::derive_key(10, "init"));
    auto cfg = config_for(g, 1500, 0.3, 10);
    cfg.picard_window = 0.15;
    cfg.picard_iters = 5;
    const auto a = picard_solve(model, init, cfg, true);
    const auto b = picard_solve(model, init, cfg, false);
    CHECK(a.report.t0 == b.report.t0);
    REQUIRE(a.report.windows.size() == b.report.windows.size());
    for (std::size_t w = 0; w < a.report.windows.size(); ++w) CHECK(a.report.windows[w].gaps == b.report.windows[w].gaps);
    CHECK(std::ranges::equal(a.final_measure.flat(), b.final_measure.flat()));
    const auto c = picard_solve(model, init, cfg, true);
    CHECK(std::ranges::equal(a.final_measure.flat(), c.final_measure.flat()));
    // Iterate n at step j only sees the frozen flow before j, so the
    // discrete recursion is exact after as many iterations as steps.
    for (const auto& w : a.report.windows) {
        const auto steps = static_cast<std::size_t>(std::lround((w.t_end - w.t_start) / g.dt()));
        for (std::size_t n = 1; n < w.gaps.size(); ++n) {
            CHECK(w.gaps[n] <= w.gaps[n - 1]);
            if (n >= steps) CHECK(w.gaps[n] == 0.0);
            else CHECK(w.gaps[n] > 0.0);
        }
    }
}

TEST_CASE("Picard window helper") {
    CHECK(suggest_picard_window(0.0, 0.01, 3.0) == 3.0);
    // Oracle: bisection for t e^t = e^{-1}.
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (mid * std::exp(mid) <= std::exp(-1.0) ? lo : hi) = mid;
    }
    const double h = 1.0 / 1024.0;
    CHECK(lo == doctest::Approx(0.2785).epsilon(1e-3));
    CHECK(suggest_picard_window(1.0, h, 10.0) == std::floor(lo / h) * h);
    double prev = suggest_picard_window(0.5, h, 10.0);
    for (double k2 = 1.0; k2 <= 64.0; k2 *= 2.0) {
        const double t0 = suggest_picard_window(k2, h, 10.0);
        CHECK(t0 <= prev / 2.0 + h);
        CHECK(t0 * k2 * std::exp(t0 * k2) <= std::exp(-1.0));
        prev = t0;
    }
    CHECK_THROWS_AS(suggest_picard_window(1e6, 0.5, 10.0), std::domain_error);
    RegularityConstants c;
    c.beta1 = 0.25;
    c.beta2 = 0.5;
    CHECK(picard_constant(c) == 1.0);
}

TEST_CASE("FPKE weak form: exact cases") {
    const PathGrid g(0.25, 2);
    const double c[] = {0.5};
    const auto model = make_constant_drift(c, 0.0, 0.25);
    const auto init = point_law({1.0}, 1.0).sample(g, 100, rng::derive_key(11, "init"));
    SimOptions opt;
    opt.record = true;
    const auto out = simulate_mckean(model, init, config_for(g, 100, 2.0, 11), opt);
    const auto constant = verify_fpke_weak_form(*out.flow, model, TestFunction::constant(4.0), 2.0);
    CHECK(constant.residual == 0.0);
    const auto linear = verify_fpke_weak_form(*out.flow, model, TestFunction::coordinate(0), 2.0);
    CHECK(linear.residual <= 1e-13);

    const auto ou = make_ou(1, 1.0, 1.0, 0.25);
    const auto ou_out = simulate_mckean(ou, init, config_for(g, 100, 1.0, 11), opt);
    CHECK(verify_fpke_weak_form(*ou_out.flow, ou, TestFunction::constant(-1.0), 1.0).residual == 0.0);
    CHECK_THROWS_AS(verify_fpke_weak_form(*ou_out.flow, ou, TestFunction::constant(1.0), 1.1), std::out_of_range);
}

TEST_CASE("martingale increments have mean zero given the past") {
    const double r0 = 0.5;
    const PathGrid g(r0, 16);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto init = point_law({1.0}, 1.0).sample(g, 20000, rng::derive_key(12, "init"));
    SimOptions opt;
    opt.record = true;
    const auto out = simulate_mckean(model, init, config_for(g, 20000, 2.0, 12), opt);
    const auto event = [](SegmentView xi) { return xi.endpoint()[0] > 0.5; };
    for (const auto& f : {TestFunction::squared_norm(), TestFunction::gaussian_bump({0.0}, 1.0)}) {
        const auto [mean, se] = martingale_increment(*out.flow, model, f, 0.5, 1.5, event);
        CHECK(se > 0.0);
        CHECK(std::abs(mean) <= 4.0 * se);
    }
}

TEST_CASE("initial laws") {
    const PathGrid g(1.0, 8);
    InitialLaw bridge = point_law({1.0, 2.0}, 0.5);
    bridge.kind = InitialLaw::Kind::bridge;
    bridge.bridge_scale = 0.3;
    const auto key = rng::derive_key(13, "init");
    const auto mu = bridge.sample(g, 20, key);
    const auto flat = point_law({1.0, 2.0}, 0.5).sample(g, 20, key);
    for (std::size_t i = 0; i < 20; ++i) {
        for (int c = 0; c < 2; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            CHECK(mu.particle(i).start()[ci] == doctest::Approx(flat.particle(i).endpoint()[ci]).epsilon(1e-14));
            CHECK(mu.particle(i).endpoint()[ci] == doctest::Approx(flat.particle(i).endpoint()[ci]).epsilon(1e-14));
        }
        CHECK(mu.particle(i).point(4)[0] != flat.particle(i).point(4)[0]);
    }
    const auto shifted = point_law({1.0, 2.0}, 0.5).sample(g, 10, key, 10);
    for (std::size_t i = 0; i < 10; ++i) CHECK(std::ranges::equal(shifted.particle(i).data, flat.particle(i + 10).data));
}
