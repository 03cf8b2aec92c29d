#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "mvlab/coupling.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"
#include "mvlab/transport.hpp"
#include "support.hpp"

using namespace mvlab;

namespace {

InitialLaw point_law(std::vector<double> mean, double spread) {
    InitialLaw law;
    law.mean = std::move(mean);
    law.spread = spread;
    return law;
}

HarnackConfig harnack_config(const PathGrid& g, double T, std::size_t n_flow, std::size_t n_samples,
                             std::uint64_t seed) {
    HarnackConfig c;
    c.grid = g;
    c.T = T;
    c.n_flow = n_flow;
    c.n_samples = n_samples;
    c.batch = 4096;
    c.seed = seed;
    return c;
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

TEST_CASE("gamma_bar examples") {
    std::mt19937_64 gen(1);
    const PathGrid g(0.5, 4);
    const auto ou = make_ou(2, 1.0, 0.5, 0.5);
    const auto mu = testing::random_measure(gen, g, 2, 5), nu = testing::random_measure(gen, g, 2, 5, 3.0);
    const auto z = gamma_bar(ou, 0.0, testing::random_segment(gen, g, 2), mu, nu);
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);

    const Matrix A0 = random_matrix(gen, 2, 1.0), A1 = random_matrix(gen, 2, 1.0), B = random_matrix(gen, 2, 1.0);
    const Matrix S = random_matrix(gen, 2, 0.3) + Matrix::Identity(2, 2);
    const auto model = make_linear_meanfield_delay(2, A0, A1, B, S, 0.5);
    const auto m1 = mu.endpoint_mean(), m2 = nu.endpoint_mean();
    Vector dm(2);
    dm << m1[0] - m2[0], m1[1] - m2[1];
    const Vector expected = S.fullPivLu().solve(B * dm);
    const auto gb = gamma_bar(model, 0.0, testing::random_segment(gen, g, 2), mu, nu);
    CHECK(gb[0] == doctest::Approx(expected(0)).epsilon(1e-12));
    CHECK(gb[1] == doctest::Approx(expected(1)).epsilon(1e-12));
}

TEST_CASE("gamma_bar is bounded by lambda kappa2 W2") {
    std::mt19937_64 gen(2);
    const PathGrid g(0.5, 6);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix S = random_matrix(gen, 2, 0.3) + Matrix::Identity(2, 2);
        const auto model = make_linear_meanfield_delay(2, random_matrix(gen, 2, 1.0), random_matrix(gen, 2, 1.0),
                                                       random_matrix(gen, 2, 1.0), S, 0.5);
        const auto mu = testing::random_measure(gen, g, 2, 6), nu = testing::random_measure(gen, g, 2, 6, 2.0);
        const auto gb = gamma_bar(model, 0.0, testing::random_segment(gen, g, 2), mu, nu);
        const double norm = std::hypot(gb[0], gb[1]);
        const auto& c = model.constants();
        CHECK(norm <= c.lambda * c.kappa2 * w2_exact(mu, nu) * (1.0 + 1e-12));
    }
}

TEST_CASE("identical laws and samples need no correction") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 0.8, r0);
    const auto law = point_law({1.0}, 0.5);
    const auto cfg = harnack_config(g, 1.5, 500, 0, 3);
    const auto flows = simulate_flow_pair(model, law, law, cfg);
    CHECK(flows.mu.paths == flows.nu.paths);
    const auto x0 = law.sample(g, 300, rng::derive_key(3, "x0"));
    CouplingConfig cc;
    cc.T = 1.5;
    cc.seed = 3;
    cc.trace_count = 5;
    const auto ens = coupled_simulate(model, flows.mu, flows.nu, x0, x0, cc);
    for (std::size_t j = 0; j < ens.n; ++j) {
        CHECK(ens.log_weight[j] == 0.0);
        CHECK(ens.action[j] == 0.0);
    }
    for (const auto& tr : ens.traces) {
        for (double v : tr.gamma_bar) CHECK(v == 0.0);
        for (double v : tr.gamma_tilde) CHECK(v == 0.0);
        for (double v : tr.log_weight) CHECK(v == 0.0);
    }
    CHECK(ens.max_merge_gap == 0.0);
}

TEST_CASE("coupled paths merge and the density reproduces the target law") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto mu0 = point_law({1.0}, 0.3), nu0 = point_law({0.0}, 0.3);
    const double T = 1.5;
    const auto flows = simulate_flow_pair(model, mu0, nu0, harnack_config(g, T, 1000, 0, 4));

    const std::size_t n = 40000;
    const auto key = rng::derive_key(4, "pairs");
    CouplingConfig cc;
    cc.T = T;
    cc.seed = 4;
    cc.certificate_stride = 4;
    cc.trace_count = 3;
    const auto ens = coupled_simulate(model, flows.mu, flows.nu, mu0.sample(g, n, key), nu0.sample(g, n, key), cc);
    CHECK(ens.max_merge_gap == 0.0);
    CHECK(ens.merge_time == doctest::Approx(T - r0).epsilon(1e-15));
    CHECK(ens.max_certificate_ratio <= 1.0 + 1e-9);
    for (std::size_t j = 0; j < ens.traces.size(); ++j) {
        CHECK(ens.traces[j].log_weight.back() == ens.log_weight[j]);
    }

    std::vector<double> w(n), wx(n), wx2(n);
    for (std::size_t j = 0; j < n; ++j) {
        w[j] = std::exp(ens.log_weight[j]);
        const double x = ens.x_final.particle(j).endpoint()[0];
        wx[j] = w[j] * x;
        wx2[j] = w[j] * x * x;
    }
    const Estimate one = mean_estimate(w);
    CHECK(std::abs(one.mean - 1.0) <= 3.0 * one.std_error);

    // Independent oracle: the nu-flow law at T from a separate frozen-flow run.
    const auto steps = static_cast<std::size_t>(std::lround(T / g.dt()));
    const auto ref = simulate_frozen(model, flows.nu, nu0.sample(g, n, rng::derive_key(4, "ref_init")), steps,
                                     rng::derive_key(4, "ref_noise"));
    std::vector<double> rx(n), rx2(n);
    for (std::size_t j = 0; j < n; ++j) {
        rx[j] = ref.particle(j).endpoint()[0];
        rx2[j] = rx[j] * rx[j];
    }
    for (const auto& [a, b] : {std::pair{mean_estimate(wx), mean_estimate(rx)}, {mean_estimate(wx2), mean_estimate(rx2)}}) {
        CHECK(std::abs(a.mean - b.mean) <= 4.0 * std::hypot(a.std_error, b.std_error));
    }
}

TEST_CASE("coupling is reproducible across thread modes and batches") {
    const double r0 = 0.5;
    const PathGrid g(r0, 4);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto mu0 = point_law({1.0}, 0.3), nu0 = point_law({0.0}, 0.3);
    const auto flows = simulate_flow_pair(model, mu0, nu0, harnack_config(g, 1.0, 300, 0, 5));
    const auto key = rng::derive_key(5, "pairs");
    CouplingConfig cc;
    cc.T = 1.0;
    cc.seed = 5;
    const auto a = coupled_simulate(model, flows.mu, flows.nu, mu0.sample(g, 200, key), nu0.sample(g, 200, key), cc);
    cc.parallel = false;
    const auto b = coupled_simulate(model, flows.mu, flows.nu, mu0.sample(g, 200, key), nu0.sample(g, 200, key), cc);
    CHECK(a.log_weight == b.log_weight);
    cc.index_offset = 100;
    const auto c = coupled_simulate(model, flows.mu, flows.nu, mu0.sample(g, 100, key, 100),
                                    nu0.sample(g, 100, key, 100), cc);
    for (std::size_t j = 0; j < 100; ++j) CHECK(c.log_weight[j] == a.log_weight[100 + j]);
}

TEST_CASE("coupling preconditions") {
    const PathGrid g(0.5, 4);
    const double c[] = {1.0};
    const auto noiseless = make_constant_drift(c, 0.0, 0.5);
    const auto law = point_law({0.0}, 1.0);
    HarnackConfig cfg = harnack_config(g, 1.0, 50, 100, 6);
    CHECK_THROWS_AS(log_harnack_check(noiseless, law, law, functional_constant(1.0), cfg), std::invalid_argument);
    const auto ou = make_ou(1, 1.0, 1.0, 0.5);
    CHECK_THROWS_AS(power_harnack_check(ou, law, law, functional_constant(1.0), 1.0, cfg), std::invalid_argument);
    CHECK_THROWS_AS(power_harnack_check(ou, law, law, functional_constant(1.0), 0.5, cfg), std::invalid_argument);
    cfg.T = 0.5;
    CHECK_THROWS_AS(log_harnack_check(ou, law, law, functional_constant(1.0), cfg), std::invalid_argument);
    cfg.T = 1.0;
    CHECK_THROWS_AS(log_harnack_check(ou, law, law, functional_linear({1.0}), cfg), std::invalid_argument);
}

TEST_CASE("log-Harnack with f == 1 reduces to the entropy term") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto r = log_harnack_check(model, point_law({1.0}, 0.3), point_law({-0.5}, 0.3), functional_constant(1.0),
                                     harnack_config(g, 1.5, 500, 5000, 7));
    CHECK(r.lhs == 0.0);
    CHECK(r.rhs == r.entropy_term);
    CHECK(r.margin == r.entropy_term);
    CHECK(r.entropy_term > 0.0);
    CHECK(r.max_merge_gap == 0.0);
}

TEST_CASE("log-Harnack with equal laws is Jensen's inequality") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto law = point_law({0.5}, 0.5);
    const auto r = log_harnack_check(model, law, law, functional_exp_linear_capped({1.0}, 5.0),
                                     harnack_config(g, 1.5, 500, 20000, 8));
    CHECK(r.entropy_term == 0.0);
    CHECK(r.weight_mean == 1.0);
    CHECK(r.margin >= -3.0 * r.std_error);
}

TEST_CASE("power-Harnack examples") {
    const double r0 = 0.5;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.3, 0.5, 1.0, r0);
    const auto cfg = harnack_config(g, 1.5, 500, 20000, 9);
    for (double p : {1.5, 2.0, 4.0}) {
        const auto r = power_harnack_check(model, point_law({1.0}, 0.3), point_law({0.0}, 0.3),
                                           functional_constant(1.0), p, cfg);
        CHECK(std::abs(r.lhs - 1.0) <= 3.0 * r.lhs_se);
        CHECK(r.rhs >= r.lhs);
        CHECK(r.entropy_term >= 1.0);
    }
    const auto law = point_law({0.5}, 0.5);
    const auto same = power_harnack_check(model, law, law, functional_sin_point({1.0}), 2.0, cfg);
    CHECK(same.entropy_term == 1.0);
    CHECK(same.margin >= -3.0 * same.std_error);
}

TEST_CASE("entropy cost per unit of inverse merge time does not grow with the horizon") {
    const double r0 = 0.25;
    const PathGrid g(r0, 8);
    const auto model = testing::scalar_linear(-1.0, 0.2, 0.3, 1.0, r0);
    const auto mu0 = point_law({1.0}, 0.0), nu0 = point_law({0.0}, 0.0);
    double prev = std::numeric_limits<double>::infinity(), prev_se = 0.0;
    for (double gap : {0.25, 0.5, 1.0, 2.0}) {
        const auto r = log_harnack_check(model, mu0, nu0, functional_constant(1.0),
                                         harnack_config(g, r0 + gap, 500, 20000, 10));
        const double scaled = r.entropy_term * gap, scaled_se = r.entropy_se * gap;
        CHECK(std::isfinite(scaled));
        CHECK(scaled <= prev + 3.0 * std::hypot(scaled_se, prev_se));
        prev = scaled;
        prev_se = scaled_se;
    }
}
