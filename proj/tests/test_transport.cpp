#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mvlab/transport.hpp"
#include "support.hpp"

using namespace mvlab;
using testing::random_measure;

TEST_CASE("ground cost matrix examples") {
    std::mt19937_64 gen(10);
    const PathGrid g(1.0, 6);
    const auto mu = random_measure(gen, g, 2, 5);
    const auto c = ground_cost_matrix(mu, mu);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(c(i, i) == 0.0);
        for (std::size_t j = 0; j < 5; ++j) CHECK(c(i, j) == c(j, i));
    }

    const auto a = random_measure(gen, g, 2, 1), b = random_measure(gen, g, 2, 1);
    const auto one = ground_cost_matrix(a, b);
    REQUIRE(one.n == 1);
    CHECK(one(0, 0) == sup_distance_sq(a.particle(0), b.particle(0)));

    const auto x = random_measure(gen, g, 2, 3), y = random_measure(gen, g, 2, 3);
    const auto cm = ground_cost_matrix(x, y);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            double best = 0.0;
            for (std::size_t k = 0; k < g.points(); ++k) {
                const double dx = x.particle(i).point(k)[0] - y.particle(j).point(k)[0];
                const double dy = x.particle(i).point(k)[1] - y.particle(j).point(k)[1];
                best = std::max(best, dx * dx + dy * dy);
            }
            CHECK(cm(i, j) == doctest::Approx(best).epsilon(1e-15));
        }
    }
}

TEST_CASE("mismatched measures are rejected") {
    std::mt19937_64 gen(11);
    const auto a = random_measure(gen, PathGrid(1.0, 4), 1, 3);
    CHECK_THROWS_AS(ground_cost_matrix(a, random_measure(gen, PathGrid(1.0, 4), 1, 4)), std::invalid_argument);
    CHECK_THROWS_AS(ground_cost_matrix(a, random_measure(gen, PathGrid(1.0, 5), 1, 3)), std::invalid_argument);
    CHECK_THROWS_AS(w2_bruteforce(random_measure(gen, PathGrid(1.0, 2), 1, 9), random_measure(gen, PathGrid(1.0, 2), 1, 9)),
                    std::invalid_argument);
}

TEST_CASE("parallel and serial cost matrices agree bitwise") {
    std::mt19937_64 gen(12);
    const PathGrid g(0.5, 30);
    const auto a = random_measure(gen, g, 3, 200), b = random_measure(gen, g, 3, 200);
    const auto p = ground_cost_matrix(a.batch(), b.batch());
    const auto s = ground_cost_matrix_serial(a.batch(), b.batch());
    CHECK(p.c == s.c);
}

TEST_CASE("w2_exact examples") {
    std::mt19937_64 gen(13);
    const PathGrid g(1.0, 5);
    const auto mu = random_measure(gen, g, 2, 7);
    CHECK(w2_exact(mu, mu) == 0.0);
    const auto a = random_measure(gen, g, 2, 1), b = random_measure(gen, g, 2, 1);
    CHECK(w2_exact(a, b) == doctest::Approx(std::sqrt(sup_distance_sq(a.particle(0), b.particle(0)))).epsilon(1e-15));
    const auto x = random_measure(gen, g, 2, 6), y = random_measure(gen, g, 2, 6);
    CHECK(std::abs(w2_exact(x, y) - w2_bruteforce(x, y)) <= 1e-12);
}

TEST_CASE("brute force picks the cheaper off-diagonal matching") {
    // Identity costs 1, 1, 10; swapping the first two rows costs 0, 0, 10.
    const PathGrid g(1.0, 1);
    auto seg = [&](double v) { return Segment(g, 1, {v, v}); };
    const EmpiricalPathMeasure mu(std::vector<Segment>{seg(0.0), seg(1.0), seg(2.0)});
    const EmpiricalPathMeasure nu(std::vector<Segment>{seg(1.0), seg(0.0), seg(2.0 + std::sqrt(10.0))});
    const auto c = ground_cost_matrix(mu, nu);
    std::vector<std::size_t> perm{0, 1, 2};
    double best = 1e300;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < 3; ++i) s += c(i, perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(w2_bruteforce(mu, nu) == doctest::Approx(std::sqrt(best / 3.0)).epsilon(1e-15));
    CHECK(w2_bruteforce(mu, nu) < std::sqrt(paired_cost(mu, nu)));
}

TEST_CASE("w2_exact metric properties") {
    std::mt19937_64 gen(14);
    const PathGrid g(0.5, 8);
    for (int trial = 0; trial < 30; ++trial) {
        const auto a = random_measure(gen, g, 2, 12), b = random_measure(gen, g, 2, 12, 2.0),
                   c = random_measure(gen, g, 2, 12, 0.5);
        const double ab = w2_exact(a, b), ba = w2_exact(b, a), bc = w2_exact(b, c), ac = w2_exact(a, c);
        CHECK(std::abs(ab - ba) <= 1e-12);
        CHECK(ac <= ab + bc + 1e-9);
        CHECK(ab * ab <= paired_cost(a, b) + 1e-12);
    }
}

TEST_CASE("Hungarian assignment matches exhaustive search") {
    std::mt19937_64 gen(15);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        CostMatrix c{6, std::vector<double>(36)};
        for (double& v : c.c) v = ud(gen);
        const Assignment a = solve_assignment(c);
        std::vector<std::size_t> perm(6);
        std::iota(perm.begin(), perm.end(), 0);
        double best = 1e300;
        do {
            double s = 0.0;
            for (std::size_t i = 0; i < 6; ++i) s += c(i, perm[i]);
            best = std::min(best, s);
        } while (std::next_permutation(perm.begin(), perm.end()));
        CHECK(a.cost == doctest::Approx(best).epsilon(1e-13));
        std::vector<std::size_t> sorted = a.perm;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < 6; ++i) CHECK(sorted[i] == i);
    }
}

TEST_CASE("w2_sinkhorn examples") {
    std::mt19937_64 gen(16);
    const PathGrid g(1.0, 4);
    const auto mu = random_measure(gen, g, 1, 16);
    double prev = 1e300;
    for (double reg : {1e-1, 1e-2, 1e-3}) {
        const auto r = w2_sinkhorn(mu, mu, reg, 20000);
        CHECK(r.w2 <= prev + 1e-12);
        prev = r.w2;
    }
    CHECK(prev <= 1e-3);

    const auto a = random_measure(gen, g, 2, 1), b = random_measure(gen, g, 2, 1);
    const auto one = w2_sinkhorn(a, b, 0.3, 100);
    CHECK(one.w2 == doctest::Approx(std::sqrt(sup_distance_sq(a.particle(0), b.particle(0)))).epsilon(1e-9));

    const auto x = random_measure(gen, g, 2, 64), y = random_measure(gen, g, 2, 64, 1.5);
    const auto cost = ground_cost_matrix(x, y);
    std::vector<double> sorted = cost.c;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const double median = sorted[sorted.size() / 2];
    const auto r = w2_sinkhorn(cost, 1e-3 * median, 100000);
    CHECK(r.converged);
    const double exact = w2_exact(x, y);
    CHECK(std::abs(r.w2 - exact) <= 0.02 * exact);
}

TEST_CASE("entropic estimates approach the exact value from above as reg shrinks") {
    std::mt19937_64 gen(17);
    const PathGrid g(1.0, 3);
    const auto x = random_measure(gen, g, 1, 24), y = random_measure(gen, g, 1, 24, 2.0);
    const double exact = w2_exact(x, y);
    double prev_gap = 1e300;
    for (double reg : {1.0, 0.3, 0.1, 0.03, 0.01}) {
        const auto r = w2_sinkhorn(x, y, reg, 200000);
        CHECK(r.converged);
        CHECK(r.w2 >= exact - 1e-6);
        const double gap = r.w2 - exact;
        CHECK(gap <= prev_gap + 1e-9);
        prev_gap = gap;
    }
}

TEST_CASE("non-convergence is flagged") {
    std::mt19937_64 gen(18);
    const PathGrid g(1.0, 3);
    const auto x = random_measure(gen, g, 1, 32), y = random_measure(gen, g, 1, 32, 3.0);
    const auto r = w2_sinkhorn(x, y, 1e-4, 3);
    CHECK_FALSE(r.converged);
    CHECK(r.w2 >= 0.0);
}

TEST_CASE("w2_auto switches to the entropic solver above the cap") {
    std::mt19937_64 gen(19);
    const PathGrid g(1.0, 2);
    const auto x = random_measure(gen, g, 1, 20), y = random_measure(gen, g, 1, 20);
    CHECK(w2_auto(x.batch(), y.batch()).method == "exact");
    const auto w = w2_auto(x.batch(), y.batch(), 10);
    CHECK(w.method == "sinkhorn");
    CHECK(std::abs(w.w2 - w2_exact(x, y)) <= 0.05 * w2_exact(x, y));
    CHECK_THROWS(w2_exact(x, y, 10));
}
