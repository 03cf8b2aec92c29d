#include "mvlab/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mvlab {

namespace {

void require_compatible(const SegmentBatch& mu, const SegmentBatch& nu) {
    if (mu.count != nu.count) throw std::invalid_argument("transport: measures must have equal size");
    if (mu.count == 0) throw std::invalid_argument("transport: empty measure");
    if (mu.points != nu.points || mu.dim != nu.dim) throw std::invalid_argument("transport: grid or dimension mismatch");
}

void require_same_grid(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu) {
    if (!(mu.grid() == nu.grid())) throw std::invalid_argument("transport: grid mismatch");
}

void fill_row(const SegmentBatch& mu, const SegmentBatch& nu, std::size_t i, double* row) {
    const SegmentView a = mu[i];
    for (std::size_t j = 0; j < nu.count; ++j) row[j] = sup_distance_sq(a, nu[j]);
}

double log_sum_exp(const double* v, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, v[k]);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += std::exp(v[k] - mx);
    return mx + std::log(s);
}

}  // namespace

CostMatrix ground_cost_matrix(const SegmentBatch& mu, const SegmentBatch& nu) {
    require_compatible(mu, nu);
    CostMatrix out{mu.count, std::vector<double>(mu.count * mu.count)};
    const auto n = static_cast<std::ptrdiff_t>(mu.count);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        fill_row(mu, nu, static_cast<std::size_t>(i), out.c.data() + static_cast<std::size_t>(i) * out.n);
    }
    return out;
}

CostMatrix ground_cost_matrix_serial(const SegmentBatch& mu, const SegmentBatch& nu) {
    require_compatible(mu, nu);
    CostMatrix out{mu.count, std::vector<double>(mu.count * mu.count)};
    for (std::size_t i = 0; i < mu.count; ++i) fill_row(mu, nu, i, out.c.data() + i * out.n);
    return out;
}

CostMatrix ground_cost_matrix(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu) {
    require_same_grid(mu, nu);
    return ground_cost_matrix(mu.batch(), nu.batch());
}

Assignment solve_assignment(const CostMatrix& cost) {
    const std::size_t n = cost.n;
    if (n == 0) throw std::invalid_argument("solve_assignment: empty cost matrix");
    constexpr double inf = std::numeric_limits<double>::infinity();
    // potentials u (rows), v (columns); p[j] is the row matched to column j, 1-based with 0 as sentinel
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    Assignment out;
    out.perm.assign(n, 0);
    for (std::size_t j = 1; j <= n; ++j) out.perm[p[j] - 1] = j - 1;
    for (std::size_t i = 0; i < n; ++i) out.cost += cost(i, out.perm[i]);
    return out;
}

double w2_exact(const SegmentBatch& mu, const SegmentBatch& nu, std::size_t cap) {
    require_compatible(mu, nu);
    if (mu.count > cap) {
        throw std::invalid_argument("w2_exact: N = " + std::to_string(mu.count) + " exceeds the exact-solver cap " +
                                    std::to_string(cap));
    }
    const Assignment a = solve_assignment(ground_cost_matrix(mu, nu));
    return std::sqrt(std::max(0.0, a.cost) / static_cast<double>(mu.count));
}

double w2_exact(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu, std::size_t cap) {
    require_same_grid(mu, nu);
    return w2_exact(mu.batch(), nu.batch(), cap);
}

double w2_bruteforce(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu) {
    require_same_grid(mu, nu);
    const CostMatrix cost = ground_cost_matrix_serial(mu.batch(), nu.batch());
    const std::size_t n = cost.n;
    if (n > 8) throw std::invalid_argument("w2_bruteforce: refused for N > 8");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(best / static_cast<double>(n));
}

SinkhornResult w2_sinkhorn(const CostMatrix& cost, double reg, int max_iter, double tol) {
    if (!(reg > 0.0)) throw std::invalid_argument("w2_sinkhorn: reg must be positive");
    if (max_iter < 1) throw std::invalid_argument("w2_sinkhorn: max_iter must be >= 1");
    const std::size_t n = cost.n;
    if (n == 0) throw std::invalid_argument("w2_sinkhorn: empty cost matrix");
    const double log_w = -std::log(static_cast<double>(n));
    std::vector<double> f(n, 0.0), g(n, 0.0), buf(n);

    const double cmax = *std::max_element(cost.c.begin(), cost.c.end());
    double eps = std::max(reg, cmax);
    SinkhornResult res;
    auto row_error = [&](double e) {
        double err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += std::exp((f[i] + g[j] - cost(i, j)) / e);
            err += std::abs(s - 1.0 / static_cast<double>(n));
        }
        return err;
    };
    while (true) {
        const bool final_stage = eps <= reg;
        bool stage_done = false;
        while (res.iterations < max_iter) {
            ++res.iterations;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) buf[j] = (g[j] - cost(i, j)) / eps;
                f[i] = eps * (log_w - log_sum_exp(buf.data(), n));
            }
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t i = 0; i < n; ++i) buf[i] = (f[i] - cost(i, j)) / eps;
                g[j] = eps * (log_w - log_sum_exp(buf.data(), n));
            }
            if (res.iterations % 10 == 0 || res.iterations == max_iter) {
                res.marginal_error = row_error(eps);
                if (res.marginal_error < (final_stage ? tol : std::max(tol, 1e-4))) {
                    stage_done = true;
                    break;
                }
            }
        }
        if (final_stage || !stage_done) break;
        eps = std::max(reg, 0.5 * eps);
    }
    res.marginal_error = row_error(eps);
    res.converged = eps <= reg && res.marginal_error < tol;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) total += std::exp((f[i] + g[j] - cost(i, j)) / eps) * cost(i, j);
    }
    res.w2 = std::sqrt(std::max(0.0, total));
    return res;
}

SinkhornResult w2_sinkhorn(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu, double reg,
                           int max_iter, double tol) {
    return w2_sinkhorn(ground_cost_matrix(mu, nu), reg, max_iter, tol);
}

W2Estimate w2_auto(const SegmentBatch& mu, const SegmentBatch& nu, std::size_t cap) {
    if (mu.count <= cap) return {w2_exact(mu, nu, cap), "exact", true};
    const CostMatrix cost = ground_cost_matrix(mu, nu);
    std::vector<double> tmp = cost.c;
    auto mid = tmp.begin() + static_cast<std::ptrdiff_t>(tmp.size() / 2);
    std::nth_element(tmp.begin(), mid, tmp.end());
    const double reg = std::max(1e-3 * *mid, 1e-300);
    const SinkhornResult r = w2_sinkhorn(cost, reg, 5000);
    return {r.w2, "sinkhorn", r.converged};
}

double paired_cost(const SegmentBatch& mu, const SegmentBatch& nu) {
    require_compatible(mu, nu);
    double s = 0.0;
    for (std::size_t i = 0; i < mu.count; ++i) s += sup_distance_sq(mu[i], nu[i]);
    return s / static_cast<double>(mu.count);
}

double paired_cost(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu) {
    return paired_cost(mu.batch(), nu.batch());
}

}  // namespace mvlab
