#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mvlab/measure.hpp"

namespace mvlab {

/// Default largest N handled by the exact assignment solver.
inline constexpr std::size_t kExactCap = 2048;

/// Row-major N x N matrix of squared sup-norm distances.
struct CostMatrix {
    std::size_t n = 0;
    std::vector<double> c;

    double operator()(std::size_t i, std::size_t j) const { return c[i * n + j]; }
};

/// c[i][j] = ||mu_i - nu_j||_inf^2, rows filled in parallel.
CostMatrix ground_cost_matrix(const SegmentBatch& mu, const SegmentBatch& nu);
/// Single-threaded reference for ground_cost_matrix; results are bitwise equal.
CostMatrix ground_cost_matrix_serial(const SegmentBatch& mu, const SegmentBatch& nu);
CostMatrix ground_cost_matrix(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu);

struct Assignment {
    double cost = 0.0;               ///< sum of c[i][perm[i]], accumulated in row order
    std::vector<std::size_t> perm;   ///< row i is matched to column perm[i]
};

/// Minimum-cost perfect matching by the Hungarian method, O(N^3).
Assignment solve_assignment(const CostMatrix& cost);

/// Exact W2 between uniform empirical measures of equal size; throws past `cap`.
double w2_exact(const SegmentBatch& mu, const SegmentBatch& nu, std::size_t cap = kExactCap);
double w2_exact(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu, std::size_t cap = kExactCap);

/// Enumerates all N! matchings; N <= 8.
double w2_bruteforce(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu);

struct SinkhornResult {
    double w2 = 0.0;             ///< square root of the transport cost of the entropic plan
    int iterations = 0;
    double marginal_error = 0.0; ///< L1 row-marginal violation at exit
    bool converged = false;
};

/**
 * @brief Entropic transport in the log domain with epsilon scaling.
 *
 * The regularisation starts at the largest cost and is halved down to `reg`;
 * the reported value is the unregularised cost of the final plan, which is an
 * upper bound on the exact W2^2 up to the marginal error. Non-convergence
 * within `max_iter` total iterations is reported, not thrown.
 */
SinkhornResult w2_sinkhorn(const CostMatrix& cost, double reg, int max_iter, double tol = 1e-6);
SinkhornResult w2_sinkhorn(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu, double reg,
                           int max_iter, double tol = 1e-6);

struct W2Estimate {
    double w2 = 0.0;
    std::string method;  ///< "exact" or "sinkhorn"
    bool converged = true;
};

/// Exact solver up to `cap` particles, Sinkhorn with reg = 1e-3 * median cost above it.
W2Estimate w2_auto(const SegmentBatch& mu, const SegmentBatch& nu, std::size_t cap = kExactCap);

/// Mean of ||mu_i - nu_i||_inf^2 for index-paired ensembles: the cost of the identity matching.
double paired_cost(const SegmentBatch& mu, const SegmentBatch& nu);
double paired_cost(const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu);

}  // namespace mvlab
