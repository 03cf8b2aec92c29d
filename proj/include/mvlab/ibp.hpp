#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mvlab/functionals.hpp"
#include "mvlab/models.hpp"
#include "mvlab/simulate.hpp"

namespace mvlab {

/**
 * @brief The direction field Phi and its integral Theta for a shift along eta.
 *
 * With tau = T - r0 and K = tau / h, Phi is constant on each Euler step:
 * eta(-r0)/tau on steps k < K and eta' on cell k - K afterwards. Theta lives
 * on [-r0, T] with the layout of a recorded flow: m+1 zeros followed by
 * Theta_{j+1} = Theta_j + Phi_j h, so the segment of Theta at T is eta.
 */
struct ShiftPlan {
    PathGrid grid{1.0, 1};
    int dim = 1;
    double T = 0.0;
    std::size_t steps = 0;
    std::vector<double> phi;    ///< steps x d
    std::vector<double> theta;  ///< (m + 1 + steps) x d
    double eta_start_sq = 0.0;  ///< |eta(-r0)|^2
    double eta_h1_sq = 0.0;     ///< ||eta||_{H^1}^2

    std::span<const double> phi_at(std::size_t k) const;
    /// Theta on [t_k - r0, t_k].
    SegmentView theta_segment(std::size_t k) const;
    /// |eta(-r0)|^2 / (T - r0) + ||eta||_{H^1}^2, equal to int_0^T |Phi|^2.
    double energy() const { return eta_start_sq / (T - grid.r0()) + eta_h1_sq; }
};

/// Throws std::invalid_argument unless T > r0 is a grid time and eta lives on `grid`.
ShiftPlan build_shift_plan(const CameronMartinVector& eta, double T, const PathGrid& grid);

/// Lambda(1 + T^2 K)(|eta(-r0)|^2/(T-r0) + ||eta||_{H^1}^2) with Lambda = lambda^2 and K = kappa2^2.
double shift_constant(const RegularityConstants& c, const ShiftPlan& plan);

/// Particles under a frozen flow together with their weights M(T).
struct WeightedSamples {
    EmpiricalPathMeasure x_final;
    std::vector<double> weight;
    /// Full paths on [-r0, T] when requested: n x (m + 1 + steps) x d.
    std::vector<double> paths;
};

/**
 * Runs `init` to T under the frozen flow and accumulates
 * M(T) = sum_k <sigma^{-1}(Phi_k - grad_{Theta_k} b(t_k, ., mu_k)(X_{t_k})), dW_k>.
 * Particle i draws its increments from (noise_key, k, index_offset + i).
 * Requires additive noise and a flow that reaches T.
 */
WeightedSamples simulate_weighted(const CoefficientModel& model, const MeasureFlow& flow, const ShiftPlan& plan,
                                  const EmpiricalPathMeasure& init, std::uint64_t noise_key,
                                  std::uint64_t index_offset, bool parallel, bool keep_paths = false);

/**
 * M(T) for one stored path on [-r0, T]; the increments are regenerated from
 * (noise_key, k, stream_index).
 */
double malliavin_weight(const CoefficientModel& model, const MeasureFlow& flow, const ShiftPlan& plan,
                        const Trajectory& path, std::uint64_t noise_key, std::uint64_t stream_index);

struct IbpConfig {
    PathGrid grid{1.0, 1};
    double T = 0.0;
    std::size_t n_flow = 2000;
    std::size_t n_samples = 100000;
    std::size_t batch = 8192;
    std::uint64_t seed = 0;
    bool parallel = true;
};

struct IbpReport {
    double T = 0.0;
    double h = 0.0;
    double lhs = 0.0;  ///< E (grad_eta f)(X_T)
    double rhs = 0.0;  ///< E f(X_T) M(T)
    double lhs_se = 0.0;
    double rhs_se = 0.0;
    double diff_se = 0.0;  ///< of lhs - rhs from paired samples
    double weight_mean = 0.0;
    double weight_se = 0.0;
    double weight_sq_mean = 0.0;
    double weight_sq_se = 0.0;
    std::size_t n_samples = 0;
};

/// E(grad_eta f)(X_T) against E[f(X_T) M(T)] for X driven by the flow from mu0.
IbpReport ibp_check(const CoefficientModel& model, const InitialLaw& mu0, const CameronMartinVector& eta,
                    const PathFunctional& f, const IbpConfig& config);

/// Outcome of comparing an IBP residual at steps h and h/2.
struct RefinementResult {
    double residual_h = 0.0;
    double residual_h2 = 0.0;
    double se_h = 0.0;
    double se_h2 = 0.0;
    double h = 0.0;
    double C = 0.0;  ///< 2 |r_h - r_{h/2}| / h
    bool passed = false;
};

/// Each level must satisfy |r| <= max(3 se, C h_level).
RefinementResult refinement_check(double r_h, double se_h, double r_h2, double se_h2, double h);

struct ShiftHarnackReport {
    double T = 0.0;
    double p = 0.0;  ///< 0 marks the log variant
    double lhs = 0.0;
    double rhs = 0.0;
    double factor = 0.0;  ///< exp term for p > 1, additive constant for the log variant
    double margin = 0.0;  ///< rhs - lhs
    double std_error = 0.0;
    std::size_t n_samples = 0;
};

/**
 * (P_T f)^p(mu0) <= (P_T f^p(eta + .))(mu0) exp[p C / (p-1)^2] with C from
 * shift_constant; p == 0 checks (P_T log f)(mu0) <= log (P_T f(eta + .))(mu0) + C.
 */
ShiftHarnackReport shift_harnack_check(const CoefficientModel& model, const InitialLaw& mu0,
                                       const CameronMartinVector& eta, const PathFunctional& f, double p,
                                       const IbpConfig& config);

struct DensityBoundReport {
    double bound = 0.0;  ///< shift_constant
    double weight_sq_mean = 0.0;
    double weight_sq_se = 0.0;
    std::vector<std::size_t> bins;
    std::vector<double> g_sq;  ///< binned E[E(M | X_T(0))^2], one per bin count
    std::vector<double> g_sq_se;
};

/**
 * Estimates int g^2 dmu_T for g = d(partial_eta mu_T)/dmu_T by averaging M(T)
 * over equal-width bins of the first coordinate of X_T(0).
 */
DensityBoundReport density_bound_check(const CoefficientModel& model, const InitialLaw& mu0,
                                       const CameronMartinVector& eta, const IbpConfig& config,
                                       const std::vector<std::size_t>& bins = {8, 16, 32});

}  // namespace mvlab
