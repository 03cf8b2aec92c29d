#pragma once

#include <cstdint>
#include <vector>

#include "mvlab/functionals.hpp"
#include "mvlab/models.hpp"
#include "mvlab/simulate.hpp"

namespace mvlab {

/// sigma^{-1}(t) [b(t, xi, mu) - b(t, xi, nu)] for measures summarised by their features.
std::vector<double> gamma_bar(const CoefficientModel& model, double t, SegmentView xi,
                              std::span<const double> mu_features, std::span<const double> nu_features);
std::vector<double> gamma_bar(const CoefficientModel& model, double t, const Segment& xi,
                              const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu);

struct CouplingConfig {
    double T = 0.0;
    std::uint64_t seed = 0;
    bool parallel = true;
    /// Stream index of the first sample, for running an ensemble in batches.
    std::uint64_t index_offset = 0;
    /// Per-step corrections are kept for this many leading samples.
    std::size_t trace_count = 0;
    /// Check |gamma_bar| <= lambda kappa2 W2(mu_t, nu_t) every this many steps; 0 disables the check.
    std::size_t certificate_stride = 0;
};

/// Per-step record of one coupled sample.
struct CouplingTrace {
    std::vector<double> gamma_bar;    ///< steps x d
    std::vector<double> gamma_tilde;  ///< steps x d
    std::vector<double> log_weight;   ///< steps + 1 values, starting at 0
};

struct CouplingEnsemble {
    std::size_t n = 0;
    double merge_time = 0.0;
    std::vector<double> log_weight;  ///< l_T = -sum <u, dW> - 1/2 sum |u|^2 h, u = gamma_bar + gamma_tilde
    std::vector<double> action;      ///< sum |u|^2 h
    EmpiricalPathMeasure x_final{PathGrid{1.0, 1}, 1, std::size_t{1}};  ///< X_T, equal to Y_T
    double max_merge_gap = 0.0;      ///< max over samples of ||X_T - Y_T||_inf
    double max_certificate_ratio = 0.0;
    std::vector<CouplingTrace> traces;
};

/**
 * @brief Coupling by change of measure for additive noise.
 *
 * X follows the mu-flow drift with the reference noise W. Y follows the
 * nu-flow drift with W~ = W + int u, where u = gamma_bar + gamma_tilde and,
 * with tau = T - r0,
 *
 *   gamma_tilde = sigma^{-1} [b(t, X_t, nu_t) - b(t, Y_t, nu_t) + (X(t) - Y(t)) / (tau - t)]   (t < tau)
 *   gamma_tilde = sigma^{-1} [b(t, X_t, nu_t) - b(t, Y_t, nu_t)]                              (t >= tau)
 *
 * so X - Y decays linearly to zero at tau; from tau on Y(t) is set to X(t).
 * Under R = e^{l} dP, W~ is a Brownian motion and Y has the nu-flow law.
 * Requires T > r0 and additive noise.
 */
CouplingEnsemble coupled_simulate(const CoefficientModel& model, const MeasureFlow& mu_flow,
                                  const MeasureFlow& nu_flow, const EmpiricalPathMeasure& x0,
                                  const EmpiricalPathMeasure& y0, const CouplingConfig& config);

struct HarnackConfig {
    PathGrid grid{1.0, 1};
    double T = 0.0;
    std::size_t n_flow = 2000;
    std::size_t n_samples = 100000;
    std::size_t batch = 8192;
    std::uint64_t seed = 0;
    bool parallel = true;
    std::size_t certificate_stride = 0;
};

/// p == 0 marks the log-Harnack report.
struct HarnackReport {
    double T = 0.0;
    double p = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    double entropy_term = 0.0;
    double margin = 0.0;     ///< rhs - lhs; for the log variant rhs already includes entropy_term
    double std_error = 0.0;  ///< of the margin
    double lhs_se = 0.0;
    double rhs_se = 0.0;
    double entropy_se = 0.0;
    double weight_mean = 0.0;
    double weight_se = 0.0;
    double max_merge_gap = 0.0;
    double max_certificate_ratio = 0.0;
    std::size_t n_samples = 0;
};

/// The measure flows from mu0 and nu0 used by the Harnack checks.
struct FlowPair {
    MeasureFlow mu;
    MeasureFlow nu;
};

/**
 * Simulates the mu- and nu-flows with n_flow particles each. Both initial
 * laws are sampled from the same stream and both flows share their noise, so
 * equal laws give identical flows.
 */
FlowPair simulate_flow_pair(const CoefficientModel& model, const InitialLaw& mu0, const InitialLaw& nu0,
                            const HarnackConfig& config);

/**
 * (P_T log f)(nu0) <= log (P_T f)(mu0) + E[R log R]:
 * lhs = E[e^l log f(X_T)], rhs = log of an independent estimate of E f(X_T)
 * plus entropy_term = 1/2 E[e^l sum |u|^2 h].
 */
HarnackReport log_harnack_check(const CoefficientModel& model, const InitialLaw& mu0, const InitialLaw& nu0,
                                const PathFunctional& f, const HarnackConfig& config);

/**
 * (P_T f(nu0))^p <= (E R^{p/(p-1)})^{p-1} P_T f^p(mu0), all three expectations
 * from the same coupled samples. Requires p > 1.
 */
HarnackReport power_harnack_check(const CoefficientModel& model, const InitialLaw& mu0, const InitialLaw& nu0,
                                  const PathFunctional& f, double p, const HarnackConfig& config);

}  // namespace mvlab
