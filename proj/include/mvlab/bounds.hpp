#pragma once

#include <cstddef>
#include <vector>

#include "mvlab/models.hpp"

namespace mvlab {

/// Constants entering the W2 contraction estimate, all constant in time.
struct ContractionParams {
    double r0 = 1.0;
    double kappa = 0.0;
    double alpha1 = 0.0, alpha2 = 0.0;
    double beta1 = 0.0, beta2 = 0.0;

    static ContractionParams from_constants(const RegularityConstants& c, double r0);
    void validate() const;
};

/**
 * @brief Geometric grid of `points` values of epsilon in [lo, hi].
 *
 * Point k is exp(log lo + (k/(points-1)) (log hi - log lo)), so the grid with
 * 2*points-1 points contains this one exactly.
 */
struct EpsGrid {
    std::size_t points = 128;
    double lo = 1e-6;
    double hi = 1.0 - 1e-6;

    double at(std::size_t k) const;
    EpsGrid doubled() const { return {2 * points - 1, lo, hi}; }
};

struct BoundValue {
    double bound = 0.0;
    double eps_star = 0.0;
    double delta_star = 0.0;
};

/**
 * Upper bound on E||X_t - Y_t||_inf^2 for solutions started with paired
 * initial cost w0_sq:
 *
 *   min_eps min_{delta in [0,kappa]} w0_sq/(1-eps)
 *       * exp[(r0 - t) delta + e^{delta r0}/(1-eps) t (4(alpha1+alpha2)/eps + beta1 + beta2)].
 *
 * The minimisation is over the factor multiplying w0_sq, so the result is
 * exactly linear in w0_sq.
 */
BoundValue contraction_bound(const ContractionParams& p, double w0_sq, double t, const EpsGrid& grid = {});

struct ExoResult {
    bool holds = false;
    double lhs_min = 0.0;      ///< min over the grid of 4(a1+a2)/(eps(1-eps)) + (b1+b2)/(1-eps)
    double rhs = 0.0;          ///< sup_{delta in [0,kappa]} delta e^{-delta r0}
    double best_rate = 0.0;    ///< max_{eps, delta} delta - e^{delta r0} lhs(eps)
    double best_eps = 0.0;
    double best_delta = 0.0;
};

/// Exponential-contraction test for constant coefficients; best_rate is the decay rate of the bound.
ExoResult exo_criterion(const ContractionParams& p, const EpsGrid& grid = {});

/// Probability weights on a finite alphabet.
class DiscreteMeasure {
public:
    /// Throws std::invalid_argument unless the weights are nonnegative and sum to 1 within 1e-12.
    explicit DiscreteMeasure(std::vector<double> weights);

    std::size_t size() const { return w_.size(); }
    double operator[](std::size_t i) const { return w_[i]; }
    const std::vector<double>& weights() const { return w_; }

private:
    std::vector<double> w_;
};

/// sum nu_i log(nu_i / mu_i), with 0 log 0 = 0 and +inf when nu charges a mu-null atom.
double relative_entropy(const DiscreteMeasure& nu, const DiscreteMeasure& mu);

struct PinskerResult {
    double tv = 0.0;
    double ent = 0.0;
    bool satisfied = false;
};

/// tv = 1/2 sum |mu_i - nu_i|; satisfied when tv^2 <= ent/2 + 1e-12.
PinskerResult pinsker_check(const DiscreteMeasure& nu, const DiscreteMeasure& mu);

}  // namespace mvlab
