#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvlab/measure.hpp"
#include "mvlab/pathspace.hpp"

namespace mvlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class DiffusionKind { none, additive, state };

/**
 * Regularity constants of the coefficients, all taken constant in time.
 *
 *   alpha1, alpha2 : Lipschitz constants of sigma in (xi, W2)
 *   beta1, beta2, kappa : monotonicity of (b, sigma)
 *   K : linear growth of b(t,0,mu) and sigma(t,0,mu)
 *   kappa0..kappa3, lambda : invertible-diffusion assumption, lambda bounds ||sigma^{-1}||
 */
struct RegularityConstants {
    double alpha1 = 0, alpha2 = 0;
    double beta1 = 0, beta2 = 0;
    double kappa = 0;
    double K = 0;
    double kappa0 = 0, kappa1 = 0, kappa2 = 0, kappa3 = 0;
    double lambda = 0;

    void validate() const;
};

using FeatureFn = std::function<void(const SegmentBatch&, std::span<double>)>;
using DriftFn = std::function<void(double t, SegmentView xi, std::span<const double> features, std::span<double> out)>;
using DiffusionFn = std::function<void(double t, std::span<const double> x, std::span<double> out)>;
using DirectionalDriftFn = std::function<void(double t, SegmentView xi, SegmentView direction,
                                              std::span<const double> features, std::span<double> out)>;

/**
 * Everything needed to build a CoefficientModel.
 *
 * The drift sees the measure only through `features`, a fixed-length summary
 * computed once per time step from the whole ensemble (e.g. the mean of
 * xi(0)). This keeps the particle update O(N) per step. `diffusion` fills a
 * row-major d x d matrix from (t, xi(0)).
 */
struct ModelDefinition {
    std::string name;
    int dim = 1;
    DiffusionKind kind = DiffusionKind::additive;
    RegularityConstants constants;
    bool invertible_diffusion = false;
    std::size_t feature_count = 0;
    FeatureFn features;
    DriftFn drift;
    DiffusionFn diffusion;
    DirectionalDriftFn drift_derivative;
    std::optional<double> delay;
};

class CoefficientModel {
public:
    explicit CoefficientModel(ModelDefinition def);

    const std::string& name() const { return def_.name; }
    int dim() const { return def_.dim; }
    DiffusionKind diffusion_kind() const { return def_.kind; }
    const RegularityConstants& constants() const { return def_.constants; }
    bool invertible_diffusion() const { return def_.invertible_diffusion; }
    std::size_t feature_count() const { return def_.feature_count; }
    bool measure_dependent() const { return def_.feature_count > 0; }
    bool has_drift_derivative() const { return static_cast<bool>(def_.drift_derivative); }

    /// Throws std::invalid_argument if the model was built for a different delay.
    void check_grid(const PathGrid& grid) const;

    void features(const SegmentBatch& mu, std::span<double> out) const;
    std::vector<double> features(const EmpiricalPathMeasure& mu) const;

    void drift(double t, SegmentView xi, std::span<const double> features, std::span<double> out) const;
    std::vector<double> drift(double t, const Segment& xi, const EmpiricalPathMeasure& mu) const;

    /// Row-major d x d; all zeros for DiffusionKind::none.
    void diffusion(double t, std::span<const double> x, std::span<double> out) const;
    Matrix diffusion_matrix(double t, std::span<const double> x) const;
    /// Throws std::domain_error when sigma(t,x) is singular.
    Matrix diffusion_inverse(double t, std::span<const double> x) const;

    /**
     * Directional derivative of b(t, ., mu) at xi along `direction`.
     *
     * Models without an analytic derivative fall back to a central difference
     * with step 1e-5 * max(1, ||xi||_inf) / ||direction||_inf; a warning is
     * printed once per model when that happens.
     */
    void directional_drift(double t, SegmentView xi, SegmentView direction, std::span<const double> features,
                           std::span<double> out) const;

private:
    ModelDefinition def_;
    std::shared_ptr<std::once_flag> fd_warning_;
};

/**
 * b(t, xi, mu) = A0 xi(0) + A1 xi(-r0) + B * int zeta(0) mu(d zeta),  sigma = sigma0.
 *
 * Constants are certified analytically: with s the least eigenvalue of
 * -(A0 + A0^T), kappa = max(0, s - |A1| - |B|/2), beta1 = |A1| + max(0, |A1| + |B|/2 - s),
 * beta2 = 2|B|, kappa2 = |A0| + |A1| + |B|, lambda = |sigma0^{-1}| (spectral norms).
 * Throws std::invalid_argument for a singular sigma0.
 */
CoefficientModel make_linear_meanfield_delay(int d, const Matrix& A0, const Matrix& A1, const Matrix& B,
                                             const Matrix& sigma0, double r0);

/// dX = -theta X dt + sigma dW in d dimensions (no delay, no mean field).
CoefficientModel make_ou(int d, double theta, double sigma, double r0);

/// b == c; sigma = sigma*I, or no noise when sigma == 0.
CoefficientModel make_constant_drift(std::span<const double> c, double sigma, double r0);

/**
 * Smooth test function on R^d with analytic gradient and row-major Hessian.
 */
struct TestFunction {
    std::string name;
    std::function<double(std::span<const double>)> value;
    std::function<void(std::span<const double>, std::span<double>)> gradient;
    std::function<void(std::span<const double>, std::span<double>)> hessian;

    static TestFunction constant(double c);
    static TestFunction coordinate(int i);
    static TestFunction squared_norm();
    static TestFunction gaussian_bump(std::vector<double> center, double width);
};

/// a*f + c*g
TestFunction linear_combination(double a, const TestFunction& f, double c, const TestFunction& g);

/// (L_{t,mu} f)(xi) = 1/2 tr(sigma sigma^* Hess f(xi(0))) + <b(t,xi,mu), grad f(xi(0))>.
double generator_apply(const CoefficientModel& model, double t, SegmentView xi, std::span<const double> features,
                       const TestFunction& f);
double generator_apply(const CoefficientModel& model, double t, const Segment& xi, const EmpiricalPathMeasure& mu,
                       const TestFunction& f);

}  // namespace mvlab
