#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mvlab/pathspace.hpp"

namespace mvlab {

/**
 * @brief A real functional on path segments.
 *
 * `derivative(xi, eta)` is the directional derivative along eta; it is empty
 * for functionals that are only used in Harnack-type checks.
 */
struct PathFunctional {
    std::string name;
    std::function<double(SegmentView)> value;
    std::function<double(SegmentView xi, SegmentView eta)> derivative;
    bool positive = false;
    bool bounded = false;
};

/// f == c
PathFunctional functional_constant(double c);
/// f(xi) = <a, xi(0)>
PathFunctional functional_linear(std::vector<double> a);
/// f(xi) = exp(min(<a, xi(0)>, cap))
PathFunctional functional_exp_linear_capped(std::vector<double> a, double cap);
/// f(xi) = tanh(<a, xi(0)>)
PathFunctional functional_tanh_point(std::vector<double> a);
/// f(xi) = 2 + sin(<a, xi(0)>)
PathFunctional functional_sin_point(std::vector<double> a);
/// f(xi) = exp(-(1/(m+1)) sum_k |xi(theta_k)|^2 / (2 w^2))
PathFunctional functional_gaussian_average(double width);

/// eta == 0
CameronMartinVector eta_zero(const PathGrid& grid, int dim);
/// eta(theta) = v (theta + r0) / r0: zero at -r0, v at 0
CameronMartinVector eta_linear_ramp(const PathGrid& grid, std::vector<double> v);
/// eta == v
CameronMartinVector eta_constant(const PathGrid& grid, std::vector<double> v);
/// eta(theta) = a + b theta
CameronMartinVector eta_affine(const PathGrid& grid, std::vector<double> a, std::vector<double> b);
/// eta(theta) = v sin(omega theta)
CameronMartinVector eta_sine(const PathGrid& grid, std::vector<double> v, double omega);

}  // namespace mvlab
