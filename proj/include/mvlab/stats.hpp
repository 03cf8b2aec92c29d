#pragma once

#include <cstddef>
#include <span>

namespace mvlab {

/// Sample mean with its standard error (sample standard deviation / sqrt(n)).
struct Estimate {
    double mean = 0.0;
    double std_error = 0.0;
};

/// Sums in index order, so the result depends only on the values.
Estimate mean_estimate(std::span<const double> v);

/// Mean and standard error of a*x_i + c*y_i for paired samples.
Estimate paired_estimate(std::span<const double> x, double a, std::span<const double> y, double c);

}  // namespace mvlab
