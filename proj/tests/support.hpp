#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "mvlab/measure.hpp"
#include "mvlab/models.hpp"
#include "mvlab/pathspace.hpp"

namespace testing {

/// Random empirical measure with N(0, scale^2) entries.
inline mvlab::EmpiricalPathMeasure random_measure(std::mt19937_64& gen, const mvlab::PathGrid& grid, int dim,
                                                  std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<double> flat(n * grid.points() * static_cast<std::size_t>(dim));
    for (double& v : flat) v = nd(gen);
    return mvlab::EmpiricalPathMeasure(grid, dim, std::move(flat));
}

inline mvlab::Segment random_segment(std::mt19937_64& gen, const mvlab::PathGrid& grid, int dim, double scale = 1.0) {
    std::normal_distribution<double> nd(0.0, scale);
    std::vector<double> v(grid.points() * static_cast<std::size_t>(dim));
    for (double& x : v) x = nd(gen);
    return mvlab::Segment(grid, dim, std::move(v));
}

inline mvlab::Matrix matrix1(double a) {
    mvlab::Matrix m(1, 1);
    m(0, 0) = a;
    return m;
}

/// Scalar linear model b = a0 x(0) + a1 x(-r0) + b E x(0), sigma = s.
inline mvlab::CoefficientModel scalar_linear(double a0, double a1, double b, double s, double r0) {
    return mvlab::make_linear_meanfield_delay(1, matrix1(a0), matrix1(a1), matrix1(b), matrix1(s), r0);
}

}  // namespace testing
