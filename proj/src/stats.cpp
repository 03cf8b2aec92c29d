#include "mvlab/stats.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mvlab {

Estimate mean_estimate(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("mean_estimate: no samples");
    const auto n = static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += x;
    const double mean = s / n;
    if (v.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / (n - 1.0) / n)};
}

Estimate paired_estimate(std::span<const double> x, double a, std::span<const double> y, double c) {
    if (x.size() != y.size()) throw std::invalid_argument("paired_estimate: sample sizes differ");
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = a * x[i] + c * y[i];
    return mean_estimate(z);
}

}  // namespace mvlab
