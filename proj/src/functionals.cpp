#include "mvlab/functionals.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvlab {

namespace {

double dot(const std::vector<double>& a, std::span<const double> x) {
    if (a.size() != x.size()) throw std::invalid_argument("functional: coefficient vector has the wrong dimension");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * x[i];
    return s;
}

void require_finite(const std::vector<double>& v, const char* what) {
    if (v.empty()) throw std::invalid_argument(std::string(what) + ": empty vector");
    for (double x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": non-finite entry");
    }
}

}  // namespace

PathFunctional functional_constant(double c) {
    return {"constant", [c](SegmentView) { return c; }, [](SegmentView, SegmentView) { return 0.0; }, c > 0.0,
            true};
}

PathFunctional functional_linear(std::vector<double> a) {
    require_finite(a, "linear");
    return {"linear", [a](SegmentView xi) { return dot(a, xi.endpoint()); },
            [a](SegmentView, SegmentView eta) { return dot(a, eta.endpoint()); }, false, false};
}

PathFunctional functional_exp_linear_capped(std::vector<double> a, double cap) {
    require_finite(a, "exp_linear_capped");
    if (!std::isfinite(cap)) throw std::invalid_argument("exp_linear_capped: cap must be finite");
    return {"exp_linear_capped", [a, cap](SegmentView xi) { return std::exp(std::min(dot(a, xi.endpoint()), cap)); },
            [a, cap](SegmentView xi, SegmentView eta) {
                const double s = dot(a, xi.endpoint());
                return s < cap ? std::exp(s) * dot(a, eta.endpoint()) : 0.0;
            },
            true, true};
}

PathFunctional functional_tanh_point(std::vector<double> a) {
    require_finite(a, "tanh_point");
    return {"tanh_point", [a](SegmentView xi) { return std::tanh(dot(a, xi.endpoint())); },
            [a](SegmentView xi, SegmentView eta) {
                const double th = std::tanh(dot(a, xi.endpoint()));
                return (1.0 - th * th) * dot(a, eta.endpoint());
            },
            false, true};
}

PathFunctional functional_sin_point(std::vector<double> a) {
    require_finite(a, "sin_point");
    return {"sin_point", [a](SegmentView xi) { return 2.0 + std::sin(dot(a, xi.endpoint())); },
            [a](SegmentView xi, SegmentView eta) { return std::cos(dot(a, xi.endpoint())) * dot(a, eta.endpoint()); },
            true, true};
}

PathFunctional functional_gaussian_average(double width) {
    if (!(width > 0.0)) throw std::invalid_argument("gaussian_average: width must be positive");
    const double w2 = width * width;
    auto value = [w2](SegmentView xi) {
        double s = 0.0;
        for (double v : xi.data) s += v * v;
        return std::exp(-s / static_cast<double>(xi.points()) / (2.0 * w2));
    };
    auto derivative = [value, w2](SegmentView xi, SegmentView eta) {
        if (xi.data.size() != eta.data.size()) throw std::invalid_argument("gaussian_average: shape mismatch");
        double s = 0.0;
        for (std::size_t k = 0; k < xi.data.size(); ++k) s += xi.data[k] * eta.data[k];
        return -value(xi) * s / static_cast<double>(xi.points()) / w2;
    };
    return {"gaussian_average", value, derivative, true, true};
}

CameronMartinVector eta_zero(const PathGrid& grid, int dim) { return CameronMartinVector::zero(grid, dim); }

CameronMartinVector eta_linear_ramp(const PathGrid& grid, std::vector<double> v) {
    require_finite(v, "linear_ramp");
    const double r0 = grid.r0();
    return CameronMartinVector::from_function(grid, static_cast<int>(v.size()), [&](double th, std::span<double> out) {
        for (std::size_t c = 0; c < v.size(); ++c) out[c] = v[c] * (th + r0) / r0;
    });
}

CameronMartinVector eta_constant(const PathGrid& grid, std::vector<double> v) {
    require_finite(v, "constant");
    return CameronMartinVector::from_function(grid, static_cast<int>(v.size()), [&](double, std::span<double> out) {
        std::copy(v.begin(), v.end(), out.begin());
    });
}

CameronMartinVector eta_affine(const PathGrid& grid, std::vector<double> a, std::vector<double> b) {
    require_finite(a, "affine");
    require_finite(b, "affine");
    if (a.size() != b.size()) throw std::invalid_argument("affine: a and b differ in dimension");
    return CameronMartinVector::from_function(grid, static_cast<int>(a.size()), [&](double th, std::span<double> out) {
        for (std::size_t c = 0; c < a.size(); ++c) out[c] = a[c] + b[c] * th;
    });
}

CameronMartinVector eta_sine(const PathGrid& grid, std::vector<double> v, double omega) {
    require_finite(v, "sine");
    if (!std::isfinite(omega)) throw std::invalid_argument("sine: omega must be finite");
    return CameronMartinVector::from_function(grid, static_cast<int>(v.size()), [&](double th, std::span<double> out) {
        for (std::size_t c = 0; c < v.size(); ++c) out[c] = v[c] * std::sin(omega * th);
    });
}

}  // namespace mvlab
