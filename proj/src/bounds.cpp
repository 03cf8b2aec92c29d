#include "mvlab/bounds.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mvlab {

namespace {

constexpr double kInvPhi = 0.6180339887498949;

/// Golden-section search for the minimum of a unimodal fn on [a, b], endpoints included.
template <class Fn>
std::pair<double, double> golden_min(Fn fn, double a, double b) {
    double best_x = a, best_v = fn(a);
    const double vb = fn(b);
    if (vb < best_v) {
        best_x = b;
        best_v = vb;
    }
    if (!(b > a)) return {best_x, best_v};
    double x1 = b - kInvPhi * (b - a), x2 = a + kInvPhi * (b - a);
    double f1 = fn(x1), f2 = fn(x2);
    for (int it = 0; it < 200 && (b - a) > 1e-14 * std::max(1.0, std::abs(b)); ++it) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - kInvPhi * (b - a);
            f1 = fn(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + kInvPhi * (b - a);
            f2 = fn(x2);
        }
    }
    const double xm = f1 <= f2 ? x1 : x2;
    const double vm = std::min(f1, f2);
    if (vm < best_v) return {xm, vm};
    return {best_x, best_v};
}

}  // namespace

ContractionParams ContractionParams::from_constants(const RegularityConstants& c, double r0) {
    ContractionParams p{r0, c.kappa, c.alpha1, c.alpha2, c.beta1, c.beta2};
    p.validate();
    return p;
}

void ContractionParams::validate() const {
    if (!(r0 > 0.0) || !std::isfinite(r0)) throw std::invalid_argument("ContractionParams: r0 must be positive");
    for (double v : {kappa, alpha1, alpha2, beta1, beta2}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("ContractionParams: constants must be finite and nonnegative");
        }
    }
}

double EpsGrid::at(std::size_t k) const {
    if (points == 1) return lo;
    const double frac = static_cast<double>(k) / static_cast<double>(points - 1);
    return std::exp(std::log(lo) + frac * (std::log(hi) - std::log(lo)));
}

BoundValue contraction_bound(const ContractionParams& p, double w0_sq, double t, const EpsGrid& grid) {
    p.validate();
    if (!(t >= 0.0)) throw std::invalid_argument("contraction_bound: t must be >= 0");
    if (!(w0_sq >= 0.0)) throw std::invalid_argument("contraction_bound: w0_sq must be >= 0");
    if (grid.points < 1 || !(grid.lo > 0.0) || !(grid.hi < 1.0) || grid.lo > grid.hi) {
        throw std::invalid_argument("contraction_bound: bad epsilon grid");
    }
    double best_log = std::numeric_limits<double>::infinity();
    BoundValue out;
    for (std::size_t k = 0; k < grid.points; ++k) {
        const double eps = grid.at(k);
        const double c = t * (4.0 * (p.alpha1 + p.alpha2) / eps + p.beta1 + p.beta2) / (1.0 - eps);
        auto exponent = [&](double delta) { return (p.r0 - t) * delta + std::exp(delta * p.r0) * c; };
        const auto [delta, e] = golden_min(exponent, 0.0, p.kappa);
        const double log_factor = e - std::log1p(-eps);
        if (log_factor < best_log) {
            best_log = log_factor;
            out.eps_star = eps;
            out.delta_star = delta;
        }
    }
    out.bound = w0_sq * std::exp(best_log);
    return out;
}

ExoResult exo_criterion(const ContractionParams& p, const EpsGrid& grid) {
    p.validate();
    ExoResult r;
    r.rhs = p.kappa <= 1.0 / p.r0 ? p.kappa * std::exp(-p.kappa * p.r0) : std::exp(-1.0) / p.r0;
    r.lhs_min = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < grid.points; ++k) {
        const double eps = grid.at(k);
        const double lhs = 4.0 * (p.alpha1 + p.alpha2) / (eps * (1.0 - eps)) + (p.beta1 + p.beta2) / (1.0 - eps);
        if (lhs < r.lhs_min) {
            r.lhs_min = lhs;
            r.best_eps = eps;
        }
    }
    r.holds = r.lhs_min < r.rhs;
    const double lhs = r.lhs_min;
    auto neg_rate = [&](double delta) { return -(delta - std::exp(delta * p.r0) * lhs); };
    const auto [delta, v] = golden_min(neg_rate, 0.0, p.kappa);
    r.best_delta = delta;
    r.best_rate = -v;
    return r;
}

DiscreteMeasure::DiscreteMeasure(std::vector<double> weights) : w_(std::move(weights)) {
    if (w_.empty()) throw std::invalid_argument("DiscreteMeasure: empty alphabet");
    double s = 0.0;
    for (double v : w_) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("DiscreteMeasure: weights must be >= 0");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("DiscreteMeasure: weights must sum to 1");
}

double relative_entropy(const DiscreteMeasure& nu, const DiscreteMeasure& mu) {
    if (nu.size() != mu.size()) throw std::invalid_argument("relative_entropy: alphabets differ");
    double s = 0.0;
    for (std::size_t i = 0; i < nu.size(); ++i) {
        if (nu[i] == 0.0) continue;
        if (mu[i] == 0.0) return std::numeric_limits<double>::infinity();
        s += nu[i] * std::log(nu[i] / mu[i]);
    }
    return std::max(0.0, s);
}

PinskerResult pinsker_check(const DiscreteMeasure& nu, const DiscreteMeasure& mu) {
    if (nu.size() != mu.size()) throw std::invalid_argument("pinsker_check: alphabets differ");
    PinskerResult r;
    for (std::size_t i = 0; i < nu.size(); ++i) r.tv += std::abs(mu[i] - nu[i]);
    r.tv *= 0.5;
    r.ent = relative_entropy(nu, mu);
    r.satisfied = r.tv * r.tv <= 0.5 * r.ent + 1e-12;
    return r;
}

}  // namespace mvlab
