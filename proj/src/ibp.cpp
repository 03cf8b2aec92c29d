#include "mvlab/ibp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"

namespace mvlab {

std::span<const double> ShiftPlan::phi_at(std::size_t k) const {
    if (k >= steps) throw std::out_of_range("ShiftPlan: step out of range");
    const auto d = static_cast<std::size_t>(dim);
    return std::span<const double>(phi).subspan(k * d, d);
}

SegmentView ShiftPlan::theta_segment(std::size_t k) const {
    if (k > steps) throw std::out_of_range("ShiftPlan: step out of range");
    const auto d = static_cast<std::size_t>(dim);
    return {std::span<const double>(theta).subspan(k * d, grid.points() * d), dim};
}

ShiftPlan build_shift_plan(const CameronMartinVector& eta, double T, const PathGrid& grid) {
    if (!(eta.grid() == grid)) throw std::invalid_argument("build_shift_plan: eta lives on a different grid");
    if (!(T > grid.r0())) throw std::invalid_argument("build_shift_plan: T must exceed r0");
    const double h = grid.dt();
    const std::size_t steps = grid_index(T, 0.0, h);
    const auto m = static_cast<std::size_t>(grid.m());
    const std::size_t merge = steps - m;
    const double tau = static_cast<double>(merge) * h;
    const auto d = static_cast<std::size_t>(eta.dim());

    ShiftPlan plan;
    plan.grid = grid;
    plan.dim = eta.dim();
    plan.T = T;
    plan.steps = steps;
    plan.phi.assign(steps * d, 0.0);
    plan.theta.assign((m + 1 + steps) * d, 0.0);
    const auto start = eta.value(0);
    for (std::size_t k = 0; k < steps; ++k) {
        for (std::size_t c = 0; c < d; ++c) {
            plan.phi[k * d + c] = k < merge ? start[c] / tau : eta.slope(k - merge)[c];
        }
    }
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t j = m + k;
        for (std::size_t c = 0; c < d; ++c) plan.theta[(j + 1) * d + c] = plan.theta[j * d + c] + plan.phi[k * d + c] * h;
    }
    for (double v : start) plan.eta_start_sq += v * v;
    plan.eta_h1_sq = h1_norm_sq(eta);
    return plan;
}

double shift_constant(const RegularityConstants& c, const ShiftPlan& plan) {
    const double lambda_sq = c.lambda * c.lambda;
    const double k = c.kappa2 * c.kappa2;
    return lambda_sq * (1.0 + plan.T * plan.T * k) * plan.energy();
}

namespace {

struct WeightStep {
    const CoefficientModel* model;
    const ShiftPlan* plan;
    double t, h, sqrt_h;
    std::span<const double> features;
    const double* sigma;
    const double* sigma_inv;
    std::uint64_t key, step;
};

void apply(const double* a, std::size_t d, const double* x, double* out) {
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a[i * d + j] * x[j];
        out[i] = s;
    }
}

/// One Euler step of x_next from the segment xi; returns the weight increment.
double weighted_step(const WeightStep& s, SegmentView xi, std::uint64_t stream, double* x_next) {
    const auto d = static_cast<std::size_t>(xi.dim);
    double b[kMaxDim], grad[kMaxDim], z[kMaxDim], dw[kMaxDim], diff[kMaxDim], integrand[kMaxDim], noise[kMaxDim];
    s.model->drift(s.t, xi, s.features, std::span<double>(b, d));
    s.model->directional_drift(s.t, xi, s.plan->theta_segment(s.step), s.features, std::span<double>(grad, d));
    rng::gaussians(s.key, s.step, stream, std::span<double>(z, d));
    for (std::size_t c = 0; c < d; ++c) dw[c] = s.sqrt_h * z[c];
    const auto phi = s.plan->phi_at(s.step);
    for (std::size_t c = 0; c < d; ++c) diff[c] = phi[c] - grad[c];
    apply(s.sigma_inv, d, diff, integrand);
    double inc = 0.0;
    for (std::size_t c = 0; c < d; ++c) inc += integrand[c] * dw[c];
    apply(s.sigma, d, dw, noise);
    const auto x = xi.endpoint();
    for (std::size_t c = 0; c < d; ++c) x_next[c] = x[c] + b[c] * s.h + noise[c];
    return inc;
}

struct Coefficients {
    std::vector<double> sigma, sigma_inv;
};

Coefficients coefficients_at(const CoefficientModel& model, double t) {
    const auto d = static_cast<std::size_t>(model.dim());
    const double zero[kMaxDim] = {};
    const std::span<const double> x(zero, d);
    Coefficients c{std::vector<double>(d * d), std::vector<double>(d * d)};
    model.diffusion(t, x, c.sigma);
    const Matrix inv = model.diffusion_inverse(t, x);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            c.sigma_inv[i * d + j] = inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
    }
    return c;
}

void check_inputs(const CoefficientModel& model, const MeasureFlow& flow, const ShiftPlan& plan) {
    if (model.diffusion_kind() != DiffusionKind::additive) {
        throw std::invalid_argument("integration by parts requires additive noise");
    }
    model.check_grid(flow.grid);
    if (!(flow.grid == plan.grid) || flow.dim != model.dim() || plan.dim != model.dim()) {
        throw std::invalid_argument("integration by parts: flow, plan and model do not match");
    }
    if (flow.feature_count != model.feature_count()) throw std::invalid_argument("flow does not belong to the model");
    if (flow.steps < plan.steps) throw std::invalid_argument("integration by parts: flow does not reach T");
}

}  // namespace

WeightedSamples simulate_weighted(const CoefficientModel& model, const MeasureFlow& flow, const ShiftPlan& plan,
                                  const EmpiricalPathMeasure& init, std::uint64_t noise_key,
                                  std::uint64_t index_offset, bool parallel, bool keep_paths) {
    check_inputs(model, flow, plan);
    if (!(init.grid() == plan.grid) || init.dim() != model.dim()) {
        throw std::invalid_argument("simulate_weighted: initial law does not match the plan");
    }
    const auto m = static_cast<std::size_t>(plan.grid.m());
    const std::size_t n = init.size();
    const std::size_t total = m + 1 + plan.steps;
    PathStore store(init, keep_paths ? total : std::min(total, 2 * (m + 1)));
    std::vector<double> weight(n, 0.0);
    const double h = plan.grid.dt();
    const auto d = static_cast<std::size_t>(model.dim());

    for (std::size_t k = 0; k < plan.steps; ++k) {
        const double t = static_cast<double>(k) * h;
        const Coefficients co = coefficients_at(model, t);
        const WeightStep ws{&model, &plan, t, h, std::sqrt(h), flow.features_at(k), co.sigma.data(),
                            co.sigma_inv.data(), noise_key, k};
        store.reserve_next();
        const std::size_t pos = store.position();
        auto body = [&](std::size_t i) {
            const SegmentView xi{std::span<const double>(store.point(i, pos - m), (m + 1) * d), model.dim()};
            weight[i] += weighted_step(ws, xi, index_offset + i, store.point(i, pos + 1));
        };
        if (parallel) {
            const auto sn = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t i = 0; i < sn; ++i) body(static_cast<std::size_t>(i));
        } else {
            for (std::size_t i = 0; i < n; ++i) body(i);
        }
        store.commit();
        for (std::size_t i = 0; i < n; ++i) {
            const double* x = store.point(i, pos + 1);
            bool finite = std::isfinite(weight[i]);
            for (std::size_t c = 0; c < d; ++c) finite = finite && std::isfinite(x[c]);
            if (!finite) throw SimulationAbort(k, index_offset + i);
        }
    }
    WeightedSamples out{EmpiricalPathMeasure::from_batch(plan.grid, store.current()), std::move(weight), {}};
    if (keep_paths) out.paths = store.release();
    return out;
}

double malliavin_weight(const CoefficientModel& model, const MeasureFlow& flow, const ShiftPlan& plan,
                        const Trajectory& path, std::uint64_t noise_key, std::uint64_t stream_index) {
    check_inputs(model, flow, plan);
    if (!(path.grid() == plan.grid) || path.dim() != model.dim()) {
        throw std::invalid_argument("malliavin_weight: path does not match the plan");
    }
    const auto m = static_cast<std::size_t>(plan.grid.m());
    if (path.size() < m + 1 + plan.steps || std::abs(path.t0()) > 1e-12) {
        throw std::invalid_argument("malliavin_weight: path must start at t = 0 and reach T");
    }
    const auto d = static_cast<std::size_t>(model.dim());
    const double h = plan.grid.dt();
    std::vector<double> seg((m + 1) * d);
    double next[kMaxDim];
    double weight = 0.0;
    for (std::size_t k = 0; k < plan.steps; ++k) {
        const double t = static_cast<double>(k) * h;
        const Coefficients co = coefficients_at(model, t);
        const WeightStep ws{&model, &plan, t, h, std::sqrt(h), flow.features_at(k), co.sigma.data(),
                            co.sigma_inv.data(), noise_key, k};
        for (std::size_t j = 0; j <= m; ++j) {
            const auto p = path.point(k + j);
            std::copy(p.begin(), p.end(), seg.begin() + static_cast<std::ptrdiff_t>(j * d));
        }
        weight += weighted_step(ws, SegmentView{seg, model.dim()}, stream_index, next);
    }
    return weight;
}

namespace {

MeasureFlow flow_from(const CoefficientModel& model, const InitialLaw& mu0, const IbpConfig& config) {
    SimConfig sc;
    sc.n_particles = config.n_flow;
    sc.T = config.T;
    sc.grid = config.grid;
    sc.seed = config.seed;
    SimOptions opt;
    opt.record = true;
    opt.parallel = config.parallel;
    opt.noise_label = "flow_noise";
    const std::uint64_t init_key = rng::derive_key(config.seed, "init_flow");
    return std::move(*simulate_mckean(model, mu0.sample(config.grid, config.n_flow, init_key), sc, opt).flow);
}

/// Calls visit(x_final, weights) batch by batch.
template <class Visit>
void for_each_batch(const CoefficientModel& model, const InitialLaw& mu0, const ShiftPlan& plan,
                    const IbpConfig& config, Visit visit) {
    if (config.n_samples < 2) throw std::invalid_argument("integration by parts needs at least 2 samples");
    if (config.batch < 1) throw std::invalid_argument("batch must be >= 1");
    const MeasureFlow flow = flow_from(model, mu0, config);
    const std::uint64_t init_key = rng::derive_key(config.seed, "ibp_init");
    const std::uint64_t noise_key = rng::derive_key(config.seed, "ibp");
    for (std::size_t off = 0; off < config.n_samples; off += config.batch) {
        const std::size_t cnt = std::min(config.batch, config.n_samples - off);
        const auto ws = simulate_weighted(model, flow, plan, mu0.sample(config.grid, cnt, init_key, off), noise_key,
                                          off, config.parallel);
        visit(ws.x_final, ws.weight);
    }
}

}  // namespace

IbpReport ibp_check(const CoefficientModel& model, const InitialLaw& mu0, const CameronMartinVector& eta,
                    const PathFunctional& f, const IbpConfig& config) {
    if (!f.derivative) throw std::invalid_argument("ibp_check: functional has no directional derivative");
    const ShiftPlan plan = build_shift_plan(eta, config.T, config.grid);
    std::vector<double> grad, fm, diff, w, w2;
    for_each_batch(model, mu0, plan, config, [&](const EmpiricalPathMeasure& x, const std::vector<double>& m) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const SegmentView xi = x.particle(i);
            const double g = f.derivative(xi, eta.view());
            const double v = f.value(xi) * m[i];
            grad.push_back(g);
            fm.push_back(v);
            diff.push_back(g - v);
            w.push_back(m[i]);
            w2.push_back(m[i] * m[i]);
        }
    });
    const Estimate l = mean_estimate(grad), r = mean_estimate(fm), dd = mean_estimate(diff), we = mean_estimate(w),
                   wq = mean_estimate(w2);
    IbpReport rep;
    rep.T = config.T;
    rep.h = config.grid.dt();
    rep.lhs = l.mean;
    rep.rhs = r.mean;
    rep.lhs_se = l.std_error;
    rep.rhs_se = r.std_error;
    rep.diff_se = dd.std_error;
    rep.weight_mean = we.mean;
    rep.weight_se = we.std_error;
    rep.weight_sq_mean = wq.mean;
    rep.weight_sq_se = wq.std_error;
    rep.n_samples = grad.size();
    return rep;
}

RefinementResult refinement_check(double r_h, double se_h, double r_h2, double se_h2, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("refinement_check: h must be positive");
    RefinementResult r{r_h, r_h2, se_h, se_h2, h, 2.0 * std::abs(r_h - r_h2) / h, false};
    r.passed = std::abs(r_h) <= std::max(3.0 * se_h, r.C * h) && std::abs(r_h2) <= std::max(3.0 * se_h2, r.C * h / 2.0);
    return r;
}

ShiftHarnackReport shift_harnack_check(const CoefficientModel& model, const InitialLaw& mu0,
                                       const CameronMartinVector& eta, const PathFunctional& f, double p,
                                       const IbpConfig& config) {
    const bool log_variant = p == 0.0;
    if (!log_variant && !(p > 1.0)) throw std::invalid_argument("shift Harnack check requires p > 1");
    const ShiftPlan plan = build_shift_plan(eta, config.T, config.grid);
    const double c = shift_constant(model.constants(), plan);
    const auto d = static_cast<std::size_t>(model.dim());
    std::vector<double> base, shifted;
    std::vector<double> buf(config.grid.points() * d);
    const auto ev = eta.values();
    for_each_batch(model, mu0, plan, config, [&](const EmpiricalPathMeasure& x, const std::vector<double>&) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const SegmentView xi = x.particle(i);
            for (std::size_t k = 0; k < buf.size(); ++k) buf[k] = xi.data[k] + ev[k];
            const double f0 = f.value(xi), f1 = f.value(SegmentView{buf, model.dim()});
            if (!std::isfinite(f0) || !std::isfinite(f1) || f0 < 0.0 || f1 < 0.0 ||
                (log_variant && (f0 <= 0.0 || f1 <= 0.0))) {
                throw std::invalid_argument("shift Harnack check: f must be finite and nonnegative (positive for log)");
            }
            base.push_back(f0);
            shifted.push_back(f1);
        }
    });
    const std::size_t n = base.size();
    ShiftHarnackReport r;
    r.T = config.T;
    r.p = p;
    r.n_samples = n;
    std::vector<double> lin(n);
    if (log_variant) {
        std::vector<double> logf(n);
        for (std::size_t i = 0; i < n; ++i) logf[i] = std::log(base[i]);
        const Estimate a = mean_estimate(logf), b = mean_estimate(shifted);
        r.factor = c;
        r.lhs = a.mean;
        r.rhs = std::log(b.mean) + c;
        for (std::size_t i = 0; i < n; ++i) lin[i] = shifted[i] / b.mean - logf[i];
    } else {
        std::vector<double> fp(n);
        for (std::size_t i = 0; i < n; ++i) fp[i] = std::pow(shifted[i], p);
        const Estimate a = mean_estimate(base), b = mean_estimate(fp);
        r.factor = std::exp(p * c / ((p - 1.0) * (p - 1.0)));
        r.lhs = std::pow(a.mean, p);
        r.rhs = b.mean * r.factor;
        const double da = -p * std::pow(a.mean, p - 1.0);
        for (std::size_t i = 0; i < n; ++i) lin[i] = da * base[i] + r.factor * fp[i];
    }
    r.margin = r.rhs - r.lhs;
    r.std_error = mean_estimate(lin).std_error;
    return r;
}

DensityBoundReport density_bound_check(const CoefficientModel& model, const InitialLaw& mu0,
                                       const CameronMartinVector& eta, const IbpConfig& config,
                                       const std::vector<std::size_t>& bins) {
    const ShiftPlan plan = build_shift_plan(eta, config.T, config.grid);
    std::vector<double> coord, weight;
    for_each_batch(model, mu0, plan, config, [&](const EmpiricalPathMeasure& x, const std::vector<double>& m) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            coord.push_back(x.particle(i).endpoint()[0]);
            weight.push_back(m[i]);
        }
    });
    const std::size_t n = weight.size();
    DensityBoundReport rep;
    rep.bound = shift_constant(model.constants(), plan);
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = weight[i] * weight[i];
    const Estimate wq = mean_estimate(sq);
    rep.weight_sq_mean = wq.mean;
    rep.weight_sq_se = wq.std_error;
    const auto [lo_it, hi_it] = std::minmax_element(coord.begin(), coord.end());
    const double lo = *lo_it, hi = *hi_it;
    for (std::size_t nb : bins) {
        if (nb < 1) throw std::invalid_argument("density_bound_check: bin count must be >= 1");
        const double width = hi > lo ? (hi - lo) / static_cast<double>(nb) : 1.0;
        std::vector<std::size_t> idx(n);
        std::vector<double> sum(nb, 0.0);
        std::vector<std::size_t> count(nb, 0);
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = std::min(nb - 1, static_cast<std::size_t>((coord[i] - lo) / width));
            sum[idx[i]] += weight[i];
            ++count[idx[i]];
        }
        std::vector<double> q(n);
        for (std::size_t i = 0; i < n; ++i) q[i] = sum[idx[i]] / static_cast<double>(count[idx[i]]) * weight[i];
        const Estimate g = mean_estimate(q);
        rep.bins.push_back(nb);
        rep.g_sq.push_back(g.mean);
        rep.g_sq_se.push_back(g.std_error);
    }
    return rep;
}

}  // namespace mvlab
