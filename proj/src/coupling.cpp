#include "mvlab/coupling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"
#include "mvlab/transport.hpp"

namespace mvlab {

namespace {

std::vector<double> row_major_inverse(const CoefficientModel& model, double t) {
    const auto d = static_cast<std::size_t>(model.dim());
    const double zero[kMaxDim] = {};
    const Matrix inv = model.diffusion_inverse(t, std::span<const double>(zero, d));
    std::vector<double> out(d * d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
    return out;
}

void apply(const double* a, std::size_t d, const double* x, double* out) {
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a[i * d + j] * x[j];
        out[i] = s;
    }
}

struct StepShared {
    const CoefficientModel* model;
    double t, h, sqrt_h, tau;
    bool before_merge;
    bool last_before_merge;
    std::span<const double> mu_features, nu_features;
    const double* sigma;
    const double* sigma_inv;
    std::uint64_t key, step, index_offset;
};

/// Advances sample j of the coupled pair by one step; returns |gamma_bar|.
double couple_step(PathStore& xs, PathStore& ys, std::size_t j, const StepShared& s, double& log_weight,
                   double& action, double* gbar_out, double* gtil_out) {
    const CoefficientModel& model = *s.model;
    const auto d = static_cast<std::size_t>(model.dim());
    const auto m = static_cast<std::size_t>(xs.grid().m());
    const std::size_t pos = xs.position();
    const SegmentView xv{std::span<const double>(xs.point(j, pos - m), (m + 1) * d), model.dim()};
    const SegmentView yv{std::span<const double>(ys.point(j, pos - m), (m + 1) * d), model.dim()};
    const double* x = xs.point(j, pos);
    const double* y = ys.point(j, pos);

    double bx_mu[kMaxDim], bx_nu[kMaxDim], by_nu[kMaxDim], z[kMaxDim], dw[kMaxDim];
    model.drift(s.t, xv, s.mu_features, std::span<double>(bx_mu, d));
    model.drift(s.t, xv, s.nu_features, std::span<double>(bx_nu, d));
    model.drift(s.t, yv, s.nu_features, std::span<double>(by_nu, d));
    rng::gaussians(s.key, s.step, s.index_offset + j, std::span<double>(z, d));
    for (std::size_t c = 0; c < d; ++c) dw[c] = s.sqrt_h * z[c];

    double diff_bar[kMaxDim], diff_til[kMaxDim], gbar[kMaxDim], gtil[kMaxDim];
    for (std::size_t c = 0; c < d; ++c) {
        diff_bar[c] = bx_mu[c] - bx_nu[c];
        diff_til[c] = bx_nu[c] - by_nu[c];
        if (s.before_merge) diff_til[c] += (x[c] - y[c]) / (s.tau - s.t);
    }
    apply(s.sigma_inv, d, diff_bar, gbar);
    apply(s.sigma_inv, d, diff_til, gtil);

    double u[kMaxDim], u_sq = 0.0, u_dw = 0.0, gbar_sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        u[c] = gbar[c] + gtil[c];
        u_sq += u[c] * u[c];
        u_dw += u[c] * dw[c];
        gbar_sq += gbar[c] * gbar[c];
    }
    log_weight += -u_dw - 0.5 * u_sq * s.h;
    action += u_sq * s.h;
    if (gbar_out != nullptr) {
        std::copy_n(gbar, d, gbar_out);
        std::copy_n(gtil, d, gtil_out);
    }

    double noise[kMaxDim], shifted[kMaxDim], sig_shift[kMaxDim];
    apply(s.sigma, d, dw, noise);
    double* xn = xs.point(j, pos + 1);
    double* yn = ys.point(j, pos + 1);
    for (std::size_t c = 0; c < d; ++c) xn[c] = x[c] + bx_mu[c] * s.h + noise[c];
    if (!s.before_merge || s.last_before_merge) {
        std::copy_n(xn, d, yn);
    } else {
        for (std::size_t c = 0; c < d; ++c) shifted[c] = dw[c] + u[c] * s.h;
        apply(s.sigma, d, shifted, sig_shift);
        for (std::size_t c = 0; c < d; ++c) yn[c] = y[c] + by_nu[c] * s.h + sig_shift[c];
    }
    for (std::size_t c = 0; c < d; ++c) {
        if (!std::isfinite(xn[c]) || !std::isfinite(yn[c])) log_weight = std::numeric_limits<double>::quiet_NaN();
    }
    return std::sqrt(gbar_sq);
}

void check_flow(const CoefficientModel& model, const MeasureFlow& flow, std::size_t steps) {
    model.check_grid(flow.grid);
    if (flow.dim != model.dim() || flow.feature_count != model.feature_count()) {
        throw std::invalid_argument("coupling: flow does not belong to the model");
    }
    if (flow.steps < steps) throw std::invalid_argument("coupling: flow does not reach T");
}

}  // namespace

std::vector<double> gamma_bar(const CoefficientModel& model, double t, SegmentView xi,
                              std::span<const double> mu_features, std::span<const double> nu_features) {
    const auto d = static_cast<std::size_t>(model.dim());
    if (xi.dim != model.dim()) throw std::invalid_argument("gamma_bar: dimension mismatch");
    std::vector<double> bm(d), bn(d), diff(d), out(d);
    model.drift(t, xi, mu_features, bm);
    model.drift(t, xi, nu_features, bn);
    for (std::size_t c = 0; c < d; ++c) diff[c] = bm[c] - bn[c];
    const Matrix inv = model.diffusion_inverse(t, xi.endpoint());
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * diff[j];
        out[i] = s;
    }
    return out;
}

std::vector<double> gamma_bar(const CoefficientModel& model, double t, const Segment& xi,
                              const EmpiricalPathMeasure& mu, const EmpiricalPathMeasure& nu) {
    return gamma_bar(model, t, xi.view(), model.features(mu), model.features(nu));
}

CouplingEnsemble coupled_simulate(const CoefficientModel& model, const MeasureFlow& mu_flow,
                                  const MeasureFlow& nu_flow, const EmpiricalPathMeasure& x0,
                                  const EmpiricalPathMeasure& y0, const CouplingConfig& config) {
    if (model.diffusion_kind() != DiffusionKind::additive) {
        throw std::invalid_argument("coupling requires additive noise");
    }
    const PathGrid& grid = mu_flow.grid;
    if (!(nu_flow.grid == grid) || !(x0.grid() == grid) || !(y0.grid() == grid)) {
        throw std::invalid_argument("coupling: grids differ");
    }
    if (x0.size() != y0.size()) throw std::invalid_argument("coupling: X0 and Y0 sample counts differ");
    if (x0.dim() != model.dim() || y0.dim() != model.dim()) throw std::invalid_argument("coupling: dimension mismatch");
    if (!(config.T > grid.r0())) throw std::invalid_argument("coupling: T must exceed r0");
    const double h = grid.dt();
    const std::size_t steps = grid_index(config.T, 0.0, h);
    const auto m = static_cast<std::size_t>(grid.m());
    const std::size_t merge = steps - m;
    check_flow(model, mu_flow, steps);
    check_flow(model, nu_flow, steps);

    const std::size_t n = x0.size();
    const auto d = static_cast<std::size_t>(model.dim());
    PathStore xs(x0, 2 * (m + 1)), ys(y0, 2 * (m + 1));
    CouplingEnsemble out;
    out.n = n;
    out.merge_time = static_cast<double>(merge) * h;
    out.log_weight.assign(n, 0.0);
    out.action.assign(n, 0.0);
    const std::size_t traced = std::min(config.trace_count, n);
    out.traces.resize(traced);
    for (auto& tr : out.traces) {
        tr.gamma_bar.assign(steps * d, 0.0);
        tr.gamma_tilde.assign(steps * d, 0.0);
        tr.log_weight.assign(steps + 1, 0.0);
    }
    const std::uint64_t key = rng::derive_key(config.seed, "coupling");
    const RegularityConstants& rc = model.constants();
    std::vector<double> gbar_norm(n);

    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * h;
        const double zero[kMaxDim] = {};
        std::vector<double> sigma(d * d);
        model.diffusion(t, std::span<const double>(zero, d), sigma);
        const std::vector<double> sigma_inv = row_major_inverse(model, t);
        const StepShared shared{&model,
                                t,
                                h,
                                std::sqrt(h),
                                out.merge_time,
                                k < merge,
                                k + 1 == merge,
                                mu_flow.features_at(k),
                                nu_flow.features_at(k),
                                sigma.data(),
                                sigma_inv.data(),
                                key,
                                k,
                                config.index_offset};
        xs.reserve_next();
        ys.reserve_next();
        auto body = [&](std::size_t j) {
            double* gb = j < traced ? out.traces[j].gamma_bar.data() + k * d : nullptr;
            double* gt = j < traced ? out.traces[j].gamma_tilde.data() + k * d : nullptr;
            gbar_norm[j] = couple_step(xs, ys, j, shared, out.log_weight[j], out.action[j], gb, gt);
            if (j < traced) out.traces[j].log_weight[k + 1] = out.log_weight[j];
        };
        if (config.parallel) {
            const auto sn = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t j = 0; j < sn; ++j) body(static_cast<std::size_t>(j));
        } else {
            for (std::size_t j = 0; j < n; ++j) body(j);
        }
        xs.commit();
        ys.commit();
        for (std::size_t j = 0; j < n; ++j) {
            if (!std::isfinite(out.log_weight[j])) throw SimulationAbort(k, config.index_offset + j);
        }
        if (config.certificate_stride > 0 && k % config.certificate_stride == 0) {
            const double w2 = w2_auto(mu_flow.segments(k), nu_flow.segments(k)).w2;
            const double bound = rc.lambda * rc.kappa2 * w2;
            for (std::size_t j = 0; j < n; ++j) {
                const double ratio = bound > 0.0 ? gbar_norm[j] / bound
                                                 : (gbar_norm[j] > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
                out.max_certificate_ratio = std::max(out.max_certificate_ratio, ratio);
            }
        }
    }
    out.x_final = EmpiricalPathMeasure::from_batch(grid, xs.current());
    const SegmentBatch xb = xs.current(), yb = ys.current();
    for (std::size_t j = 0; j < n; ++j) {
        out.max_merge_gap = std::max(out.max_merge_gap, std::sqrt(sup_distance_sq(xb[j], yb[j])));
    }
    return out;
}

FlowPair simulate_flow_pair(const CoefficientModel& model, const InitialLaw& mu0, const InitialLaw& nu0,
                            const HarnackConfig& config) {
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
    auto mu = simulate_mckean(model, mu0.sample(config.grid, config.n_flow, init_key), sc, opt);
    auto nu = simulate_mckean(model, nu0.sample(config.grid, config.n_flow, init_key), sc, opt);
    return {std::move(*mu.flow), std::move(*nu.flow)};
}

namespace {

struct CoupledSamples {
    std::vector<double> log_weight, action, f_values;
    double max_merge_gap = 0.0;
    double max_certificate_ratio = 0.0;
};

CoupledSamples run_coupled_batches(const CoefficientModel& model, const FlowPair& flows, const InitialLaw& mu0,
                                   const InitialLaw& nu0, const PathFunctional& f, const HarnackConfig& config) {
    if (config.n_samples < 2) throw std::invalid_argument("Harnack check needs at least 2 samples");
    if (config.batch < 1) throw std::invalid_argument("batch must be >= 1");
    const std::uint64_t init_key = rng::derive_key(config.seed, "coupling_init");
    CoupledSamples s;
    for (std::size_t off = 0; off < config.n_samples; off += config.batch) {
        const std::size_t cnt = std::min(config.batch, config.n_samples - off);
        CouplingConfig cc;
        cc.T = config.T;
        cc.seed = config.seed;
        cc.parallel = config.parallel;
        cc.index_offset = off;
        cc.certificate_stride = off == 0 ? config.certificate_stride : 0;
        const auto ens = coupled_simulate(model, flows.mu, flows.nu, mu0.sample(config.grid, cnt, init_key, off),
                                          nu0.sample(config.grid, cnt, init_key, off), cc);
        s.log_weight.insert(s.log_weight.end(), ens.log_weight.begin(), ens.log_weight.end());
        s.action.insert(s.action.end(), ens.action.begin(), ens.action.end());
        for (std::size_t j = 0; j < cnt; ++j) s.f_values.push_back(f.value(ens.x_final.particle(j)));
        s.max_merge_gap = std::max(s.max_merge_gap, ens.max_merge_gap);
        s.max_certificate_ratio = std::max(s.max_certificate_ratio, ens.max_certificate_ratio);
    }
    return s;
}

std::vector<double> reference_values(const CoefficientModel& model, const FlowPair& flows, const InitialLaw& mu0,
                                     const PathFunctional& f, const HarnackConfig& config) {
    const std::uint64_t init_key = rng::derive_key(config.seed, "reference_init");
    const std::uint64_t noise_key = rng::derive_key(config.seed, "reference");
    const std::size_t steps = grid_index(config.T, 0.0, config.grid.dt());
    std::vector<double> vals;
    vals.reserve(config.n_samples);
    for (std::size_t off = 0; off < config.n_samples; off += config.batch) {
        const std::size_t cnt = std::min(config.batch, config.n_samples - off);
        const auto xt = simulate_frozen(model, flows.mu, mu0.sample(config.grid, cnt, init_key, off), steps,
                                        noise_key, config.parallel, off);
        for (std::size_t j = 0; j < cnt; ++j) vals.push_back(f.value(xt.particle(j)));
    }
    return vals;
}

void require_positive(const std::vector<double>& v) {
    for (double x : v) {
        if (!(x > 0.0) || !std::isfinite(x)) throw std::invalid_argument("Harnack check: f must be positive and finite");
    }
}

}  // namespace

HarnackReport log_harnack_check(const CoefficientModel& model, const InitialLaw& mu0, const InitialLaw& nu0,
                                const PathFunctional& f, const HarnackConfig& config) {
    const FlowPair flows = simulate_flow_pair(model, mu0, nu0, config);
    const CoupledSamples s = run_coupled_batches(model, flows, mu0, nu0, f, config);
    require_positive(s.f_values);
    const std::vector<double> ref = reference_values(model, flows, mu0, f, config);
    require_positive(ref);

    const std::size_t n = s.log_weight.size();
    std::vector<double> weight(n), wlogf(n), went(n), q(n);
    for (std::size_t j = 0; j < n; ++j) {
        weight[j] = std::exp(s.log_weight[j]);
        wlogf[j] = weight[j] * std::log(s.f_values[j]);
        went[j] = 0.5 * weight[j] * s.action[j];
        q[j] = went[j] - wlogf[j];
    }
    const Estimate lhs = mean_estimate(wlogf), ent = mean_estimate(went), w = mean_estimate(weight),
                   qe = mean_estimate(q), fr = mean_estimate(ref);
    HarnackReport r;
    r.T = config.T;
    r.p = 0.0;
    r.lhs = lhs.mean;
    r.lhs_se = lhs.std_error;
    r.entropy_term = ent.mean;
    r.entropy_se = ent.std_error;
    r.rhs_se = fr.std_error / fr.mean;
    r.rhs = std::log(fr.mean) + ent.mean;
    r.margin = r.rhs - r.lhs;
    r.std_error = std::sqrt(qe.std_error * qe.std_error + r.rhs_se * r.rhs_se);
    r.weight_mean = w.mean;
    r.weight_se = w.std_error;
    r.max_merge_gap = s.max_merge_gap;
    r.max_certificate_ratio = s.max_certificate_ratio;
    r.n_samples = n;
    return r;
}

HarnackReport power_harnack_check(const CoefficientModel& model, const InitialLaw& mu0, const InitialLaw& nu0,
                                  const PathFunctional& f, double p, const HarnackConfig& config) {
    if (!(p > 1.0)) throw std::invalid_argument("power Harnack check requires p > 1");
    const FlowPair flows = simulate_flow_pair(model, mu0, nu0, config);
    const CoupledSamples s = run_coupled_batches(model, flows, mu0, nu0, f, config);
    for (double v : s.f_values) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("power Harnack check: f must be >= 0");
    }
    const double q = p / (p - 1.0);
    const std::size_t n = s.log_weight.size();
    std::vector<double> weight(n), wf(n), wq(n), fp(n);
    for (std::size_t j = 0; j < n; ++j) {
        weight[j] = std::exp(s.log_weight[j]);
        wf[j] = weight[j] * s.f_values[j];
        wq[j] = std::exp(q * s.log_weight[j]);
        fp[j] = std::pow(s.f_values[j], p);
    }
    const Estimate a = mean_estimate(wf), b = mean_estimate(wq), c = mean_estimate(fp), w = mean_estimate(weight);
    HarnackReport r;
    r.T = config.T;
    r.p = p;
    r.lhs = std::pow(a.mean, p);
    r.rhs = std::pow(b.mean, p - 1.0) * c.mean;
    r.margin = r.rhs - r.lhs;
    const double da = -p * std::pow(a.mean, p - 1.0);
    const double db = (p - 1.0) * std::pow(b.mean, p - 2.0) * c.mean;
    const double dc = std::pow(b.mean, p - 1.0);
    std::vector<double> lin(n);
    for (std::size_t j = 0; j < n; ++j) lin[j] = da * wf[j] + db * wq[j] + dc * fp[j];
    r.std_error = mean_estimate(lin).std_error;
    r.lhs_se = std::abs(da) * a.std_error;
    r.rhs_se = std::sqrt(db * db * b.std_error * b.std_error + dc * dc * c.std_error * c.std_error);
    r.entropy_term = b.mean;
    r.entropy_se = b.std_error;
    r.weight_mean = w.mean;
    r.weight_se = w.std_error;
    r.max_merge_gap = s.max_merge_gap;
    r.max_certificate_ratio = s.max_certificate_ratio;
    r.n_samples = n;
    return r;
}

}  // namespace mvlab
