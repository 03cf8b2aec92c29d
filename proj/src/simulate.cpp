#include "mvlab/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mvlab/rng.hpp"
#include "mvlab/stats.hpp"

namespace mvlab {

namespace {

constexpr std::size_t kNoFailure = std::numeric_limits<std::size_t>::max();

/// One Euler step for particle i; returns false if the new point is not finite.
bool step_particle(PathStore& store, std::size_t i, const StepContext& ctx, double sqrt_h) {
    const CoefficientModel& model = *ctx.model;
    const auto d = static_cast<std::size_t>(store.dim());
    const auto m = static_cast<std::size_t>(store.grid().m());
    const std::size_t pos = store.position();
    const SegmentView seg{std::span<const double>(store.point(i, pos - m), (m + 1) * d), store.dim()};
    const double* x = store.point(i, pos);
    double* out = store.point(i, pos + 1);

    double b[kMaxDim];
    model.drift(ctx.t, seg, ctx.features, std::span<double>(b, d));
    if (model.diffusion_kind() == DiffusionKind::none) {
        for (std::size_t c = 0; c < d; ++c) out[c] = x[c] + b[c] * ctx.h;
    } else {
        double sig[kMaxDim * kMaxDim], z[kMaxDim];
        model.diffusion(ctx.t, std::span<const double>(x, d), std::span<double>(sig, d * d));
        rng::gaussians(ctx.noise_key, ctx.step_index, ctx.index_offset + i, std::span<double>(z, d));
        for (std::size_t c = 0; c < d; ++c) {
            double noise = 0.0;
            for (std::size_t j = 0; j < d; ++j) noise += sig[c * d + j] * z[j];
            out[c] = x[c] + b[c] * ctx.h + noise * sqrt_h;
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        if (!std::isfinite(out[c])) return false;
    }
    return true;
}

void run_step(PathStore& store, const StepContext& ctx, bool parallel) {
    store.reserve_next();
    if (parallel) {
        advance_particles(store, ctx);
    } else {
        advance_particles_serial(store, ctx);
    }
    store.commit();
}

void check_inputs(const CoefficientModel& model, const EmpiricalPathMeasure& init, const SimConfig& config) {
    config.validate();
    model.check_grid(config.grid);
    if (init.size() != config.n_particles) throw std::invalid_argument("initial measure size differs from N");
    if (init.dim() != model.dim()) throw std::invalid_argument("initial measure dimension differs from model");
    if (!(init.grid() == config.grid)) throw std::invalid_argument("initial measure grid differs from config grid");
}

}  // namespace

SimulationAbort::SimulationAbort(std::size_t step, std::size_t particle)
    : std::runtime_error("non-finite state at step " + std::to_string(step) + ", particle " +
                         std::to_string(particle)),
      step_(step),
      particle_(particle) {}

std::size_t SimConfig::steps() const {
    if (!(T > 0.0)) throw std::invalid_argument("T must be positive");
    const std::size_t k = grid_index(T, 0.0, grid.dt());
    if (k == 0) throw std::invalid_argument("T must be at least one step r0/m");
    return k;
}

void SimConfig::validate() const {
    if (n_particles < 1) throw std::invalid_argument("N must be >= 1");
    static_cast<void>(steps());
    if (picard_iters < 2) throw std::invalid_argument("picard_iters must be >= 2");
    if (picard_window < 0.0) throw std::invalid_argument("picard_window must be >= 0");
}

PathStore::PathStore(const EmpiricalPathMeasure& init, std::size_t capacity)
    : grid_(init.grid()), dim_(init.dim()), n_(init.size()), capacity_(capacity), pos_(init.grid().points() - 1) {
    const std::size_t per = grid_.points();
    if (capacity < per + 1) throw std::invalid_argument("PathStore: capacity must exceed m+1");
    const auto d = static_cast<std::size_t>(dim_);
    data_.assign(n_ * capacity_ * d, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
        auto src = init.particle(i).data;
        std::copy(src.begin(), src.end(), data_.begin() + static_cast<std::ptrdiff_t>(i * capacity_ * d));
    }
}

SegmentBatch PathStore::segments_ending_at(std::size_t end) const {
    const auto m = static_cast<std::size_t>(grid_.m());
    const auto d = static_cast<std::size_t>(dim_);
    if (end < m || end >= capacity_) throw std::out_of_range("PathStore: segment end outside buffer");
    return {data_.data() + (end - m) * d, n_, capacity_ * d, grid_.points(), dim_};
}

SegmentBatch PathStore::current() const { return segments_ending_at(pos_); }

const double* PathStore::point(std::size_t particle, std::size_t index) const {
    return data_.data() + (particle * capacity_ + index) * static_cast<std::size_t>(dim_);
}

double* PathStore::point(std::size_t particle, std::size_t index) {
    return data_.data() + (particle * capacity_ + index) * static_cast<std::size_t>(dim_);
}

void PathStore::reserve_next() {
    if (pos_ + 1 < capacity_) return;
    const auto m = static_cast<std::size_t>(grid_.m());
    const auto d = static_cast<std::size_t>(dim_);
    for (std::size_t i = 0; i < n_; ++i) {
        double* base = point(i, 0);
        std::copy(base + (pos_ - m) * d, base + (pos_ + 1) * d, base);
    }
    pos_ = m;
}

void advance_particles_serial(PathStore& store, const StepContext& ctx) {
    const double sqrt_h = std::sqrt(ctx.h);
    for (std::size_t i = 0; i < store.size(); ++i) {
        if (!step_particle(store, i, ctx, sqrt_h)) throw SimulationAbort(ctx.step_index, ctx.index_offset + i);
    }
}

void advance_particles(PathStore& store, const StepContext& ctx) {
    const double sqrt_h = std::sqrt(ctx.h);
    const auto n = static_cast<std::ptrdiff_t>(store.size());
    std::size_t failed = kNoFailure;
#pragma omp parallel for schedule(static) reduction(min : failed)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (!step_particle(store, ui, ctx, sqrt_h)) failed = std::min(failed, ui);
    }
    if (failed != kNoFailure) throw SimulationAbort(ctx.step_index, ctx.index_offset + failed);
}

SegmentBatch MeasureFlow::segments(std::size_t k) const {
    if (k > steps) throw std::out_of_range("MeasureFlow: step beyond the recorded horizon");
    const auto d = static_cast<std::size_t>(dim);
    return {paths.data() + k * d, n, points_per_particle() * d, grid.points(), dim};
}

std::span<const double> MeasureFlow::features_at(std::size_t k) const {
    if (k > steps) throw std::out_of_range("MeasureFlow: step beyond the recorded horizon");
    return std::span<const double>(features).subspan(k * feature_count, feature_count);
}

EmpiricalPathMeasure MeasureFlow::measure(std::size_t k) const { return EmpiricalPathMeasure::from_batch(grid, segments(k)); }

Trajectory MeasureFlow::trajectory(std::size_t i) const {
    const std::size_t per = points_per_particle() * static_cast<std::size_t>(dim);
    auto first = paths.begin() + static_cast<std::ptrdiff_t>(i * per);
    return Trajectory(grid, dim, 0.0, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(per)));
}

std::size_t MeasureFlow::step_of(double t) const {
    const std::size_t k = grid_index(t, 0.0, h());
    if (k > steps) throw std::out_of_range("time beyond the recorded horizon");
    return k;
}

SimulationOutput simulate_mckean(const CoefficientModel& model, const EmpiricalPathMeasure& init,
                                 const SimConfig& config, const SimOptions& options) {
    check_inputs(model, init, config);
    const std::size_t steps = config.steps();
    const auto m = static_cast<std::size_t>(config.grid.m());
    const double h = config.grid.dt();
    const std::size_t capacity = options.record ? m + 1 + steps : std::min(m + 1 + steps, 2 * (m + 1));
    PathStore store(init, capacity);

    std::vector<std::size_t> snap_steps;
    for (double t : options.snapshot_times) {
        const std::size_t k = grid_index(t, 0.0, h);
        if (k > steps) throw std::out_of_range("snapshot time beyond T");
        snap_steps.push_back(k);
    }

    const std::uint64_t key = rng::derive_key(config.seed, options.noise_label);
    const std::size_t fc = model.feature_count();
    std::vector<double> feats(fc);
    SimulationOutput out{std::nullopt, {}, init};
    std::vector<double> flow_features;
    if (options.record) flow_features.reserve((steps + 1) * fc);

    for (std::size_t k = 0;; ++k) {
        const SegmentBatch now = store.current();
        model.features(now, feats);
        if (options.record) flow_features.insert(flow_features.end(), feats.begin(), feats.end());
        for (std::size_t j = 0; j < snap_steps.size(); ++j) {
            if (snap_steps[j] == k) {
                out.snapshots.push_back({options.snapshot_times[j], EmpiricalPathMeasure::from_batch(config.grid, now)});
            }
        }
        if (k == steps) break;
        StepContext ctx{&model, static_cast<double>(k) * h, h, feats, key, k, 0};
        run_step(store, ctx, options.parallel);
    }
    out.final_measure = EmpiricalPathMeasure::from_batch(config.grid, store.current());
    if (options.record) {
        MeasureFlow flow;
        flow.grid = config.grid;
        flow.dim = model.dim();
        flow.n = init.size();
        flow.steps = steps;
        flow.feature_count = fc;
        flow.features = std::move(flow_features);
        flow.paths = store.release();
        out.flow = std::move(flow);
    }
    return out;
}

EmpiricalPathMeasure simulate_frozen(const CoefficientModel& model, const MeasureFlow& flow,
                                     const EmpiricalPathMeasure& init, std::size_t steps, std::uint64_t noise_key,
                                     bool parallel, std::uint64_t index_offset) {
    model.check_grid(flow.grid);
    if (!(init.grid() == flow.grid) || init.dim() != model.dim()) {
        throw std::invalid_argument("simulate_frozen: initial measure does not match the flow");
    }
    if (flow.feature_count != model.feature_count()) throw std::invalid_argument("simulate_frozen: foreign flow");
    if (steps > flow.steps) throw std::out_of_range("simulate_frozen: flow does not cover the horizon");
    const auto m = static_cast<std::size_t>(flow.grid.m());
    PathStore store(init, std::min(m + 1 + std::max<std::size_t>(steps, 1), 2 * (m + 1)));
    const double h = flow.h();
    for (std::size_t k = 0; k < steps; ++k) {
        const StepContext ctx{&model, static_cast<double>(k) * h, h, flow.features_at(k), noise_key, k, index_offset};
        run_step(store, ctx, parallel);
    }
    return EmpiricalPathMeasure::from_batch(flow.grid, store.current());
}

double picard_constant(const RegularityConstants& c) {
    return 2.0 * (std::max(c.beta1, c.beta2) + 8.0 * std::max(c.alpha1, c.alpha2));
}

double suggest_picard_window(double k2, double h, double T) {
    if (!(k2 >= 0.0) || !std::isfinite(k2)) throw std::invalid_argument("K2 must be finite and nonnegative");
    if (!(h > 0.0) || !(T > 0.0)) throw std::invalid_argument("h and T must be positive");
    if (k2 == 0.0) return T;
    const double target = std::exp(-1.0);
    auto crit = [k2](double t) { return t * k2 * std::exp(t * k2); };
    // u e^u = e^{-1} by bisection on [0, 1]
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (mid * std::exp(mid) <= target ? lo : hi) = mid;
    }
    const double t_star = std::min(lo / k2, T);
    auto k = static_cast<long long>(std::floor(t_star / h));
    while (k > 0 && crit(static_cast<double>(k) * h) > target) --k;
    if (k == 0) {
        throw std::domain_error("no Picard window on this grid: t K2 e^{t K2} > e^{-1} already at t = h");
    }
    return static_cast<double>(k) * h;
}

double suggest_picard_window(const RegularityConstants& c, double h, double T) {
    return suggest_picard_window(picard_constant(c), h, T);
}

PicardResult picard_solve(const CoefficientModel& model, const EmpiricalPathMeasure& init, const SimConfig& config,
                          bool parallel) {
    check_inputs(model, init, config);
    const std::size_t total = config.steps();
    const auto m = static_cast<std::size_t>(config.grid.m());
    const auto d = static_cast<std::size_t>(model.dim());
    const double h = config.grid.dt();
    const std::size_t n = init.size();
    const std::size_t fc = model.feature_count();
    const double t0 = config.picard_window > 0.0 ? config.picard_window
                                                 : suggest_picard_window(model.constants(), h, config.T);
    const std::size_t window = grid_index(t0, 0.0, h);
    if (window == 0) throw std::invalid_argument("Picard window must be at least one step");
    const std::uint64_t key = rng::derive_key(config.seed, "noise");

    PicardResult result{{t0, {}}, init};
    EmpiricalPathMeasure start = init;
    for (std::size_t s = 0; s < total;) {
        const std::size_t w = std::min(window, total - s);
        auto all_features = [&](const PathStore& st) {
            std::vector<double> f((w + 1) * fc);
            for (std::size_t k = 0; k <= w; ++k) {
                model.features(st.segments_ending_at(m + k), std::span<double>(f).subspan(k * fc, fc));
            }
            return f;
        };

        // iterate 0: the path stopped at s
        PathStore prev(start, m + 1 + w);
        for (std::size_t k = 0; k < w; ++k) {
            for (std::size_t i = 0; i < n; ++i) std::copy_n(prev.point(i, m), d, prev.point(i, m + 1 + k));
            prev.commit();
        }
        std::vector<double> prev_features = all_features(prev);

        PicardWindow report;
        report.t_start = static_cast<double>(s) * h;
        report.t_end = static_cast<double>(s + w) * h;
        for (int it = 1; it <= config.picard_iters; ++it) {
            PathStore cur(start, m + 1 + w);
            for (std::size_t k = 0; k < w; ++k) {
                const StepContext ctx{&model, static_cast<double>(s + k) * h, h,
                                      std::span<const double>(prev_features).subspan(k * fc, fc), key, s + k, 0};
                run_step(cur, ctx, parallel);
            }
            double gap = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double worst = 0.0;
                for (std::size_t k = 1; k <= w; ++k) {
                    const double* a = cur.point(i, m + k);
                    const double* b = prev.point(i, m + k);
                    double sq = 0.0;
                    for (std::size_t c = 0; c < d; ++c) sq += (a[c] - b[c]) * (a[c] - b[c]);
                    worst = std::max(worst, sq);
                }
                gap += worst;
            }
            report.gaps.push_back(gap / static_cast<double>(n));
            prev_features = all_features(cur);
            prev = std::move(cur);
        }
        for (std::size_t j = 1; j < report.gaps.size(); ++j) {
            const double g = report.gaps[j - 1];
            report.ratios.push_back(g > 0.0 ? report.gaps[j] / g : std::numeric_limits<double>::quiet_NaN());
        }
        result.report.windows.push_back(std::move(report));
        start = EmpiricalPathMeasure::from_batch(config.grid, prev.current());
        s += w;
    }
    result.final_measure = std::move(start);
    return result;
}

namespace {

/// h * sum_{k=k1}^{k2-1} (L_{t_k, mu_k} f)(X_{i, t_k})
double generator_integral(const MeasureFlow& flow, const CoefficientModel& model, const TestFunction& f,
                          std::size_t i, std::size_t k1, std::size_t k2) {
    double s = 0.0;
    for (std::size_t k = k1; k < k2; ++k) {
        s += generator_apply(model, flow.time(k), flow.segments(k)[i], flow.features_at(k), f);
    }
    return flow.h() * s;
}

void check_flow(const MeasureFlow& flow, const CoefficientModel& model) {
    if (flow.n == 0) throw std::invalid_argument("empty measure flow");
    if (flow.dim != model.dim() || flow.feature_count != model.feature_count()) {
        throw std::invalid_argument("measure flow does not belong to this model");
    }
}

}  // namespace

FpkeResidual verify_fpke_weak_form(const MeasureFlow& flow, const CoefficientModel& model, const TestFunction& f,
                                   double t) {
    check_flow(flow, model);
    const std::size_t k_end = flow.step_of(t);
    std::vector<double> dvals(flow.n);
    const auto n = static_cast<std::ptrdiff_t>(flow.n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const double ft = f.value(flow.segments(k_end)[i].endpoint());
        const double f0 = f.value(flow.segments(0)[i].endpoint());
        dvals[i] = ft - f0 - generator_integral(flow, model, f, i, 0, k_end);
    }
    const Estimate e = mean_estimate(dvals);
    return {std::abs(e.mean), e.mean, e.std_error, flow.n};
}

std::pair<double, double> martingale_increment(const MeasureFlow& flow, const CoefficientModel& model,
                                               const TestFunction& f, double t1, double t2,
                                               const std::function<bool(SegmentView)>& event) {
    check_flow(flow, model);
    const std::size_t k1 = flow.step_of(t1), k2 = flow.step_of(t2);
    if (k2 <= k1) throw std::invalid_argument("martingale_increment: need t2 > t1");
    std::vector<double> v(flow.n, 0.0);
    for (std::size_t i = 0; i < flow.n; ++i) {
        if (!event(flow.segments(k1)[i])) continue;
        v[i] = f.value(flow.segments(k2)[i].endpoint()) - f.value(flow.segments(k1)[i].endpoint()) -
               generator_integral(flow, model, f, i, k1, k2);
    }
    const Estimate e = mean_estimate(v);
    return {e.mean, e.std_error};
}

EmpiricalPathMeasure InitialLaw::sample(const PathGrid& grid, std::size_t n, std::uint64_t key,
                                        std::uint64_t index_offset) const {
    const int dim = static_cast<int>(mean.size());
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("InitialLaw: mean must have 1..16 entries");
    if (!(spread >= 0.0) || !(bridge_scale >= 0.0)) throw std::invalid_argument("InitialLaw: negative scale");
    const auto d = static_cast<std::size_t>(dim);
    const auto m = static_cast<std::size_t>(grid.m());
    EmpiricalPathMeasure out(grid, dim, n);
    std::vector<double> z(std::max(d, m * d)), walk((m + 1) * d);
    const double sqrt_dt = std::sqrt(grid.dt());
    for (std::size_t i = 0; i < n; ++i) {
        auto seg = out.particle_data(i);
        rng::gaussians(key, 0, index_offset + i, std::span<double>(z).first(d));
        double x[kMaxDim];
        for (std::size_t c = 0; c < d; ++c) x[c] = mean[c] + spread * z[c];
        std::fill(walk.begin(), walk.end(), 0.0);
        if (kind == Kind::bridge && bridge_scale > 0.0) {
            rng::gaussians(key, 1, index_offset + i, std::span<double>(z).first(m * d));
            for (std::size_t k = 0; k < m; ++k) {
                for (std::size_t c = 0; c < d; ++c) walk[(k + 1) * d + c] = walk[k * d + c] + sqrt_dt * z[k * d + c];
            }
            for (std::size_t k = 0; k <= m; ++k) {
                const double frac = static_cast<double>(k) / static_cast<double>(m);
                for (std::size_t c = 0; c < d; ++c) walk[k * d + c] -= frac * walk[m * d + c];
            }
        }
        for (std::size_t k = 0; k <= m; ++k) {
            for (std::size_t c = 0; c < d; ++c) seg[k * d + c] = x[c] + bridge_scale * walk[k * d + c];
        }
        if (kind == Kind::bridge) {
            for (std::size_t c = 0; c < d; ++c) seg[m * d + c] = x[c];
        }
    }
    return out;
}

}  // namespace mvlab
