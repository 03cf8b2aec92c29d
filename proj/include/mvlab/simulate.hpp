#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvlab/measure.hpp"
#include "mvlab/models.hpp"
#include "mvlab/pathspace.hpp"

namespace mvlab {

/// Raised when a particle state stops being finite.
class SimulationAbort : public std::runtime_error {
public:
    SimulationAbort(std::size_t step, std::size_t particle);
    std::size_t step() const { return step_; }
    std::size_t particle() const { return particle_; }

private:
    std::size_t step_, particle_;
};

struct SimConfig {
    std::size_t n_particles = 0;
    double T = 0.0;
    PathGrid grid{1.0, 1};
    std::uint64_t seed = 0;
    int picard_iters = 6;
    /// Picard window length; 0 means "use suggest_picard_window".
    double picard_window = 0.0;

    /// Number of Euler steps to reach T; throws if T is not a multiple of r0/m.
    std::size_t steps() const;
    void validate() const;
};

/**
 * @brief Per-particle path buffers for an ensemble.
 *
 * Particle i owns `capacity` consecutive points. The current segment is the
 * m+1 points ending at `pos`. When the buffer is full, the last m+1 points are
 * moved to the front, so memory stays O(N*m) unless the capacity is chosen to
 * hold the whole run.
 */
class PathStore {
public:
    PathStore(const EmpiricalPathMeasure& init, std::size_t capacity);

    std::size_t size() const { return n_; }
    int dim() const { return dim_; }
    const PathGrid& grid() const { return grid_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t position() const { return pos_; }

    SegmentBatch current() const;
    /// Segments ending at buffer index `end` (end >= m).
    SegmentBatch segments_ending_at(std::size_t end) const;
    const double* point(std::size_t particle, std::size_t index) const;
    double* point(std::size_t particle, std::size_t index);

    /// Make room for one more point, compacting if necessary.
    void reserve_next();
    /// Advance the current position after the next point has been written.
    void commit() { ++pos_; }

    std::span<const double> raw() const { return data_; }
    /// Hand over the buffer; the store is empty afterwards.
    std::vector<double> release() { return std::move(data_); }

private:
    PathGrid grid_;
    int dim_;
    std::size_t n_, capacity_, pos_;
    std::vector<double> data_;
};

/// Inputs of one Euler-Maruyama step shared by all particles.
struct StepContext {
    const CoefficientModel* model = nullptr;
    double t = 0.0;
    double h = 0.0;
    std::span<const double> features;
    std::uint64_t noise_key = 0;
    std::uint64_t step_index = 0;
    std::uint64_t index_offset = 0;
};

/**
 * X_i(t+h) = X_i(t) + b(t, X_{i,t}, features) h + sigma(t, X_i(t)) sqrt(h) Z_i
 * with Z_i drawn from (noise_key, step_index, index_offset + i).
 * Both kernels run the same per-particle code; advance_particles splits the
 * particles over OpenMP threads. Throws SimulationAbort on a non-finite state.
 */
void advance_particles_serial(PathStore& store, const StepContext& ctx);
void advance_particles(PathStore& store, const StepContext& ctx);

/**
 * @brief The full recorded evolution of an ensemble.
 *
 * Particle i holds m+1+steps points starting at time -r0; `features` holds the
 * model features of the empirical segment law at each step 0..steps.
 */
struct MeasureFlow {
    PathGrid grid{1.0, 1};
    int dim = 1;
    std::size_t n = 0;
    std::size_t steps = 0;
    std::size_t feature_count = 0;
    std::vector<double> paths;
    std::vector<double> features;

    double h() const { return grid.dt(); }
    double time(std::size_t k) const { return static_cast<double>(k) * grid.dt(); }
    std::size_t points_per_particle() const { return static_cast<std::size_t>(grid.m()) + 1 + steps; }
    SegmentBatch segments(std::size_t k) const;
    std::span<const double> features_at(std::size_t k) const;
    EmpiricalPathMeasure measure(std::size_t k) const;
    Trajectory trajectory(std::size_t i) const;
    /// Step index of time t; throws std::out_of_range for off-grid or uncovered t.
    std::size_t step_of(double t) const;
};

struct Snapshot {
    double t;
    EmpiricalPathMeasure measure;
};

struct SimOptions {
    bool record = false;
    bool parallel = true;
    std::vector<double> snapshot_times;
    std::string noise_label = "noise";
};

struct SimulationOutput {
    std::optional<MeasureFlow> flow;
    std::vector<Snapshot> snapshots;
    EmpiricalPathMeasure final_measure;
};

/// Interacting-particle Euler-Maruyama on [0, T] starting from `init` at t = 0.
SimulationOutput simulate_mckean(const CoefficientModel& model, const EmpiricalPathMeasure& init,
                                 const SimConfig& config, const SimOptions& options = {});

/**
 * Independent particles driven by a frozen flow: the drift at step k reads
 * flow.features_at(k) instead of the particles' own law. Returns the
 * segments after `steps` steps.
 */
EmpiricalPathMeasure simulate_frozen(const CoefficientModel& model, const MeasureFlow& flow,
                                     const EmpiricalPathMeasure& init, std::size_t steps, std::uint64_t noise_key,
                                     bool parallel = true, std::uint64_t index_offset = 0);

/**
 * K2 = 2 (max(beta1, beta2) + 8 max(alpha1, alpha2)), the constant of the
 * one-step Picard estimate E sup|xi^(n)|^2 <= t K2 e^{t K2} E sup|xi^(n-1)|^2.
 */
double picard_constant(const RegularityConstants& c);
/// Largest multiple of h in (0, T] with t K2 e^{t K2} <= e^{-1}; T when K2 = 0.
/// Throws std::domain_error when no positive multiple of h qualifies.
double suggest_picard_window(double k2, double h, double T);
double suggest_picard_window(const RegularityConstants& c, double h, double T);

struct PicardWindow {
    double t_start = 0.0;
    double t_end = 0.0;
    std::vector<double> gaps;    ///< g_n = E max_k |X^(n+1)(t_k) - X^(n)(t_k)|^2, n = 0..iters-1
    std::vector<double> ratios;  ///< g_{n+1} / g_n (NaN when g_n = 0)
};

struct PicardReport {
    double t0 = 0.0;
    std::vector<PicardWindow> windows;
};

struct PicardResult {
    PicardReport report;
    EmpiricalPathMeasure final_measure;
};

/**
 * @brief Measure-frozen Picard iteration, window by window.
 *
 * On each window [s, s+t0] iterate 0 is the path stopped at s; iterate n
 * solves the classical path-dependent SDE whose measure argument is frozen to
 * the flow of iterate n-1. All iterates reuse the Brownian increments of the
 * global step index, so gaps measure the scheme alone. The last iterate is
 * accepted and its final segments start the next window.
 */
PicardResult picard_solve(const CoefficientModel& model, const EmpiricalPathMeasure& init, const SimConfig& config,
                          bool parallel = true);

struct FpkeResidual {
    double residual = 0.0;  ///< |mean D|
    double mean = 0.0;      ///< mean D (signed)
    double std_error = 0.0;
    std::size_t n = 0;
};

/**
 * D_i = f(X_i(t)) - f(X_i(0)) - sum_{k: t_k < t} h (L_{t_k, mu_k} f)(X_{i,t_k}),
 * the weak form of the Fokker-Planck equation with left-endpoint quadrature.
 */
FpkeResidual verify_fpke_weak_form(const MeasureFlow& flow, const CoefficientModel& model, const TestFunction& f,
                                   double t);

/**
 * Mean and standard error of 1_A (M^f(t2) - M^f(t1)), where A is an event of
 * the segment at t1 and M^f(t) = f(X(t)) - int_0^t (L f)(X_s) ds.
 */
std::pair<double, double> martingale_increment(const MeasureFlow& flow, const CoefficientModel& model,
                                               const TestFunction& f, double t1, double t2,
                                               const std::function<bool(SegmentView)>& event);

/**
 * @brief Sampler for initial segment laws.
 *
 * Each particle gets a point x_i ~ N(mean, spread^2 I). `constant` gives the
 * constant segment x_i; `bridge` adds bridge_scale times a Brownian bridge
 * pinned to zero at both ends of [-r0, 0]. Particle i only uses the stream
 * (key, *, i), so two laws sampled with the same key are coupled index-wise.
 */
struct InitialLaw {
    enum class Kind { constant, bridge };
    Kind kind = Kind::constant;
    std::vector<double> mean;
    double spread = 0.0;
    double bridge_scale = 0.0;

    /// Particle i of the result uses the stream index index_offset + i.
    EmpiricalPathMeasure sample(const PathGrid& grid, std::size_t n, std::uint64_t key,
                                std::uint64_t index_offset = 0) const;
};

}  // namespace mvlab
