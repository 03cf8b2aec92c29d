#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace mvlab {

/// Largest state dimension supported by the stack buffers in the kernels.
inline constexpr int kMaxDim = 16;

/**
 * @brief Uniform grid on the delay window [-r0, 0].
 *
 * The grid is stored as (r0, m); the step r0/m is derived, and grid point k
 * sits at theta_k = -r0 + k*r0/m so that theta_m == 0 exactly.
 */
class PathGrid {
public:
    PathGrid(double r0, int m);

    double r0() const { return r0_; }
    int m() const { return m_; }
    double dt() const { return r0_ / m_; }
    std::size_t points() const { return static_cast<std::size_t>(m_) + 1; }
    double theta(int k) const;

    friend bool operator==(const PathGrid&, const PathGrid&) = default;

private:
    double r0_;
    int m_;
};

/// Non-owning view of one segment: (m+1) points of dimension dim, oldest first.
struct SegmentView {
    std::span<const double> data;
    int dim = 1;

    std::size_t points() const { return data.size() / static_cast<std::size_t>(dim); }
    std::span<const double> point(std::size_t k) const {
        return data.subspan(k * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
    }
    /// xi(-r0)
    std::span<const double> start() const { return point(0); }
    /// xi(0)
    std::span<const double> endpoint() const { return point(points() - 1); }
};

/// A discretised element of C([-r0,0]; R^d).
class Segment {
public:
    Segment(PathGrid grid, int dim);
    Segment(PathGrid grid, int dim, std::vector<double> values);

    static Segment constant(PathGrid grid, std::span<const double> value);
    static Segment from_function(PathGrid grid, int dim,
                                 const std::function<void(double theta, std::span<double> out)>& fn);
    static Segment from_view(PathGrid grid, SegmentView view);

    const PathGrid& grid() const { return grid_; }
    int dim() const { return dim_; }
    std::size_t points() const { return grid_.points(); }

    std::span<const double> point(std::size_t k) const;
    std::span<double> point(std::size_t k);
    std::span<const double> values() const { return values_; }
    SegmentView view() const { return {values_, dim_}; }

private:
    PathGrid grid_;
    int dim_;
    std::vector<double> values_;
};

/**
 * @brief A path on [t0 - r0, t0 + T] sampled with the history step r0/m.
 *
 * Point j sits at time t0 - r0 + j*dt.
 */
class Trajectory {
public:
    Trajectory(PathGrid grid, int dim, double t0, std::vector<double> points);

    const PathGrid& grid() const { return grid_; }
    int dim() const { return dim_; }
    double t0() const { return t0_; }
    double step() const { return grid_.dt(); }
    std::size_t size() const { return points_.size() / static_cast<std::size_t>(dim_); }
    double time(std::size_t j) const;
    double end_time() const { return time(size() - 1); }
    std::span<const double> point(std::size_t j) const;

private:
    PathGrid grid_;
    int dim_;
    double t0_;
    std::vector<double> points_;
};

/**
 * @brief Element of the Cameron-Martin space H^1 on the grid.
 *
 * `values` holds eta at the m+1 grid points, `derivative` holds eta' on the m
 * cells (piecewise-linear reading, so eta' is constant per cell).
 */
class CameronMartinVector {
public:
    CameronMartinVector(PathGrid grid, int dim, std::vector<double> values,
                        std::vector<double> derivative);

    static CameronMartinVector from_values(PathGrid grid, int dim, std::vector<double> values);
    static CameronMartinVector from_function(PathGrid grid, int dim,
                                             const std::function<void(double, std::span<double>)>& fn);
    static CameronMartinVector zero(PathGrid grid, int dim);

    const PathGrid& grid() const { return grid_; }
    int dim() const { return dim_; }
    std::span<const double> value(std::size_t k) const;
    std::span<const double> slope(std::size_t cell) const;
    std::span<const double> values() const { return values_; }
    SegmentView view() const { return {values_, dim_}; }

private:
    PathGrid grid_;
    int dim_;
    std::vector<double> values_;
    std::vector<double> derivative_;
};

double sup_norm(SegmentView seg);
inline double sup_norm(const Segment& seg) { return sup_norm(seg.view()); }

/// ||a - b||_inf^2 over the grid points.
double sup_distance_sq(SegmentView a, SegmentView b);

/// Integral of |eta'|^2 over [-r0, 0] by the midpoint rule on the cells.
double h1_norm_sq(const CameronMartinVector& eta);

/// The segment xi_t(theta) = traj(t + theta); t must be a grid time.
Segment segment_at(const Trajectory& traj, double t);

/// Flat CSV rows `t_offset,x_0,...,x_{d-1}`; the header is written when requested.
void write_segment_csv(std::ostream& os, const Segment& seg, bool header = true);

/// Index of `t` on a grid of spacing h starting at `origin`; throws std::out_of_range
/// when t is not within 1e-9 steps of a grid point.
std::size_t grid_index(double t, double origin, double h);

}  // namespace mvlab
