#include "mvlab/pathspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>

namespace mvlab {

namespace {

void require_dim(int dim) {
    if (dim < 1 || dim > kMaxDim) {
        throw std::invalid_argument("dimension must be in [1, " + std::to_string(kMaxDim) + "]");
    }
}

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": non-finite entry");
    }
}

}  // namespace

PathGrid::PathGrid(double r0, int m) : r0_(r0), m_(m) {
    if (!(r0 > 0.0) || !std::isfinite(r0)) throw std::invalid_argument("PathGrid: r0 must be positive");
    if (m < 1) throw std::invalid_argument("PathGrid: m must be >= 1");
}

double PathGrid::theta(int k) const {
    // written so that theta(m) is exactly zero
    return -r0_ + (r0_ * k) / m_;
}

Segment::Segment(PathGrid grid, int dim) : grid_(grid), dim_(dim) {
    require_dim(dim);
    values_.assign(grid_.points() * static_cast<std::size_t>(dim_), 0.0);
}

Segment::Segment(PathGrid grid, int dim, std::vector<double> values)
    : grid_(grid), dim_(dim), values_(std::move(values)) {
    require_dim(dim);
    if (values_.size() != grid_.points() * static_cast<std::size_t>(dim_)) {
        throw std::invalid_argument("Segment: expected (m+1)*d values");
    }
    require_finite(values_, "Segment");
}

Segment Segment::constant(PathGrid grid, std::span<const double> value) {
    Segment s(grid, static_cast<int>(value.size()));
    for (std::size_t k = 0; k < s.points(); ++k) std::ranges::copy(value, s.point(k).begin());
    require_finite(s.values_, "Segment");
    return s;
}

Segment Segment::from_function(PathGrid grid, int dim,
                               const std::function<void(double, std::span<double>)>& fn) {
    Segment s(grid, dim);
    for (int k = 0; k <= grid.m(); ++k) fn(grid.theta(k), s.point(static_cast<std::size_t>(k)));
    require_finite(s.values_, "Segment");
    return s;
}

Segment Segment::from_view(PathGrid grid, SegmentView view) {
    return Segment(grid, view.dim, std::vector<double>(view.data.begin(), view.data.end()));
}

std::span<const double> Segment::point(std::size_t k) const {
    return std::span<const double>(values_).subspan(k * static_cast<std::size_t>(dim_),
                                                    static_cast<std::size_t>(dim_));
}

std::span<double> Segment::point(std::size_t k) {
    return std::span<double>(values_).subspan(k * static_cast<std::size_t>(dim_),
                                              static_cast<std::size_t>(dim_));
}

Trajectory::Trajectory(PathGrid grid, int dim, double t0, std::vector<double> points)
    : grid_(grid), dim_(dim), t0_(t0), points_(std::move(points)) {
    require_dim(dim);
    if (points_.size() % static_cast<std::size_t>(dim) != 0 || size() < grid_.points()) {
        throw std::invalid_argument("Trajectory: must hold at least m+1 points of dimension d");
    }
}

double Trajectory::time(std::size_t j) const {
    return t0_ - grid_.r0() + static_cast<double>(j) * grid_.dt();
}

std::span<const double> Trajectory::point(std::size_t j) const {
    return std::span<const double>(points_).subspan(j * static_cast<std::size_t>(dim_),
                                                    static_cast<std::size_t>(dim_));
}

CameronMartinVector::CameronMartinVector(PathGrid grid, int dim, std::vector<double> values,
                                         std::vector<double> derivative)
    : grid_(grid), dim_(dim), values_(std::move(values)), derivative_(std::move(derivative)) {
    require_dim(dim);
    const auto d = static_cast<std::size_t>(dim);
    if (values_.size() != grid_.points() * d || derivative_.size() != static_cast<std::size_t>(grid_.m()) * d) {
        throw std::invalid_argument("CameronMartinVector: wrong array sizes");
    }
    require_finite(values_, "CameronMartinVector");
    require_finite(derivative_, "CameronMartinVector");
    const double h = grid_.dt();
    for (int k = 0; k < grid_.m(); ++k) {
        for (std::size_t c = 0; c < d; ++c) {
            const double lhs = values_[(k + 1) * d + c];
            const double rhs = values_[k * d + c] + derivative_[k * d + c] * h;
            if (std::abs(lhs - rhs) > 1e-12 * std::max(1.0, std::abs(lhs))) {
                throw std::invalid_argument("CameronMartinVector: values and derivative disagree");
            }
        }
    }
}

CameronMartinVector CameronMartinVector::from_values(PathGrid grid, int dim, std::vector<double> values) {
    const auto d = static_cast<std::size_t>(dim);
    if (dim < 1 || values.size() != grid.points() * d) {
        throw std::invalid_argument("CameronMartinVector: expected (m+1)*d values");
    }
    std::vector<double> slope(static_cast<std::size_t>(grid.m()) * d);
    const double h = grid.dt();
    for (std::size_t k = 0; k < static_cast<std::size_t>(grid.m()); ++k) {
        for (std::size_t c = 0; c < d; ++c) slope[k * d + c] = (values[(k + 1) * d + c] - values[k * d + c]) / h;
    }
    return CameronMartinVector(grid, dim, std::move(values), std::move(slope));
}

CameronMartinVector CameronMartinVector::from_function(PathGrid grid, int dim,
                                                       const std::function<void(double, std::span<double>)>& fn) {
    const auto d = static_cast<std::size_t>(dim);
    std::vector<double> values(grid.points() * d);
    for (int k = 0; k <= grid.m(); ++k) {
        fn(grid.theta(k), std::span<double>(values).subspan(static_cast<std::size_t>(k) * d, d));
    }
    return from_values(grid, dim, std::move(values));
}

CameronMartinVector CameronMartinVector::zero(PathGrid grid, int dim) {
    return from_values(grid, dim, std::vector<double>(grid.points() * static_cast<std::size_t>(dim), 0.0));
}

std::span<const double> CameronMartinVector::value(std::size_t k) const {
    return std::span<const double>(values_).subspan(k * static_cast<std::size_t>(dim_),
                                                    static_cast<std::size_t>(dim_));
}

std::span<const double> CameronMartinVector::slope(std::size_t cell) const {
    return std::span<const double>(derivative_).subspan(cell * static_cast<std::size_t>(dim_),
                                                        static_cast<std::size_t>(dim_));
}

double sup_norm(SegmentView seg) {
    double best = 0.0;
    for (std::size_t k = 0; k < seg.points(); ++k) {
        double sq = 0.0;
        for (double x : seg.point(k)) sq += x * x;
        best = std::max(best, sq);
    }
    return std::sqrt(best);
}

double sup_distance_sq(SegmentView a, SegmentView b) {
    if (a.dim != b.dim || a.data.size() != b.data.size()) {
        throw std::invalid_argument("sup_distance_sq: segment shapes differ");
    }
    double best = 0.0;
    const auto d = static_cast<std::size_t>(a.dim);
    for (std::size_t j = 0; j < a.data.size(); j += d) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = a.data[j + c] - b.data[j + c];
            sq += diff * diff;
        }
        best = std::max(best, sq);
    }
    return best;
}

double h1_norm_sq(const CameronMartinVector& eta) {
    double sum = 0.0;
    for (std::size_t k = 0; k < static_cast<std::size_t>(eta.grid().m()); ++k) {
        for (double v : eta.slope(k)) sum += v * v;
    }
    return sum * eta.grid().dt();
}

std::size_t grid_index(double t, double origin, double h) {
    const double x = (t - origin) / h;
    const double r = std::round(x);
    if (!(r >= 0.0) || std::abs(x - r) > 1e-9 * std::max(1.0, std::abs(x))) {
        throw std::out_of_range("time is not on the simulation grid");
    }
    return static_cast<std::size_t>(r);
}

Segment segment_at(const Trajectory& traj, double t) {
    const std::size_t last = grid_index(t, traj.t0() - traj.grid().r0(), traj.step());
    const std::size_t m = static_cast<std::size_t>(traj.grid().m());
    if (last < m || last >= traj.size()) throw std::out_of_range("segment_at: t outside the trajectory");
    const auto d = static_cast<std::size_t>(traj.dim());
    std::vector<double> values((m + 1) * d);
    for (std::size_t k = 0; k <= m; ++k) {
        auto p = traj.point(last - m + k);
        std::ranges::copy(p, values.begin() + static_cast<std::ptrdiff_t>(k * d));
    }
    return Segment(traj.grid(), traj.dim(), std::move(values));
}

void write_segment_csv(std::ostream& os, const Segment& seg, bool header) {
    if (header) {
        os << "t_offset";
        for (int c = 0; c < seg.dim(); ++c) os << ",x_" << c;
        os << '\n';
    }
    char buf[40];
    for (int k = 0; k <= seg.grid().m(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", seg.grid().theta(k));
        os << buf;
        for (double x : seg.point(static_cast<std::size_t>(k))) {
            std::snprintf(buf, sizeof buf, "%.17g", x);
            os << ',' << buf;
        }
        os << '\n';
    }
}

}  // namespace mvlab
