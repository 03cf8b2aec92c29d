#pragma once

#include <cstddef>
#include <vector>

#include "mvlab/pathspace.hpp"

namespace mvlab {

/**
 * @brief Strided view over a set of equally shaped segments.
 *
 * Segment i starts at base + i*stride; it lets reductions run directly on
 * simulation storage without copying.
 */
struct SegmentBatch {
    const double* base = nullptr;
    std::size_t count = 0;
    std::size_t stride = 0;
    std::size_t points = 0;
    int dim = 1;

    SegmentView operator[](std::size_t i) const {
        return {std::span<const double>(base + i * stride, points * static_cast<std::size_t>(dim)), dim};
    }
    std::size_t size() const { return count; }
};

/**
 * @brief Mean of xi(0) over a batch, written to `out` (size dim).
 *
 * Partial sums are taken over fixed blocks of particles and combined in block
 * order, so the result does not depend on the number of OpenMP threads.
 */
void endpoint_mean(const SegmentBatch& batch, std::span<double> out);

/// N equally weighted segments on a common grid.
class EmpiricalPathMeasure {
public:
    EmpiricalPathMeasure(PathGrid grid, int dim, std::size_t n);
    EmpiricalPathMeasure(PathGrid grid, int dim, std::vector<double> flat);
    explicit EmpiricalPathMeasure(const std::vector<Segment>& particles);
    static EmpiricalPathMeasure from_batch(PathGrid grid, const SegmentBatch& batch);

    const PathGrid& grid() const { return grid_; }
    int dim() const { return dim_; }
    std::size_t size() const { return n_; }

    SegmentView particle(std::size_t i) const { return batch()[i]; }
    std::span<double> particle_data(std::size_t i);
    Segment segment(std::size_t i) const { return Segment::from_view(grid_, particle(i)); }
    SegmentBatch batch() const;
    std::span<const double> flat() const { return data_; }

    /// Mean of xi(0) over the particles.
    std::vector<double> endpoint_mean() const;
    /// Mean of ||xi||_inf^2.
    double second_moment() const;

private:
    PathGrid grid_;
    int dim_;
    std::size_t n_;
    std::vector<double> data_;
};

}  // namespace mvlab
