#include "mvlab/measure.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvlab {

namespace {
constexpr std::size_t kReduceBlock = 1024;
}

void endpoint_mean(const SegmentBatch& batch, std::span<double> out) {
    const auto d = static_cast<std::size_t>(batch.dim);
    if (out.size() != d) throw std::invalid_argument("endpoint_mean: output size must equal the dimension");
    if (batch.count == 0) throw std::invalid_argument("endpoint_mean: empty batch");
    const std::size_t blocks = (batch.count + kReduceBlock - 1) / kReduceBlock;
    std::vector<double> partial(blocks * d, 0.0);
    const std::size_t last = (batch.points - 1) * d;
#pragma omp parallel for schedule(static) if (blocks > 1)
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t end = std::min(batch.count, (b + 1) * kReduceBlock);
        double* acc = partial.data() + b * d;
        for (std::size_t i = b * kReduceBlock; i < end; ++i) {
            const double* x = batch.base + i * batch.stride + last;
            for (std::size_t c = 0; c < d; ++c) acc[c] += x[c];
        }
    }
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t c = 0; c < d; ++c) out[c] += partial[b * d + c];
    }
    for (double& v : out) v /= static_cast<double>(batch.count);
}

EmpiricalPathMeasure::EmpiricalPathMeasure(PathGrid grid, int dim, std::size_t n)
    : grid_(grid), dim_(dim), n_(n), data_(n * grid.points() * static_cast<std::size_t>(dim), 0.0) {
    if (n == 0) throw std::invalid_argument("EmpiricalPathMeasure: N must be >= 1");
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("EmpiricalPathMeasure: bad dimension");
}

EmpiricalPathMeasure::EmpiricalPathMeasure(PathGrid grid, int dim, std::vector<double> flat)
    : grid_(grid), dim_(dim), n_(0), data_(std::move(flat)) {
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("EmpiricalPathMeasure: bad dimension");
    const std::size_t per = grid.points() * static_cast<std::size_t>(dim);
    if (data_.empty() || data_.size() % per != 0) {
        throw std::invalid_argument("EmpiricalPathMeasure: flat data is not a whole number of segments");
    }
    n_ = data_.size() / per;
    for (double x : data_) {
        if (!std::isfinite(x)) throw std::invalid_argument("EmpiricalPathMeasure: non-finite entry");
    }
}

EmpiricalPathMeasure::EmpiricalPathMeasure(const std::vector<Segment>& particles)
    : grid_(particles.empty() ? throw std::invalid_argument("EmpiricalPathMeasure: N must be >= 1")
                              : particles.front().grid()),
      dim_(particles.front().dim()),
      n_(particles.size()) {
    data_.reserve(n_ * grid_.points() * static_cast<std::size_t>(dim_));
    for (const auto& s : particles) {
        if (!(s.grid() == grid_) || s.dim() != dim_) {
            throw std::invalid_argument("EmpiricalPathMeasure: segments must share grid and dimension");
        }
        data_.insert(data_.end(), s.values().begin(), s.values().end());
    }
}

EmpiricalPathMeasure EmpiricalPathMeasure::from_batch(PathGrid grid, const SegmentBatch& batch) {
    if (batch.points != grid.points()) throw std::invalid_argument("from_batch: grid mismatch");
    EmpiricalPathMeasure out(grid, batch.dim, batch.count);
    const std::size_t per = batch.points * static_cast<std::size_t>(batch.dim);
    for (std::size_t i = 0; i < batch.count; ++i) {
        std::copy_n(batch.base + i * batch.stride, per, out.data_.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

std::span<double> EmpiricalPathMeasure::particle_data(std::size_t i) {
    const std::size_t per = grid_.points() * static_cast<std::size_t>(dim_);
    return std::span<double>(data_).subspan(i * per, per);
}

SegmentBatch EmpiricalPathMeasure::batch() const {
    const std::size_t per = grid_.points() * static_cast<std::size_t>(dim_);
    return {data_.data(), n_, per, grid_.points(), dim_};
}

std::vector<double> EmpiricalPathMeasure::endpoint_mean() const {
    std::vector<double> mean(static_cast<std::size_t>(dim_), 0.0);
    mvlab::endpoint_mean(batch(), mean);
    return mean;
}

double EmpiricalPathMeasure::second_moment() const {
    double s = 0.0;
    const auto b = batch();
    for (std::size_t i = 0; i < n_; ++i) {
        const double r = sup_norm(b[i]);
        s += r * r;
    }
    return s / static_cast<double>(n_);
}

}  // namespace mvlab
