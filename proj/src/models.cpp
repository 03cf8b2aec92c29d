#include "mvlab/models.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>

namespace mvlab {

namespace {

double spectral_norm(const Matrix& m) {
    if (m.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(m);
    return svd.singularValues()(0);
}

std::vector<double> row_major(const Matrix& m) {
    std::vector<double> out(static_cast<std::size_t>(m.rows() * m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    }
    return out;
}

void require_square(const Matrix& m, int d, const char* name) {
    if (m.rows() != d || m.cols() != d) {
        throw std::invalid_argument(std::string(name) + " must be " + std::to_string(d) + "x" + std::to_string(d));
    }
    if (!m.allFinite()) throw std::invalid_argument(std::string(name) + " has non-finite entries");
}

void matvec_add(const std::vector<double>& a, std::size_t d, std::span<const double> x, std::span<double> out) {
    for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a[i * d + j] * x[j];
        out[i] += s;
    }
}

ModelDefinition linear_definition(std::string name, int d, const Matrix& A0, const Matrix& A1, const Matrix& B,
                                  const Matrix& sigma0, DiffusionKind kind, double r0) {
    if (d < 1 || d > kMaxDim) throw std::invalid_argument("model dimension must be in [1, 16]");
    require_square(A0, d, "A0");
    require_square(A1, d, "A1");
    require_square(B, d, "B");
    require_square(sigma0, d, "sigma0");

    const double nA0 = spectral_norm(A0), nA1 = spectral_norm(A1), nB = spectral_norm(B);
    const Matrix sym = -(A0 + A0.transpose());
    const double s = Eigen::SelfAdjointEigenSolver<Matrix>(sym).eigenvalues()(0);

    RegularityConstants c;
    c.kappa = std::max(0.0, s - nA1 - 0.5 * nB);
    c.beta1 = nA1 + std::max(0.0, nA1 + 0.5 * nB - s);
    c.beta2 = 2.0 * nB;
    c.kappa2 = nA0 + nA1 + nB;
    c.K = std::max(nB * nB, sigma0.squaredNorm());
    c.kappa0 = c.K;

    ModelDefinition def;
    def.name = std::move(name);
    def.dim = d;
    def.kind = kind;
    def.delay = r0;
    if (kind != DiffusionKind::none) {
        Eigen::JacobiSVD<Matrix> svd(sigma0);
        const auto& sv = svd.singularValues();
        if (!(sv(d - 1) > 1e-12 * std::max(1.0, sv(0)))) {
            throw std::invalid_argument("sigma0 is singular");
        }
        c.lambda = 1.0 / sv(d - 1);
        def.invertible_diffusion = true;
    }
    def.constants = c;

    const auto ud = static_cast<std::size_t>(d);
    auto a0 = row_major(A0), a1 = row_major(A1), b = row_major(B), sg = row_major(sigma0);
    const bool mean_field = nB > 0.0;
    def.feature_count = mean_field ? ud : 0;
    if (mean_field) {
        def.features = [](const SegmentBatch& mu, std::span<double> out) { endpoint_mean(mu, out); };
    }
    def.drift = [a0, a1, b, ud, mean_field](double, SegmentView xi, std::span<const double> feats,
                                            std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        matvec_add(a0, ud, xi.endpoint(), out);
        matvec_add(a1, ud, xi.start(), out);
        if (mean_field) matvec_add(b, ud, feats, out);
    };
    def.drift_derivative = [a0, a1, ud](double, SegmentView, SegmentView dir, std::span<const double>,
                                        std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        matvec_add(a0, ud, dir.endpoint(), out);
        matvec_add(a1, ud, dir.start(), out);
    };
    def.diffusion = [sg](double, std::span<const double>, std::span<double> out) {
        std::copy(sg.begin(), sg.end(), out.begin());
    };
    return def;
}

}  // namespace

void RegularityConstants::validate() const {
    const double all[] = {alpha1, alpha2, beta1, beta2, kappa, K, kappa0, kappa1, kappa2, kappa3, lambda};
    for (double v : all) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("regularity constants must be finite and nonnegative");
        }
    }
}

CoefficientModel::CoefficientModel(ModelDefinition def)
    : def_(std::move(def)), fd_warning_(std::make_shared<std::once_flag>()) {
    if (def_.dim < 1 || def_.dim > kMaxDim) throw std::invalid_argument("model dimension must be in [1, 16]");
    if (!def_.drift) throw std::invalid_argument("model '" + def_.name + "' has no drift");
    if (def_.kind != DiffusionKind::none && !def_.diffusion) {
        throw std::invalid_argument("model '" + def_.name + "' declares noise but no diffusion");
    }
    if (def_.feature_count > 0 && !def_.features) {
        throw std::invalid_argument("model '" + def_.name + "' declares features but no feature map");
    }
    def_.constants.validate();
    if (def_.kind == DiffusionKind::additive && (def_.constants.kappa1 != 0.0 || def_.constants.kappa3 != 0.0)) {
        throw std::invalid_argument("additive-noise model must have kappa1 = kappa3 = 0");
    }
}

void CoefficientModel::check_grid(const PathGrid& grid) const {
    if (def_.delay && std::abs(*def_.delay - grid.r0()) > 1e-12 * grid.r0()) {
        throw std::invalid_argument("model '" + def_.name + "' was built for r0 = " + std::to_string(*def_.delay) +
                                    ", grid has r0 = " + std::to_string(grid.r0()));
    }
}

void CoefficientModel::features(const SegmentBatch& mu, std::span<double> out) const {
    if (out.size() != def_.feature_count) throw std::invalid_argument("features: wrong output size");
    if (def_.feature_count == 0) return;
    if (mu.dim != def_.dim) throw std::invalid_argument("features: dimension mismatch");
    def_.features(mu, out);
}

std::vector<double> CoefficientModel::features(const EmpiricalPathMeasure& mu) const {
    std::vector<double> out(def_.feature_count);
    features(mu.batch(), out);
    return out;
}

void CoefficientModel::drift(double t, SegmentView xi, std::span<const double> feats, std::span<double> out) const {
    def_.drift(t, xi, feats, out);
}

std::vector<double> CoefficientModel::drift(double t, const Segment& xi, const EmpiricalPathMeasure& mu) const {
    if (xi.dim() != def_.dim || mu.dim() != def_.dim) throw std::invalid_argument("drift: dimension mismatch");
    const auto feats = features(mu);
    std::vector<double> out(static_cast<std::size_t>(def_.dim));
    drift(t, xi.view(), feats, out);
    return out;
}

void CoefficientModel::diffusion(double t, std::span<const double> x, std::span<double> out) const {
    if (def_.kind == DiffusionKind::none) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    def_.diffusion(t, x, out);
}

Matrix CoefficientModel::diffusion_matrix(double t, std::span<const double> x) const {
    const auto d = static_cast<std::size_t>(def_.dim);
    std::vector<double> buf(d * d);
    diffusion(t, x, buf);
    Matrix m(def_.dim, def_.dim);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = buf[i * d + j];
    }
    return m;
}

Matrix CoefficientModel::diffusion_inverse(double t, std::span<const double> x) const {
    const Matrix s = diffusion_matrix(t, x);
    Eigen::FullPivLU<Matrix> lu(s);
    if (def_.kind == DiffusionKind::none || !lu.isInvertible()) {
        throw std::domain_error("diffusion of model '" + def_.name + "' is singular");
    }
    return lu.inverse();
}

void CoefficientModel::directional_drift(double t, SegmentView xi, SegmentView direction,
                                         std::span<const double> feats, std::span<double> out) const {
    if (def_.drift_derivative) {
        def_.drift_derivative(t, xi, direction, feats, out);
        return;
    }
    std::call_once(*fd_warning_, [this] {
        std::cerr << "warning: model '" << def_.name
                  << "' has no drift derivative; using central finite differences\n";
    });
    double scale = 0.0, dir_scale = 0.0;
    for (double v : xi.data) scale = std::max(scale, std::abs(v));
    for (double v : direction.data) dir_scale = std::max(dir_scale, std::abs(v));
    if (dir_scale == 0.0) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    const double step = 1e-5 * std::max(1.0, scale) / dir_scale;
    std::vector<double> plus(xi.data.begin(), xi.data.end()), minus = plus;
    for (std::size_t k = 0; k < plus.size(); ++k) {
        plus[k] += step * direction.data[k];
        minus[k] -= step * direction.data[k];
    }
    const auto d = static_cast<std::size_t>(def_.dim);
    double bp[kMaxDim], bm[kMaxDim];
    def_.drift(t, {plus, xi.dim}, feats, std::span<double>(bp, d));
    def_.drift(t, {minus, xi.dim}, feats, std::span<double>(bm, d));
    for (std::size_t i = 0; i < d; ++i) out[i] = (bp[i] - bm[i]) / (2.0 * step);
}

CoefficientModel make_linear_meanfield_delay(int d, const Matrix& A0, const Matrix& A1, const Matrix& B,
                                             const Matrix& sigma0, double r0) {
    return CoefficientModel(linear_definition("linear_meanfield_delay", d, A0, A1, B, sigma0,
                                              DiffusionKind::additive, r0));
}

CoefficientModel make_ou(int d, double theta, double sigma, double r0) {
    const Matrix id = Matrix::Identity(d, d);
    const Matrix zero = Matrix::Zero(d, d);
    return CoefficientModel(linear_definition("ou", d, -theta * id, zero, zero, sigma * id,
                                              sigma == 0.0 ? DiffusionKind::none : DiffusionKind::additive, r0));
}

CoefficientModel make_constant_drift(std::span<const double> c, double sigma, double r0) {
    const int d = static_cast<int>(c.size());
    if (d < 1 || d > kMaxDim) throw std::invalid_argument("model dimension must be in [1, 16]");
    ModelDefinition def;
    def.name = "constant_drift";
    def.dim = d;
    def.delay = r0;
    def.kind = sigma == 0.0 ? DiffusionKind::none : DiffusionKind::additive;
    double c2 = 0.0;
    for (double v : c) c2 += v * v;
    def.constants.K = c2 + d * sigma * sigma;
    def.constants.kappa0 = def.constants.K;
    if (sigma != 0.0) {
        def.constants.lambda = 1.0 / std::abs(sigma);
        def.invertible_diffusion = true;
    }
    std::vector<double> cv(c.begin(), c.end());
    def.drift = [cv](double, SegmentView, std::span<const double>, std::span<double> out) {
        std::copy(cv.begin(), cv.end(), out.begin());
    };
    def.drift_derivative = [](double, SegmentView, SegmentView, std::span<const double>, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
    };
    const auto ud = static_cast<std::size_t>(d);
    def.diffusion = [sigma, ud](double, std::span<const double>, std::span<double> out) {
        std::fill(out.begin(), out.end(), 0.0);
        for (std::size_t i = 0; i < ud; ++i) out[i * ud + i] = sigma;
    };
    return CoefficientModel(std::move(def));
}

TestFunction TestFunction::constant(double c) {
    return {"constant",
            [c](std::span<const double>) { return c; },
            [](std::span<const double>, std::span<double> g) { std::fill(g.begin(), g.end(), 0.0); },
            [](std::span<const double>, std::span<double> h) { std::fill(h.begin(), h.end(), 0.0); }};
}

TestFunction TestFunction::coordinate(int i) {
    if (i < 0) throw std::invalid_argument("coordinate index must be nonnegative");
    const auto ui = static_cast<std::size_t>(i);
    return {"coordinate",
            [ui](std::span<const double> x) {
                if (ui >= x.size()) throw std::invalid_argument("coordinate index out of range");
                return x[ui];
            },
            [ui](std::span<const double> x, std::span<double> g) {
                if (ui >= x.size()) throw std::invalid_argument("coordinate index out of range");
                std::fill(g.begin(), g.end(), 0.0);
                g[ui] = 1.0;
            },
            [](std::span<const double>, std::span<double> h) { std::fill(h.begin(), h.end(), 0.0); }};
}

TestFunction TestFunction::squared_norm() {
    return {"squared_norm",
            [](std::span<const double> x) {
                double s = 0.0;
                for (double v : x) s += v * v;
                return s;
            },
            [](std::span<const double> x, std::span<double> g) {
                for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.0 * x[i];
            },
            [](std::span<const double> x, std::span<double> h) {
                const std::size_t d = x.size();
                std::fill(h.begin(), h.end(), 0.0);
                for (std::size_t i = 0; i < d; ++i) h[i * d + i] = 2.0;
            }};
}

TestFunction TestFunction::gaussian_bump(std::vector<double> center, double width) {
    if (!(width > 0.0)) throw std::invalid_argument("gaussian_bump: width must be positive");
    const double w2 = width * width;
    auto value = [center, w2](std::span<const double> x) {
        if (x.size() != center.size()) throw std::invalid_argument("gaussian_bump: dimension mismatch");
        double r = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) r += (x[i] - center[i]) * (x[i] - center[i]);
        return std::exp(-r / (2.0 * w2));
    };
    auto gradient = [value, center, w2](std::span<const double> x, std::span<double> g) {
        const double f = value(x);
        for (std::size_t i = 0; i < x.size(); ++i) g[i] = -f * (x[i] - center[i]) / w2;
    };
    auto hessian = [value, center, w2](std::span<const double> x, std::span<double> h) {
        const double f = value(x);
        const std::size_t d = x.size();
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                h[i * d + j] = f * ((x[i] - center[i]) * (x[j] - center[j]) / (w2 * w2) - (i == j ? 1.0 / w2 : 0.0));
            }
        }
    };
    return {"gaussian_bump", value, gradient, hessian};
}

TestFunction linear_combination(double a, const TestFunction& f, double c, const TestFunction& g) {
    return {"linear_combination",
            [=](std::span<const double> x) { return a * f.value(x) + c * g.value(x); },
            [=](std::span<const double> x, std::span<double> out) {
                double buf[kMaxDim];
                std::span<double> tmp(buf, out.size());
                f.gradient(x, out);
                g.gradient(x, tmp);
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + c * tmp[i];
            },
            [=](std::span<const double> x, std::span<double> out) {
                double buf[kMaxDim * kMaxDim];
                std::span<double> tmp(buf, out.size());
                f.hessian(x, out);
                g.hessian(x, tmp);
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + c * tmp[i];
            }};
}

double generator_apply(const CoefficientModel& model, double t, SegmentView xi, std::span<const double> feats,
                       const TestFunction& f) {
    const int dim = model.dim();
    if (xi.dim != dim) throw std::invalid_argument("generator_apply: segment dimension differs from model");
    if (feats.size() != model.feature_count()) throw std::invalid_argument("generator_apply: wrong feature count");
    const auto d = static_cast<std::size_t>(dim);
    const auto x = xi.endpoint();
    double b[kMaxDim], grad[kMaxDim], sig[kMaxDim * kMaxDim], hess[kMaxDim * kMaxDim];
    model.drift(t, xi, feats, std::span<double>(b, d));
    f.gradient(x, std::span<double>(grad, d));
    double first = 0.0;
    for (std::size_t i = 0; i < d; ++i) first += b[i] * grad[i];
    if (model.diffusion_kind() == DiffusionKind::none) return first;
    model.diffusion(t, x, std::span<double>(sig, d * d));
    f.hessian(x, std::span<double>(hess, d * d));
    double second = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double a = 0.0;
            for (std::size_t k = 0; k < d; ++k) a += sig[i * d + k] * sig[j * d + k];
            second += a * hess[i * d + j];
        }
    }
    return 0.5 * second + first;
}

double generator_apply(const CoefficientModel& model, double t, const Segment& xi, const EmpiricalPathMeasure& mu,
                       const TestFunction& f) {
    if (mu.dim() != model.dim()) throw std::invalid_argument("generator_apply: measure dimension differs from model");
    const auto feats = model.features(mu);
    return generator_apply(model, t, xi.view(), feats, f);
}

}  // namespace mvlab
