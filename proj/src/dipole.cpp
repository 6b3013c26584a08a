#include "qsm/dipole.hpp"

#include <cmath>
#include <random>

namespace qsm {

namespace {

std::vector<double> build_kernel(const KGrid &g, const Axis3 &b) {
    const Dims &d = g.dims;
    std::vector<double> ker(d.size());
    for (std::size_t i = 0; i < d.nx; ++i)
        for (std::size_t j = 0; j < d.ny; ++j)
            for (std::size_t k = 0; k < d.nz; ++k) {
                const double kx = g.kx[i], ky = g.ky[j], kz = g.kz[k];
                const double k2 = kx * kx + ky * ky + kz * kz;
                double v = 0.0;
                if (k2 > 0.0) {
                    const double kb = kx * b[0] + ky * b[1] + kz * b[2];
                    v = 1.0 / 3.0 - (kb * kb) / k2;
                }
                ker[d.index(i, j, k)] = v;
            }
    return ker;
}

} // namespace

DipoleOperator::DipoleOperator(const KGrid &grid, Axis3 b0_axis, DipoleOptions opts)
    : dims_(grid.dims), voxel_(grid.voxel), b0_(b0_axis), opts_(opts) {
    const double n = std::sqrt(b0_[0] * b0_[0] + b0_[1] * b0_[1] + b0_[2] * b0_[2]);
    if (!(std::abs(n - 1.0) <= 1e-9)) fail(ErrorCode::InvalidInput, "b0 axis must have unit norm");

    if (opts_.pad) {
        fft_dims_ = {dims_.nx + 2 * (dims_.nx / 2), dims_.ny + 2 * (dims_.ny / 2), dims_.nz + 2 * (dims_.nz / 2)};
        offset_ = {dims_.nx / 2, dims_.ny / 2, dims_.nz / 2};
    } else {
        fft_dims_ = dims_;
    }
    auto full = std::make_shared<std::vector<double>>(
        build_kernel(opts_.pad ? KGrid(fft_dims_, voxel_) : grid, b0_));

    const std::size_t hz = fft_dims_.nz / 2 + 1;
    auto half = std::make_shared<std::vector<double>>(fft::half_size(fft_dims_));
    for (std::size_t i = 0; i < fft_dims_.nx; ++i)
        for (std::size_t j = 0; j < fft_dims_.ny; ++j)
            for (std::size_t k = 0; k < hz; ++k)
                (*half)[(i * fft_dims_.ny + j) * hz + k] = (*full)[fft_dims_.index(i, j, k)];
    kernel_ = std::move(full);
    half_kernel_ = std::move(half);
}

DipoleOperator build_dipole(const KGrid &grid, Axis3 b0_axis, DipoleOptions opts) {
    return DipoleOperator(grid, b0_axis, opts);
}

void DipoleOperator::apply_filter(const std::vector<double> &half_filter, const double *in, double *out) const {
    const Dims &f = fft_dims_;
    std::vector<double> buf;
    const double *src = in;
    if (opts_.pad) {
        buf.assign(f.size(), 0.0);
        for (std::size_t i = 0; i < dims_.nx; ++i)
            for (std::size_t j = 0; j < dims_.ny; ++j)
                for (std::size_t k = 0; k < dims_.nz; ++k)
                    buf[f.index(i + offset_[0], j + offset_[1], k + offset_[2])] = in[dims_.index(i, j, k)];
        src = buf.data();
    }
    std::vector<std::complex<double>> spec(fft::half_size(f));
    fft::r2c(f, src, spec.data());
    const double scale = 1.0 / static_cast<double>(f.size());
    for (std::size_t n = 0; n < spec.size(); ++n) spec[n] *= half_filter[n] * scale;

    if (opts_.pad) {
        fft::c2r(f, spec.data(), buf.data());
        for (std::size_t i = 0; i < dims_.nx; ++i)
            for (std::size_t j = 0; j < dims_.ny; ++j)
                for (std::size_t k = 0; k < dims_.nz; ++k)
                    out[dims_.index(i, j, k)] = buf[f.index(i + offset_[0], j + offset_[1], k + offset_[2])];
    } else if (in == out) {
        std::vector<double> tmp(f.size());
        fft::c2r(f, spec.data(), tmp.data());
        std::copy(tmp.begin(), tmp.end(), out);
    } else {
        fft::c2r(f, spec.data(), out);
    }
}

void DipoleOperator::apply(const double *in, double *out) const { apply_filter(*half_kernel_, in, out); }

Volume3D DipoleOperator::forward(const Volume3D &chi) const {
    require_same_dims(chi.dims(), dims_, "dipole forward");
    Volume3D out(dims_, chi.voxel_size());
    apply(chi.values().data(), out.values().data());
    return out;
}

Volume3D DipoleOperator::adjoint(const Volume3D &field) const {
    // D is real and even: the adjoint is the operator itself.
    require_same_dims(field.dims(), dims_, "dipole adjoint");
    Volume3D out(dims_, field.voxel_size());
    apply(field.values().data(), out.values().data());
    return out;
}

Volume3D add_gaussian_noise(const Volume3D &v, double mean, double variance, std::uint64_t seed) {
    if (!(variance >= 0.0) || !std::isfinite(variance)) fail(ErrorCode::InvalidInput, "noise variance must be >= 0");
    Volume3D out = v;
    if (variance == 0.0) {
        for (auto &x : out.values()) x += mean;
        return out;
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(mean, std::sqrt(variance));
    for (auto &x : out.values()) x += dist(rng);
    return out;
}

} // namespace qsm
