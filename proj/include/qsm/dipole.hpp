#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <memory>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

using Axis3 = std::array<double, 3>;

struct DipoleOptions {
    // Zero-pad by half the grid on each side before the FFT so the circular
    // convolution does not wrap sources around the boundary.
    bool pad = false;
};

// Fourier-domain unit dipole D(k) = 1/3 - (k.b0)^2 / |k|^2 with D(0) = 0,
// applied as Phi = F^-1 D F. D is real and even, so Phi is self-adjoint.
// Copies are cheap.
class DipoleOperator {
public:
    DipoleOperator(const KGrid &grid, Axis3 b0_axis = {0.0, 0.0, 1.0}, DipoleOptions opts = {});

    const Dims &dims() const noexcept { return dims_; }
    const VoxelSize &voxel_size() const noexcept { return voxel_; }
    const Axis3 &b0_axis() const noexcept { return b0_; }
    bool padded() const noexcept { return opts_.pad; }
    // Grid the FFT runs on (equals dims() unless padded).
    const Dims &fft_dims() const noexcept { return fft_dims_; }

    // Kernel over the full FFT grid, z fastest.
    const std::vector<double> &kernel() const noexcept { return *kernel_; }
    double kernel_at(std::size_t i, std::size_t j, std::size_t k) const { return (*kernel_)[fft_dims_.index(i, j, k)]; }

    Volume3D forward(const Volume3D &chi) const;
    Volume3D adjoint(const Volume3D &field) const;

    // Raw-buffer variants used by the autodiff tape; `out` may alias `in`.
    void apply(const double *in, double *out) const;
    // Multiplies the spectrum of `in` by an arbitrary real even filter on the
    // half-spectrum layout (size fft::half_size(fft_dims())).
    void apply_filter(const std::vector<double> &half_filter, const double *in, double *out) const;

    // Kernel restricted to the r2c half spectrum.
    const std::vector<double> &half_kernel() const noexcept { return *half_kernel_; }

private:
    Dims dims_;
    VoxelSize voxel_;
    Dims fft_dims_;
    Axis3 b0_;
    DipoleOptions opts_;
    std::array<std::size_t, 3> offset_{};
    // Immutable after construction, so copies share them.
    std::shared_ptr<const std::vector<double>> kernel_;
    std::shared_ptr<const std::vector<double>> half_kernel_;
};

DipoleOperator build_dipole(const KGrid &grid, Axis3 b0_axis = {0.0, 0.0, 1.0}, DipoleOptions opts = {});

// Adds i.i.d. N(mean, variance) samples; std::mt19937_64 seeded with `seed`.
Volume3D add_gaussian_noise(const Volume3D &v, double mean, double variance, std::uint64_t seed);

} // namespace qsm
