#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qsm/error.hpp"

namespace qsm {

// Grid extent. Storage order is x-major, z fastest:
//   index(i, j, k) = (i * ny + j) * nz + k
struct Dims {
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::size_t nz = 0;

    std::size_t size() const noexcept { return nx * ny * nz; }
    std::size_t operator[](std::size_t axis) const noexcept { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const noexcept { return (i * ny + j) * nz + k; }
    bool operator==(const Dims &) const = default;
};

// Millimetres per voxel along x, y, z.
struct VoxelSize {
    double dx = 1.0;
    double dy = 1.0;
    double dz = 1.0;

    double operator[](std::size_t axis) const noexcept { return axis == 0 ? dx : (axis == 1 ? dy : dz); }
    bool operator==(const VoxelSize &) const = default;
};

class Volume3D {
public:
    Volume3D() = default;
    Volume3D(Dims dims, VoxelSize voxel = {}, double fill = 0.0);
    Volume3D(Dims dims, VoxelSize voxel, std::vector<double> data);

    const Dims &dims() const noexcept { return dims_; }
    const VoxelSize &voxel_size() const noexcept { return voxel_; }
    std::size_t size() const noexcept { return data_.size(); }

    double &operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[dims_.index(i, j, k)]; }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const { return data_[dims_.index(i, j, k)]; }
    double &operator[](std::size_t n) { return data_[n]; }
    double operator[](std::size_t n) const { return data_[n]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double> &values() noexcept { return data_; }
    const std::vector<double> &values() const noexcept { return data_; }

    bool all_finite() const noexcept;
    bool operator==(const Volume3D &) const = default;

private:
    Dims dims_;
    VoxelSize voxel_;
    std::vector<double> data_;
};

class Mask3D {
public:
    Mask3D() = default;
    explicit Mask3D(Dims dims, bool fill = false);
    Mask3D(Dims dims, std::vector<std::uint8_t> data);

    const Dims &dims() const noexcept { return dims_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool operator[](std::size_t n) const { return data_[n] != 0; }
    void set(std::size_t n, bool v) { data_[n] = v ? 1 : 0; }
    bool operator()(std::size_t i, std::size_t j, std::size_t k) const { return data_[dims_.index(i, j, k)] != 0; }

    std::span<const std::uint8_t> data() const noexcept { return data_; }
    std::size_t count() const noexcept;
    bool operator==(const Mask3D &) const = default;

private:
    Dims dims_;
    std::vector<std::uint8_t> data_;
};

class ComplexVolume3D {
public:
    ComplexVolume3D() = default;
    ComplexVolume3D(Dims dims, VoxelSize voxel = {});

    const Dims &dims() const noexcept { return dims_; }
    const VoxelSize &voxel_size() const noexcept { return voxel_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::complex<double> &operator[](std::size_t n) { return data_[n]; }
    const std::complex<double> &operator[](std::size_t n) const { return data_[n]; }
    std::complex<double> &operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[dims_.index(i, j, k)]; }
    const std::complex<double> &operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[dims_.index(i, j, k)];
    }
    std::span<std::complex<double>> data() noexcept { return data_; }
    std::span<const std::complex<double>> data() const noexcept { return data_; }

private:
    Dims dims_;
    VoxelSize voxel_;
    std::vector<std::complex<double>> data_;
};

// Discrete frequencies in cycles/mm with the standard DFT layout: 0 at index 0,
// negative frequencies in the upper half (for even n, index n/2 holds -n/2).
struct KGrid {
    Dims dims;
    VoxelSize voxel;
    std::vector<double> kx, ky, kz;

    KGrid(Dims d, VoxelSize v);
    const std::vector<double> &axis(std::size_t a) const { return a == 0 ? kx : (a == 1 ? ky : kz); }
};

double dft_frequency(std::size_t index, std::size_t n, double spacing);

// Unnormalised forward DFT.
ComplexVolume3D fft3_forward(const Volume3D &v);

// Inverse DFT with 1/N scaling. Throws NumericalConsistency if the residual
// imaginary part exceeds 1e-8 of the real part (relative L2).
Volume3D fft3_inverse(const ComplexVolume3D &s);

// 6-neighbourhood erosion applied `radius` times. Voxels outside the grid count as false.
Mask3D erode_mask(const Mask3D &m, std::size_t radius);

Mask3D mask_from_nonzero(const Volume3D &v);
Volume3D apply_mask(const Volume3D &v, const Mask3D &m);

void require_same_dims(const Dims &a, const Dims &b, const char *what);

double dot(const Volume3D &a, const Volume3D &b);
double norm2(const Volume3D &v);

// Real-input FFT helpers on raw z-fastest buffers. The half spectrum has
// nz/2 + 1 entries along z. Plans are cached per grid and shared across threads.
namespace fft {
std::size_t half_size(const Dims &d) noexcept;
void r2c(const Dims &d, const double *in, std::complex<double> *out);
// Unnormalised; caller divides by N. `in` is clobbered.
void c2r(const Dims &d, std::complex<double> *in, double *out);
} // namespace fft

} // namespace qsm
