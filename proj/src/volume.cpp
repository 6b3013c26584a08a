#include "qsm/volume.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <string>
#include <tuple>

namespace qsm {

const char *error_code_name(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidInput: return "invalid-input";
    case ErrorCode::DimensionMismatch: return "dimension-mismatch";
    case ErrorCode::NumericalConsistency: return "numerical-consistency";
    case ErrorCode::DegenerateDistribution: return "degenerate-distribution";
    case ErrorCode::TrainingDiverged: return "training-diverged";
    case ErrorCode::PlacementFailed: return "placement-failed";
    case ErrorCode::Io: return "io";
    case ErrorCode::BadMagic: return "bad-magic";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::UnsupportedVersion: return "unsupported-version";
    case ErrorCode::ShapeMismatch: return "shape-mismatch";
    case ErrorCode::MissingEntry: return "missing-entry";
    case ErrorCode::Config: return "config";
    }
    return "unknown";
}

namespace {

void check_dims(const Dims &d) {
    if (d.nx == 0 || d.ny == 0 || d.nz == 0)
        fail(ErrorCode::InvalidInput, "volume dimensions must be positive");
}

void check_voxel(const VoxelSize &v) {
    if (!(v.dx > 0.0 && v.dy > 0.0 && v.dz > 0.0))
        fail(ErrorCode::InvalidInput, "voxel sizes must be strictly positive");
}

} // namespace

Volume3D::Volume3D(Dims dims, VoxelSize voxel, double fill) : dims_(dims), voxel_(voxel) {
    check_dims(dims_);
    check_voxel(voxel_);
    data_.assign(dims_.size(), fill);
}

Volume3D::Volume3D(Dims dims, VoxelSize voxel, std::vector<double> data)
    : dims_(dims), voxel_(voxel), data_(std::move(data)) {
    check_dims(dims_);
    check_voxel(voxel_);
    if (data_.size() != dims_.size())
        fail(ErrorCode::InvalidInput, "data length " + std::to_string(data_.size()) + " does not match dims (" +
                                          std::to_string(dims_.size()) + ")");
}

bool Volume3D::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Mask3D::Mask3D(Dims dims, bool fill) : dims_(dims) {
    check_dims(dims_);
    data_.assign(dims_.size(), fill ? 1 : 0);
}

Mask3D::Mask3D(Dims dims, std::vector<std::uint8_t> data) : dims_(dims), data_(std::move(data)) {
    check_dims(dims_);
    if (data_.size() != dims_.size()) fail(ErrorCode::InvalidInput, "mask length does not match dims");
    for (auto &b : data_) b = b ? 1 : 0;
}

std::size_t Mask3D::count() const noexcept {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

ComplexVolume3D::ComplexVolume3D(Dims dims, VoxelSize voxel) : dims_(dims), voxel_(voxel) {
    check_dims(dims_);
    check_voxel(voxel_);
    data_.assign(dims_.size(), {0.0, 0.0});
}

double dft_frequency(std::size_t index, std::size_t n, double spacing) {
    const auto i = static_cast<long long>(index);
    const auto nn = static_cast<long long>(n);
    const long long f = (2 * i < nn) ? i : i - nn;
    return static_cast<double>(f) / (static_cast<double>(n) * spacing);
}

KGrid::KGrid(Dims d, VoxelSize v) : dims(d), voxel(v) {
    check_dims(d);
    check_voxel(v);
    auto fill = [](std::vector<double> &k, std::size_t n, double h) {
        k.resize(n);
        for (std::size_t i = 0; i < n; ++i) k[i] = dft_frequency(i, n, h);
    };
    fill(kx, d.nx, v.dx);
    fill(ky, d.ny, v.dy);
    fill(kz, d.nz, v.dz);
}

// ---------------------------------------------------------------------------
// FFTW plan cache. Planning is not thread-safe in FFTW, execution with the
// new-array interface is; plans are created under a lock and never destroyed.

namespace {

enum class PlanKind { C2CForward, C2CBackward, R2C, C2R };

struct PlanCache {
    std::mutex mu;
    std::map<std::tuple<int, std::size_t, std::size_t, std::size_t>, fftw_plan> plans;

    fftw_plan get(PlanKind kind, const Dims &d) {
        std::lock_guard lock(mu);
        auto key = std::make_tuple(static_cast<int>(kind), d.nx, d.ny, d.nz);
        if (auto it = plans.find(key); it != plans.end()) return it->second;

        const int nx = static_cast<int>(d.nx), ny = static_cast<int>(d.ny), nz = static_cast<int>(d.nz);
        const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
        fftw_plan p = nullptr;
        const std::size_t nc = kind == PlanKind::R2C || kind == PlanKind::C2R ? fft::half_size(d) : d.size();
        auto *cbuf = fftw_alloc_complex(nc);
        auto *cbuf2 = fftw_alloc_complex(d.size());
        auto *rbuf = fftw_alloc_real(d.size());
        switch (kind) {
        case PlanKind::C2CForward: p = fftw_plan_dft_3d(nx, ny, nz, cbuf, cbuf2, FFTW_FORWARD, flags); break;
        case PlanKind::C2CBackward: p = fftw_plan_dft_3d(nx, ny, nz, cbuf, cbuf2, FFTW_BACKWARD, flags); break;
        case PlanKind::R2C: p = fftw_plan_dft_r2c_3d(nx, ny, nz, rbuf, cbuf, flags); break;
        case PlanKind::C2R: p = fftw_plan_dft_c2r_3d(nx, ny, nz, cbuf, rbuf, flags); break;
        }
        fftw_free(cbuf);
        fftw_free(cbuf2);
        fftw_free(rbuf);
        if (!p) fail(ErrorCode::NumericalConsistency, "FFTW failed to create a plan");
        plans.emplace(key, p);
        return p;
    }
};

PlanCache &plan_cache() {
    static PlanCache cache;
    return cache;
}

fftw_complex *as_fftw(std::complex<double> *p) { return reinterpret_cast<fftw_complex *>(p); }

} // namespace

namespace fft {

std::size_t half_size(const Dims &d) noexcept { return d.nx * d.ny * (d.nz / 2 + 1); }

void r2c(const Dims &d, const double *in, std::complex<double> *out) {
    fftw_plan p = plan_cache().get(PlanKind::R2C, d);
    fftw_execute_dft_r2c(p, const_cast<double *>(in), as_fftw(out));
}

void c2r(const Dims &d, std::complex<double> *in, double *out) {
    fftw_plan p = plan_cache().get(PlanKind::C2R, d);
    fftw_execute_dft_c2r(p, as_fftw(in), out);
}

} // namespace fft

ComplexVolume3D fft3_forward(const Volume3D &v) {
    check_dims(v.dims());
    ComplexVolume3D out(v.dims(), v.voxel_size());
    std::vector<std::complex<double>> in(v.values().begin(), v.values().end());
    fftw_plan p = plan_cache().get(PlanKind::C2CForward, v.dims());
    fftw_execute_dft(p, as_fftw(in.data()), as_fftw(out.data().data()));
    return out;
}

Volume3D fft3_inverse(const ComplexVolume3D &s) {
    check_dims(s.dims());
    std::vector<std::complex<double>> in(s.data().begin(), s.data().end());
    std::vector<std::complex<double>> tmp(s.size());
    fftw_plan p = plan_cache().get(PlanKind::C2CBackward, s.dims());
    fftw_execute_dft(p, as_fftw(in.data()), as_fftw(tmp.data()));

    const double scale = 1.0 / static_cast<double>(s.size());
    Volume3D out(s.dims(), s.voxel_size());
    double re2 = 0.0, im2 = 0.0;
    for (std::size_t n = 0; n < tmp.size(); ++n) {
        const double re = tmp[n].real() * scale, im = tmp[n].imag() * scale;
        out[n] = re;
        re2 += re * re;
        im2 += im * im;
    }
    if (std::sqrt(im2) > 1e-8 * std::sqrt(re2 + im2))
        fail(ErrorCode::NumericalConsistency,
             "inverse FFT has a non-negligible imaginary part (spectrum is not conjugate-symmetric)");
    return out;
}

Mask3D erode_mask(const Mask3D &m, std::size_t radius) {
    Mask3D cur = m;
    const Dims d = m.dims();
    for (std::size_t r = 0; r < radius; ++r) {
        Mask3D next(d, false);
        for (std::size_t i = 0; i < d.nx; ++i)
            for (std::size_t j = 0; j < d.ny; ++j)
                for (std::size_t k = 0; k < d.nz; ++k) {
                    if (!cur(i, j, k)) continue;
                    if (i == 0 || j == 0 || k == 0 || i + 1 == d.nx || j + 1 == d.ny || k + 1 == d.nz) continue;
                    if (cur(i - 1, j, k) && cur(i + 1, j, k) && cur(i, j - 1, k) && cur(i, j + 1, k) &&
                        cur(i, j, k - 1) && cur(i, j, k + 1))
                        next.set(d.index(i, j, k), true);
                }
        cur = std::move(next);
    }
    return cur;
}

Mask3D mask_from_nonzero(const Volume3D &v) {
    Mask3D m(v.dims(), false);
    for (std::size_t n = 0; n < v.size(); ++n) m.set(n, v[n] != 0.0);
    return m;
}

Volume3D apply_mask(const Volume3D &v, const Mask3D &m) {
    require_same_dims(v.dims(), m.dims(), "apply_mask");
    Volume3D out = v;
    for (std::size_t n = 0; n < v.size(); ++n)
        if (!m[n]) out[n] = 0.0;
    return out;
}

void require_same_dims(const Dims &a, const Dims &b, const char *what) {
    if (!(a == b))
        fail(ErrorCode::DimensionMismatch, std::string(what) + ": dims " + std::to_string(a.nx) + "x" +
                                               std::to_string(a.ny) + "x" + std::to_string(a.nz) + " vs " +
                                               std::to_string(b.nx) + "x" + std::to_string(b.ny) + "x" +
                                               std::to_string(b.nz));
}

double dot(const Volume3D &a, const Volume3D &b) {
    require_same_dims(a.dims(), b.dims(), "dot");
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
    return s;
}

double norm2(const Volume3D &v) { return std::sqrt(dot(v, v)); }

} // namespace qsm
