#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "qsm/dipole.hpp"

using namespace qsm;

namespace {
DipoleOperator make_op(Dims d, Axis3 b0 = {0, 0, 1}, VoxelSize v = {}) { return DipoleOperator(KGrid(d, v), b0); }
} // namespace

TEST_CASE("kernel values on axis, in plane, at the magic angle and at k = 0") {
    const Dims d{16, 16, 16};
    const auto op = make_op(d);
    CHECK(op.kernel_at(0, 0, 0) == 0.0);
    CHECK(std::abs(op.kernel_at(0, 0, 3) + 2.0 / 3.0) < 1e-12);
    CHECK(std::abs(op.kernel_at(5, 0, 0) - 1.0 / 3.0) < 1e-12);
    CHECK(std::abs(op.kernel_at(2, 3, 0) - 1.0 / 3.0) < 1e-12);
    // kx = ky = kz: kz^2 = |k|^2 / 3
    CHECK(std::abs(op.kernel_at(2, 2, 2)) < 1e-12);
    CHECK(std::abs(op.kernel_at(1, 15, 1)) < 1e-12);
}

TEST_CASE("kernel range, evenness and formula agreement") {
    for (const Dims d : {Dims{8, 8, 8}, Dims{5, 6, 7}}) {
        const VoxelSize vs{1.0, 0.8, 1.3};
        const auto op = make_op(d, {0, 0, 1}, vs);
        double lo = 1.0, hi = -1.0;
        for (std::size_t i = 0; i < d.nx; ++i)
            for (std::size_t j = 0; j < d.ny; ++j)
                for (std::size_t k = 0; k < d.nz; ++k) {
                    const double v = op.kernel_at(i, j, k);
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                    CHECK(v >= -2.0 / 3.0 - 1e-15);
                    CHECK(v <= 1.0 / 3.0 + 1e-15);
                    const double ref = oracle::dipole(oracle::freq(i, d.nx, vs.dx), oracle::freq(j, d.ny, vs.dy),
                                                      oracle::freq(k, d.nz, vs.dz));
                    CHECK(std::abs(v - ref) < 1e-14);
                    // D(k) == D(-k) on every representable pair
                    const std::size_t mi = (d.nx - i) % d.nx, mj = (d.ny - j) % d.ny, mk = (d.nz - k) % d.nz;
                    if (2 * i != d.nx && 2 * j != d.ny && 2 * k != d.nz) CHECK(v == op.kernel_at(mi, mj, mk));
                }
        CHECK(lo == doctest::Approx(-2.0 / 3.0));
        CHECK(hi == doctest::Approx(1.0 / 3.0));
    }
}

TEST_CASE("build_dipole rejects a non-unit axis") {
    CHECK_THROWS_AS(build_dipole(KGrid(Dims{4, 4, 4}, {}), Axis3{0, 0, 1.1}), Error);
    CHECK_NOTHROW(build_dipole(KGrid(Dims{4, 4, 4}, {}), Axis3{0, 0.6, 0.8}));
}

TEST_CASE("b0 along x equals the axis-permuted z kernel") {
    const Dims d{8, 8, 8};
    const auto oz = make_op(d, {0, 0, 1});
    const auto ox = make_op(d, {1, 0, 0});
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            for (std::size_t k = 0; k < 8; ++k) CHECK(ox.kernel_at(i, j, k) == doctest::Approx(oz.kernel_at(k, j, i)));
}

TEST_CASE("forward of zero and constant volumes is zero") {
    const Dims d{8, 8, 8};
    const auto op = make_op(d);
    CHECK(op.forward(Volume3D(d)) == Volume3D(d));
    const auto f = op.forward(Volume3D(d, {}, 1.0));
    for (double x : f.values()) CHECK(std::abs(x) < 1e-14);
    CHECK_THROWS_AS(op.forward(Volume3D(Dims{8, 8, 4})), Error);
}

TEST_CASE("impulse response matches the direct DFT oracle on 16^3") {
    const Dims d{16, 16, 16};
    Volume3D imp(d);
    imp(0, 0, 0) = 1.0;
    const auto got = make_op(d).forward(imp);
    const auto ref = oracle::dipole_forward(imp);
    double err = 0.0;
    for (std::size_t n = 0; n < d.size(); ++n) err = std::max(err, std::abs(got[n] - ref[n]));
    CHECK(err < 1e-9);
}

TEST_CASE("forward matches the direct oracle on random anisotropic input") {
    const Dims d{4, 5, 6};
    const VoxelSize vs{1.0, 1.2, 0.7};
    Volume3D x = oracle::random_volume(d, 9);
    x = Volume3D(d, vs, x.values());
    const Axis3 b0{0.0, 0.6, 0.8};
    const auto got = make_op(d, b0, vs).forward(x);
    const auto ref = oracle::dipole_forward(x, b0);
    for (std::size_t n = 0; n < d.size(); ++n) CHECK(std::abs(got[n] - ref[n]) < 1e-10);
}

TEST_CASE("adjoint identity and linearity") {
    std::mt19937_64 rng(1);
    for (const Dims d : {Dims{8, 8, 8}, Dims{6, 7, 5}, Dims{4, 9, 6}}) {
        for (bool pad : {false, true}) {
            const DipoleOperator op(KGrid(d, {}), {0, 0, 1}, DipoleOptions{pad});
            const auto x = oracle::random_volume(d, rng());
            const auto y = oracle::random_volume(d, rng());
            const double lhs = dot(op.forward(x), y), rhs = dot(x, op.adjoint(y));
            CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-30) < 1e-9);

            Volume3D comb(d);
            for (std::size_t n = 0; n < comb.size(); ++n) comb[n] = 2.5 * x[n] - 0.75 * y[n];
            const auto fc = op.forward(comb), fx = op.forward(x), fy = op.forward(y);
            for (std::size_t n = 0; n < comb.size(); ++n) CHECK(std::abs(fc[n] - (2.5 * fx[n] - 0.75 * fy[n])) < 1e-10);
        }
    }
    const auto op = make_op(Dims{4, 4, 4});
    CHECK(op.adjoint(Volume3D(Dims{4, 4, 4})) == Volume3D(Dims{4, 4, 4}));
}

TEST_CASE("columns of Phi^T Phi match the dense oracle on 4^3") {
    const Dims d{4, 4, 4};
    const auto op = make_op(d);
    const auto phi = oracle::dense_matrix(d.size(), [&](const std::vector<double> &e) {
        return oracle::dipole_forward(Volume3D(d, {}, e)).values();
    });
    for (std::size_t c : {0u, 5u, 21u, 63u}) {
        Volume3D e(d);
        e[c] = 1.0;
        const auto col = op.adjoint(op.forward(e));
        for (std::size_t r = 0; r < d.size(); ++r) {
            double ref = 0.0;
            for (std::size_t t = 0; t < d.size(); ++t) ref += phi[t][r] * phi[t][c];
            CHECK(std::abs(col[r] - ref) < 1e-9);
        }
    }
}

TEST_CASE("add_gaussian_noise statistics and determinism") {
    const Dims d{32, 32, 32};
    const Volume3D z(d);
    CHECK(add_gaussian_noise(z, 0.0, 0.0, 1) == z);
    const auto n1 = add_gaussian_noise(z, 0.0, 0.005, 42);
    const auto n2 = add_gaussian_noise(z, 0.0, 0.005, 42);
    CHECK(n1 == n2);
    double mean = 0.0;
    for (double x : n1.values()) mean += x;
    mean /= static_cast<double>(n1.size());
    double var = 0.0;
    for (double x : n1.values()) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n1.size() - 1);
    CHECK(var >= 0.00475);
    CHECK(var <= 0.00525);

    const auto shifted = add_gaussian_noise(Volume3D(Dims{64, 64, 32}), 0.3, 0.02, 7);
    double m2 = 0.0;
    for (double x : shifted.values()) m2 += x;
    m2 /= static_cast<double>(shifted.size());
    CHECK(std::abs(m2 - 0.3) < 0.05 * 0.3);
    CHECK_THROWS_AS(add_gaussian_noise(z, 0.0, -1.0, 1), Error);
}
