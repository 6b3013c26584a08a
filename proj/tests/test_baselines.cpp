#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "qsm/baselines.hpp"

using namespace qsm;

namespace {

double max_abs_diff(const Volume3D &a, const Volume3D &b) {
    double e = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) e = std::max(e, std::abs(a[n] - b[n]));
    return e;
}

} // namespace

TEST_CASE("TKD recovers chi whose spectrum avoids the truncated band") {
    for (const Dims d : {Dims{8, 8, 8}, Dims{6, 8, 10}}) {
        const DipoleOperator op(KGrid(d, {}));
        const auto chi = oracle::spectral_apply(oracle::random_volume(d, 1), [](double D) { return std::abs(D) >= 0.2 ? 1.0 : 0.0; });
        const auto rec = tkd_invert(op, op.forward(chi));
        CHECK(max_abs_diff(rec, chi) < 1e-8);
    }
}

TEST_CASE("TKD filter values and conventions") {
    const Dims d{8, 8, 8};
    const DipoleOperator op(KGrid(d, {}));
    const Volume3D y = oracle::random_volume(d, 2);
    const Volume3D zero(d);
    CHECK(max_abs_diff(tkd_invert(op, zero), zero) == 0.0);

    auto tkd_ref = [](double t) {
        return [t](double D) { return std::abs(D) >= t ? 1.0 / D : (D < 0.0 ? -1.0 : 1.0) / t; };
    };
    CHECK(max_abs_diff(tkd_invert(op, y), oracle::spectral_apply(y, tkd_ref(0.2))) < 1e-10);
    // Every |D| <= 2/3 falls below this threshold: constant division with the sign kept.
    CHECK(max_abs_diff(tkd_invert(op, y, {0.7}), oracle::spectral_apply(y, tkd_ref(0.7))) < 1e-10);
    for (double f : tkd_filter(op, {0.7})) CHECK(std::abs(std::abs(f) - 1.0 / 0.7) < 1e-12);

    const Volume3D y2 = oracle::random_volume(d, 3);
    Volume3D comb(d);
    for (std::size_t n = 0; n < comb.size(); ++n) comb[n] = 1.5 * y[n] + 0.25 * y2[n];
    const auto a = tkd_invert(op, y), b = tkd_invert(op, y2), c = tkd_invert(op, comb);
    for (std::size_t n = 0; n < comb.size(); ++n) CHECK(std::abs(c[n] - (1.5 * a[n] + 0.25 * b[n])) < 1e-10);

    CHECK_THROWS_AS(tkd_invert(op, y, {0.0}), Error);
    CHECK_THROWS_AS(tkd_invert(op, Volume3D(Dims{4, 4, 4})), Error);
}

TEST_CASE("CG Tikhonov matches the dense direct solve on 4^3") {
    const Dims d{4, 4, 4};
    const DipoleOperator op(KGrid(d, {}));
    const auto phi = oracle::dense_matrix(d.size(), [&](const std::vector<double> &e) {
        return oracle::dipole_forward(Volume3D(d, {}, e)).values();
    });
    const std::size_t n = d.size();
    for (double mu : {0.1, 0.01}) {
        const auto y = oracle::random_volume(d, 4);
        std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
        std::vector<double> b(n, 0.0);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                for (std::size_t t = 0; t < n; ++t) a[r][c] += phi[t][r] * phi[t][c];
                if (r == c) a[r][c] += mu;
            }
            for (std::size_t t = 0; t < n; ++t) b[r] += phi[t][r] * y[t];
        }
        const auto ref = oracle::solve(a, b);
        const auto res = cg_tikhonov_invert(op, y, {mu, 500, 1e-12});
        CHECK(res.converged);
        CHECK(oracle::max_rel_err(res.chi.values(), ref) < 1e-8);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(res.chi[i] - ref[i]) < 1e-8);
    }
}

TEST_CASE("CG Tikhonov agrees with the per-bin closed form") {
    const Dims d{8, 8, 8};
    const DipoleOperator op(KGrid(d, {}));
    const auto y = oracle::random_volume(d, 5);
    const double mu = 0.05;
    const auto res = cg_tikhonov_invert(op, y, {mu, 500, 1e-12});
    const auto ref = oracle::spectral_apply(y, [mu](double D) { return D / (D * D + mu); });
    CHECK(max_abs_diff(res.chi, ref) < 1e-8);
}

TEST_CASE("CG energy is non-increasing and the residual history is consistent") {
    const Dims d{8, 8, 8};
    const DipoleOperator op(KGrid(d, {}));
    const auto res = cg_tikhonov_invert(op, oracle::random_volume(d, 6), {0.01, 500, 1e-10});
    REQUIRE(res.energy_history.size() == res.iterations + 1);
    REQUIRE(res.residual_history.size() == res.iterations + 1);
    CHECK(res.residual_history.front() == doctest::Approx(1.0));
    CHECK(res.residual_history.back() <= 1e-10);
    CHECK(res.energy_history.front() == 0.0);
    for (std::size_t k = 1; k < res.energy_history.size(); ++k)
        CHECK(res.energy_history[k] <= res.energy_history[k - 1] + 1e-12 * std::abs(res.energy_history[k - 1]));
}

TEST_CASE("CG edge cases") {
    const Dims d{4, 4, 4};
    const DipoleOperator op(KGrid(d, {}));
    const auto zero = cg_tikhonov_invert(op, Volume3D(d));
    CHECK(zero.chi == Volume3D(d));
    CHECK(zero.converged);
    const auto capped = cg_tikhonov_invert(op, oracle::random_volume(d, 7), {1e-6, 2, 1e-14});
    CHECK_FALSE(capped.converged);
    CHECK(capped.iterations == 2);
    CHECK_THROWS_AS(cg_tikhonov_invert(op, Volume3D(d), {-1.0}), Error);
    CHECK_THROWS_AS(cg_tikhonov_invert(op, Volume3D(d), {0.1, 10, 0.0}), Error);
}

TEST_CASE("large mu scales the solution like Phi^T y / mu") {
    const Dims d{8, 8, 8};
    const DipoleOperator op(KGrid(d, {}));
    const auto y = oracle::random_volume(d, 8);
    const double target = norm2(op.adjoint(y));
    double prev = INFINITY;
    for (double mu : {1e1, 1e2, 1e3, 1e4}) {
        const auto x = cg_tikhonov_invert(op, y, {mu, 500, 1e-12}).chi;
        const double err = std::abs(norm2(x) * mu / target - 1.0);
        CHECK(err < prev);
        prev = err;
    }
    CHECK(prev < 1e-3);
}
