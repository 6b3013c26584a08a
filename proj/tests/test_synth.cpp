#include <doctest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "oracles.hpp"
#include "qsm/synth.hpp"

using namespace qsm;

namespace {

std::set<std::uint16_t> label_set(const LabelVolume &lv) { return {lv.labels.begin(), lv.labels.end()}; }

// Two labels, no symmetry under any axis flip or permutation.
LabelVolume asymmetric_phantom(std::size_t n) {
    LabelVolume lv{Dims{n, n, n}, {}, 2, std::vector<std::uint16_t>(n * n * n, 0)};
    for (std::size_t i = 2; i < n - 2; ++i)
        for (std::size_t j = 3; j < n - 1; ++j)
            for (std::size_t k = 1; k < n - 4; ++k) lv.labels[lv.dims.index(i, j, k)] = (i + 2 * j + 3 * k) % 7 < 3 ? 1 : 2;
    lv.labels[lv.dims.index(1, 1, 1)] = 1;
    return lv;
}

double in_mask_rms(const Volume3D &v, const Mask3D &m) {
    double s = 0.0;
    for (std::size_t n = 0; n < v.size(); ++n)
        if (m[n]) s += v[n] * v[n];
    return std::sqrt(s / static_cast<double>(m.count()));
}

} // namespace

TEST_CASE("label phantom with two classes") {
    const auto lv = make_label_phantom(Dims{16, 16, 16}, 2, 7);
    CHECK(label_set(lv) == std::set<std::uint16_t>{0, 1, 2});
    const auto h = lv.histogram();
    CHECK(h.size() == 3);
    CHECK(h[1] > 0);
    CHECK(h[2] > 0);
    CHECK(lv.mask().count() == h[1] + h[2]);
    CHECK(make_label_phantom(Dims{16, 16, 16}, 2, 7) == lv);
    CHECK_FALSE(make_label_phantom(Dims{16, 16, 16}, 2, 8) == lv);
}

TEST_CASE("label phantom with 184 classes on 64^3") {
    const auto lv = make_label_phantom(Dims{64, 64, 64}, 184, 1);
    const auto h = lv.histogram();
    REQUIRE(h.size() == 185);
    std::size_t nonempty = 0;
    for (std::size_t c = 1; c < h.size(); ++c) nonempty += h[c] > 0;
    CHECK(nonempty == 184);
    CHECK(label_set(lv).size() == 185);
}

TEST_CASE("label phantom rejects bad class counts") {
    CHECK_THROWS_AS(make_label_phantom(Dims{8, 8, 8}, 1, 0), Error);
    CHECK_THROWS_AS(make_label_phantom(Dims{2, 2, 2}, 9, 0), Error);
}

TEST_CASE("identity affine leaves the volume unchanged") {
    const auto lv = make_label_phantom(Dims{12, 14, 10}, 5, 2);
    CHECK(apply_affine(lv, AffineParams{}) == lv);
}

TEST_CASE("90 degree rotations match index permutations") {
    const std::size_t n = 12;
    const auto lv = asymmetric_phantom(n);
    const Dims d = lv.dims;

    AffineParams rz;
    rz.rotation = {0.0, 0.0, std::numbers::pi / 2};
    const auto oz = apply_affine(lv, rz);
    AffineParams rx;
    rx.rotation = {std::numbers::pi / 2, 0.0, 0.0};
    const auto ox = apply_affine(lv, rx);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t k = 0; k < n; ++k) {
                CHECK(oz.labels[d.index(i, j, k)] == lv.labels[d.index(j, n - 1 - i, k)]);
                CHECK(ox.labels[d.index(i, j, k)] == lv.labels[d.index(i, k, n - 1 - j)]);
            }
}

TEST_CASE("random deformations stay within the sampled ranges and add no labels") {
    const Dims d{16, 16, 16};
    const AffineRanges r{};
    const auto lv = make_label_phantom(d, 20, 3);
    const auto labels = label_set(lv);
    for (std::uint64_t s = 0; s < 25; ++s) {
        const auto p = sample_affine(d, {}, s, r);
        for (std::size_t a = 0; a < 3; ++a) {
            CHECK(std::abs(p.rotation[a]) <= r.max_rotation_deg * std::numbers::pi / 180.0);
            CHECK(p.scale[a] >= r.min_scale);
            CHECK(p.scale[a] <= r.max_scale);
            CHECK(std::abs(p.shear[a]) <= r.max_shear);
            CHECK(std::abs(p.translation[a]) <= r.max_translation_fraction * 16.0 + 1e-12);
        }
        const auto out = random_affine_deform(lv, s);
        for (auto l : label_set(out)) CHECK(labels.count(l) == 1);
        CHECK(out == random_affine_deform(lv, s));
        CHECK(out.mask().count() > 0);
    }
}

TEST_CASE("GMM intensities") {
    const auto lv = make_label_phantom(Dims{24, 24, 24}, 12, 5);
    const auto mask = lv.mask();

    SUBCASE("zero sigma gives a constant brain") {
        LabelVolume one = lv;
        for (auto &l : one.labels) l = l ? 1 : 0;
        one.n_classes = 1;
        const auto v = gmm_sample_intensities(one, 1, GmmPrior{0.3, 0.3, 0.0, 0.0});
        for (std::size_t n = 0; n < v.size(); ++n) CHECK(v[n] == (mask[n] ? 0.3 : 0.0));
    }
    SUBCASE("per-class sample means and spreads") {
        const GmmPrior fixed{0.25, 0.25, 0.04, 0.04};
        const auto v = gmm_sample_intensities(lv, 11, fixed);
        std::map<int, std::vector<double>> by_class;
        for (std::size_t n = 0; n < v.size(); ++n) {
            if (!mask[n]) CHECK(v[n] == 0.0);
            else by_class[lv.labels[n]].push_back(v[n]);
        }
        CHECK(by_class.size() == 12);
        for (const auto &[c, xs] : by_class) {
            double m = 0.0;
            for (double x : xs) m += x;
            m /= static_cast<double>(xs.size());
            CHECK(std::abs(m - 0.25) < 3.0 * 0.04 / std::sqrt(static_cast<double>(xs.size())));
        }
    }
    SUBCASE("default prior bounds class statistics") {
        const auto v = gmm_sample_intensities(lv, 4);
        std::map<int, std::vector<double>> by_class;
        for (std::size_t n = 0; n < v.size(); ++n)
            if (mask[n]) by_class[lv.labels[n]].push_back(v[n]);
        for (const auto &[c, xs] : by_class) {
            if (xs.size() < 30) continue;
            double m = 0.0, s = 0.0;
            for (double x : xs) m += x;
            m /= static_cast<double>(xs.size());
            for (double x : xs) s += (x - m) * (x - m);
            s = std::sqrt(s / static_cast<double>(xs.size() - 1));
            CHECK(std::abs(m) < 1.0 + 0.2);
            CHECK(s > 0.005 * 0.5);
            CHECK(s < 0.05 * 1.5);
        }
        CHECK(gmm_sample_intensities(lv, 4) == v);
    }
}

TEST_CASE("quantile agrees with the independent oracle") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (std::size_t n : {1u, 2u, 5u, 100u, 1001u}) {
        std::vector<double> v(n);
        for (auto &x : v) x = u(rng);
        for (double q : {0.0, 0.1, 0.25, 0.5, 0.75, 1.0}) CHECK(quantile(v, q) == doctest::Approx(oracle::quantile(v, q)));
    }
    CHECK(quantile({1, 2, 3, 4}, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("scale_quartiles") {
    const Dims d{20, 20, 20};
    Mask3D m(d, false);
    for (std::size_t n = 0; n < d.size(); ++n) m.set(n, n % 3 != 0);

    std::mt19937_64 rng(8);
    std::normal_distribution<double> g(5.0, 2.0);
    Volume3D v(d);
    for (std::size_t n = 0; n < d.size(); ++n) v[n] = m[n] ? g(rng) : 0.0;
    const auto s = scale_quartiles(v, m);
    std::vector<double> in;
    for (std::size_t n = 0; n < d.size(); ++n) {
        if (m[n]) in.push_back(s[n]);
        else CHECK(s[n] == 0.0);
    }
    double mean = 0.0;
    for (double x : in) mean += x;
    mean /= static_cast<double>(in.size());
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(oracle::quantile(in, 0.75) - oracle::quantile(in, 0.25) - 1.0) < 1e-9);

    const auto again = scale_quartiles(s, m);
    for (std::size_t n = 0; n < d.size(); ++n) CHECK(std::abs(again[n] - s[n]) < 1e-12);

    try {
        scale_quartiles(Volume3D(d, {}, 2.0), m);
        FAIL("expected a degenerate-distribution error");
    } catch (const Error &e) {
        CHECK(e.code() == ErrorCode::DegenerateDistribution);
    }
}

TEST_CASE("background simulation") {
    const Dims d{16, 16, 16};
    const auto lv = make_label_phantom(d, 8, 2);
    const auto mask = lv.mask();
    const auto chi = scale_quartiles(gmm_sample_intensities(lv, 3), mask);
    const DipoleOperator op(KGrid(d, {}));

    SUBCASE("zero-amplitude sources leave only the masked local field") {
        BackgroundSourceSpec spec;
        spec.amplitude_mean = 0.0;
        spec.amplitude_sd = 0.0;
        const auto r = simulate_background(chi, mask, spec, 5);
        CHECK(r.n_sources >= 1);
        CHECK(r.total_field == apply_mask(r.local_field, mask));
        CHECK(r.local_field == op.forward(chi));
    }
    SUBCASE("a single distant source is harmonic inside the eroded mask") {
        BackgroundSourceSpec spec;
        spec.fixed_count = true;
        spec.count_mean = 1;
        spec.volume_fraction = 0.02;
        const auto r = simulate_background(chi, mask, spec, 6);
        CHECK(r.n_sources == 1);
        Volume3D bg(d);
        for (std::size_t n = 0; n < bg.size(); ++n) bg[n] = r.total_field[n] - r.local_field[n];
        const auto inner = erode_mask(mask, 2);
        CHECK(in_mask_rms(bg, inner) > 0.0);
        CHECK(oracle::laplacian_ratio(bg, inner) < 1e-2);
    }
    SUBCASE("outside the mask the total field is zero") {
        const auto r = simulate_background(chi, mask, {}, 7);
        for (std::size_t n = 0; n < d.size(); ++n)
            if (!mask[n]) CHECK(r.total_field[n] == 0.0);
        CHECK(r.total_field.all_finite());
        CHECK(simulate_background(chi, mask, {}, 7).total_field == r.total_field);
    }
    SUBCASE("impossible placement fails") {
        BackgroundSourceSpec spec;
        spec.fixed_count = true;
        spec.count_mean = 3;
        spec.volume_fraction = 0.5;
        spec.min_distance_factor = 0.0;
        spec.max_distance_factor = 0.0;
        spec.max_attempts_per_source = 2;
        try {
            simulate_background(chi, mask, spec, 8);
            FAIL("expected a placement error");
        } catch (const Error &e) {
            CHECK(e.code() == ErrorCode::PlacementFailed);
        }
    }
}

TEST_CASE("external sources dominate the in-mask field at 32^3") {
    SynthConfig cfg;
    cfg.dims = {32, 32, 32};
    cfg.n_subjects = 3;
    cfg.seed = 12;
    const DatasetGenerator gen(cfg);
    for (std::size_t i = 0; i < gen.size(); ++i) {
        const auto s = gen.sample(i);
        Volume3D bg(cfg.dims);
        for (std::size_t n = 0; n < bg.size(); ++n) bg[n] = s.total_field[n] - s.local_field[n];
        CHECK(in_mask_rms(bg, s.mask) > in_mask_rms(s.local_field, s.mask));
    }
}

TEST_CASE("dataset stream") {
    SynthConfig cfg;
    cfg.dims = {16, 16, 16};
    cfg.n_classes = 30;
    cfg.n_subjects = 2;
    cfg.n_deformations = 3;
    cfg.seed = 21;
    DatasetGenerator gen(cfg);
    CHECK(gen.size() == 6);
    const DipoleOperator op(KGrid(cfg.dims, {}));

    std::vector<TrainingSample> streamed;
    while (auto s = gen.next()) streamed.push_back(std::move(*s));
    REQUIRE(streamed.size() == 6);
    CHECK_FALSE(gen.next().has_value());
    for (std::size_t i = 0; i < streamed.size(); ++i) {
        const auto &s = streamed[i];
        CHECK(s.local_field == op.forward(s.chi));
        std::vector<double> in;
        for (std::size_t n = 0; n < s.chi.size(); ++n)
            if (s.mask[n]) in.push_back(s.chi[n]);
            else CHECK(s.chi[n] == 0.0);
        double mean = 0.0;
        for (double x : in) mean += x;
        CHECK(std::abs(mean / static_cast<double>(in.size())) < 1e-6);
        CHECK(std::abs(oracle::quantile(in, 0.75) - oracle::quantile(in, 0.25) - 1.0) < 1e-6);
        Volume3D bg(cfg.dims);
        for (std::size_t n = 0; n < bg.size(); ++n) bg[n] = s.total_field[n] - s.local_field[n];
        CHECK(oracle::laplacian_ratio(bg, erode_mask(s.mask, 2)) < 1e-2);
        // random access regenerates the streamed sample
        const auto again = gen.sample(i);
        CHECK(again.chi == s.chi);
        CHECK(again.total_field == s.total_field);
        CHECK(again.seed == s.seed);
    }
    CHECK_FALSE(streamed[0].chi == streamed[1].chi);
    CHECK(DatasetGenerator(cfg).sample(0).chi == streamed[0].chi);
    cfg.seed = 22;
    CHECK_FALSE(DatasetGenerator(cfg).sample(0).chi == streamed[0].chi);
    CHECK_THROWS_AS(gen.sample(6), Error);
}

TEST_CASE("28 subjects by 30 deformations make 840 samples") {
    SynthConfig cfg;
    cfg.dims = {8, 8, 8};
    cfg.n_classes = 4;
    cfg.n_subjects = 28;
    cfg.n_deformations = 30;
    const DatasetGenerator gen(cfg);
    CHECK(gen.size() == 840);
    CHECK(gen.sample(839).chi.dims() == cfg.dims);
}
