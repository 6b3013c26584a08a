#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "qsm/params.hpp"

using namespace qsm;
using gradcheck::check;
using nn::Tape;
using nn::Tensor;
using V = std::vector<Tensor>;

namespace {

Mask3D random_mask(Dims d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Mask3D m(d, false);
    for (std::size_t n = 0; n < d.size(); ++n) m.set(n, rng() % 3 != 0);
    return m;
}

} // namespace

TEST_CASE("conv3d forward matches the direct oracle") {
    std::mt19937_64 rng(3);
    struct Case {
        std::size_t ci, co, k, stride;
        nn::Padding pad;
        Dims d;
    };
    for (const Case c : {Case{1, 1, 3, 1, nn::Padding::Same, {5, 6, 7}}, Case{2, 3, 3, 1, nn::Padding::Same, {4, 4, 4}},
                         Case{2, 2, 3, 2, nn::Padding::Same, {6, 6, 4}}, Case{3, 2, 3, 1, nn::Padding::Valid, {5, 5, 6}},
                         Case{1, 2, 1, 1, nn::Padding::Same, {3, 3, 3}}, Case{2, 1, 5, 1, nn::Padding::Same, {6, 5, 7}}}) {
        const auto x = gradcheck::random_values(c.ci * c.d.size(), rng);
        const auto w = gradcheck::random_values(c.co * c.ci * c.k * c.k * c.k, rng);
        const auto b = gradcheck::random_values(c.co, rng);
        Tape t;
        const Tensor y = nn::conv3d(t.constant({c.ci, c.d.nx, c.d.ny, c.d.nz}, x),
                                    t.constant({c.co, c.ci, c.k, c.k, c.k}, w), t.constant({c.co}, b), {c.stride, c.pad});
        const auto ref =
            oracle::conv3d(x, c.ci, c.d.nx, c.d.ny, c.d.nz, w, b, c.co, c.k, c.pad == nn::Padding::Same, c.stride);
        REQUIRE(y.size() == ref.size());
        CHECK(oracle::max_rel_err(y.value(), ref) < 1e-12);
    }
}

TEST_CASE("conv3d treats a batch as independent items") {
    std::mt19937_64 rng(4);
    const auto x = gradcheck::random_values(2 * 2 * 64, rng);
    const auto w = gradcheck::random_values(3 * 2 * 27, rng);
    const auto b = gradcheck::random_values(3, rng);
    Tape t;
    const Tensor y = nn::conv3d(t.constant({2, 2, 4, 4, 4}, x), t.constant({3, 2, 3, 3, 3}, w), t.constant({3}, b));
    CHECK(y.shape() == nn::Shape{2, 3, 4, 4, 4});
    for (std::size_t item = 0; item < 2; ++item) {
        const std::vector<double> xi(x.begin() + static_cast<long>(item * 128), x.begin() + static_cast<long>((item + 1) * 128));
        const auto ref = oracle::conv3d(xi, 2, 4, 4, 4, w, b, 3, 3, true);
        const std::vector<double> got(y.value().begin() + static_cast<long>(item * 192),
                                      y.value().begin() + static_cast<long>((item + 1) * 192));
        CHECK(oracle::max_rel_err(got, ref) < 1e-12);
    }
}

TEST_CASE("shape errors") {
    Tape t;
    const Tensor x = t.constant({1, 5, 4, 4}, std::vector<double>(80));
    CHECK_THROWS_AS(nn::downsample2(x), Error);
    CHECK_THROWS_AS(nn::conv3d(x, t.constant({1, 2, 3, 3, 3}, std::vector<double>(54)), t.constant({1}, {0})), Error);
    CHECK_THROWS_AS(nn::add(x, t.constant({1, 4, 4, 4}, std::vector<double>(64))), Error);
    CHECK_THROWS_AS(t.backward(x), Error);
    CHECK_THROWS_AS(t.constant({2, 2}, {1, 2, 3}), Error);
}

TEST_CASE("elementary op values") {
    Tape t;
    const Tensor a = t.constant({1, 2, 2, 2}, {1, -2, 3, -4, 5, -6, 7, -8});
    CHECK(nn::sum(a).item() == -4.0);
    CHECK(nn::mean(a).item() == -0.5);
    CHECK(nn::sum(nn::abs(a)).item() == 36.0);
    CHECK(nn::leaky_relu(a, 0.1).value()[1] == doctest::Approx(-0.2));
    CHECK(nn::downsample2(a).value()[0] == doctest::Approx(-0.5));
    CHECK(nn::upsample2(a).shape() == nn::Shape{1, 4, 4, 4});
    CHECK(nn::softplus(t.constant({1}, {0.0})).item() == doctest::Approx(std::log(2.0)));
    CHECK(nn::softplus(t.constant({1}, {800.0})).item() == 800.0);
    CHECK(nn::softplus(t.constant({1}, {-800.0})).item() >= 0.0);
    const Tensor p = nn::pad_spatial(a, {1, 0, 2}, {0, 1, 1});
    CHECK(p.shape() == nn::Shape{1, 3, 3, 5});
    const Tensor c = nn::crop_spatial(p, {1, 0, 2}, {2, 2, 2});
    CHECK(c.value() == a.value());
    Mask3D m(Dims{2, 2, 2}, false);
    m.set(0, true);
    m.set(7, true);
    CHECK(nn::masked_mean_abs_diff(a, nn::scale(a, 0.0), m).item() == doctest::Approx(4.5));
}

TEST_CASE("finite-difference checks for every primitive") {
    const Dims d{4, 4, 4};
    const Mask3D m = random_mask(d, 1);
    const DipoleOperator op(KGrid(d, {}));
    const DipoleOperator padded(KGrid(d, {}), {0, 0, 1}, DipoleOptions{true});
    const nn::Shape vol{2, 4, 4, 4}, one{1, 4, 4, 4};

    CHECK(check([](Tape &, const V &v) { return nn::conv3d(v[0], v[1], v[2]); }, {vol, {3, 2, 3, 3, 3}, {3}}, 1) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::conv3d(v[0], v[1], v[2], {2, nn::Padding::Same}); },
                {vol, {2, 2, 3, 3, 3}, {2}}, 2) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::conv3d(v[0], v[1], v[2], {1, nn::Padding::Valid}); },
                {{2, 2, 4, 4, 4}, {1, 2, 3, 3, 3}, {1}}, 3) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::leaky_relu(v[0], 0.1); }, {vol}, 4, 1e-3) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::downsample2(v[0]); }, {vol}, 5) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::upsample2(v[0]); }, {{2, 2, 2, 2}}, 6) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::concat_channels(v[0], v[1]); }, {vol, one}, 7) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::add(v[0], v[1]); }, {vol, vol}, 8) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::sub(v[0], v[1]); }, {vol, vol}, 9) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::scale(v[0], -1.7); }, {vol}, 10) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::scalar_mul(v[0], v[1]); }, {{1}, vol}, 11) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::softplus(v[0]); }, {vol}, 12) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::sum(nn::scale(v[0], 3.0)); }, {vol}, 13) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::mean(nn::softplus(v[0])); }, {vol}, 14) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::abs(v[0]); }, {vol}, 15, 1e-3) < 1e-6);
    CHECK(check([&](Tape &, const V &v) { return nn::mask_mul(v[0], m); }, {vol}, 16) < 1e-6);
    CHECK(check([&](Tape &, const V &v) { return nn::masked_mean_abs_diff(v[0], v[1], m); }, {one, one}, 17) < 1e-5);
    CHECK(check([&](Tape &, const V &v) { return nn::dipole_forward(v[0], op); }, {vol}, 18) < 1e-6);
    CHECK(check([&](Tape &, const V &v) { return nn::dipole_forward(v[0], padded); }, {one}, 19) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::pad_spatial(v[0], {1, 0, 2}, {2, 1, 0}); }, {vol}, 20) < 1e-6);
    CHECK(check([](Tape &, const V &v) { return nn::crop_spatial(v[0], {1, 0, 1}, {2, 3, 2}); }, {vol}, 21) < 1e-6);
}

TEST_CASE("reused tensors accumulate gradients") {
    Tape t;
    const Tensor x = t.variable({1}, {0.7});
    const Tensor y = nn::add(nn::scale(x, 2.0), nn::scalar_mul(x, x)); // 2x + x^2
    t.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(2.0 + 2.0 * 0.7));
}

TEST_CASE("ParamBinder binds lazily and reports zeros for unused names") {
    ModelParams p;
    p.add("a", {2}, {1.0, 2.0});
    p.add("b", {1}, {3.0});
    CHECK_THROWS_AS(p.add("a", {1}, {0.0}), Error);
    CHECK_THROWS_AS(p.add("c", {2}, {0.0}), Error);
    CHECK_THROWS_AS(p.at("zz"), Error);
    Tape t;
    ParamBinder bind(t, p);
    const Tensor a1 = bind("a");
    const Tensor a2 = bind("a");
    CHECK(a1.node() == a2.node());
    const auto g = backward(t, nn::sum(nn::add(a1, nn::scale(a2, 2.0))), bind);
    CHECK(g.at("a") == std::vector<double>{3.0, 3.0});
    CHECK(g.at("b") == std::vector<double>{0.0});
    CHECK(gradient_norm(g) == doctest::Approx(std::sqrt(18.0)));
    CHECK(gradient_norm(g, "b") == 0.0);
}

TEST_CASE("Adam matches its closed form") {
    ModelParams p;
    p.add("w", {3}, {0.5, -1.0, 2.0});
    p.add("frozen", {1}, {4.0});
    AdamState s;
    s.lr = 0.01;
    const Gradients g{{"w", {0.3, -2.0, 0.0}}};
    for (int step = 1; step <= 3; ++step) {
        adam_step(p, g, s);
        // With a constant gradient both bias-corrected moments equal g and g^2.
        const std::vector<double> w0{0.5, -1.0, 2.0};
        for (std::size_t i = 0; i < 3; ++i) {
            const double gi = g.at("w")[i];
            const double expect = w0[i] - step * s.lr * gi / (std::abs(gi) + s.eps);
            CHECK(p.at("w").data[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }
    CHECK(s.step == 3);
    CHECK(p.at("frozen").data[0] == 4.0);

    // Two different gradients, moments by hand.
    ModelParams q;
    q.add("x", {1}, {1.0});
    AdamState a;
    a.lr = 0.1;
    adam_step(q, {{"x", {1.0}}}, a);
    adam_step(q, {{"x", {-0.5}}}, a);
    const double m = (0.9 * 0.1 * 1.0 + 0.1 * -0.5) / (1 - 0.81);
    const double v = (0.999 * 0.001 * 1.0 + 0.001 * 0.25) / (1 - 0.999 * 0.999);
    const double x1 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    CHECK(q.at("x").data[0] == doctest::Approx(x1 - 0.1 * m / (std::sqrt(v) + 1e-8)).epsilon(1e-12));

    ModelParams r = q;
    AdamState b = a;
    CHECK_THROWS_AS(adam_step(r, {{"x", {NAN}}}, b), Error);
    CHECK(r == q);
    CHECK(b == a);
}

TEST_CASE("gradient accumulation") {
    Gradients dst;
    accumulate(dst, {{"a", {1.0, 2.0}}}, 0.5);
    accumulate(dst, {{"a", {3.0, 4.0}}, {"b", {1.0}}}, 0.5);
    CHECK(dst.at("a") == std::vector<double>{2.0, 3.0});
    CHECK(dst.at("b") == std::vector<double>{0.5});
    CHECK_THROWS_AS(accumulate(dst, {{"b", {1.0, 2.0}}}), Error);
}

TEST_CASE("parameter checksums and norms") {
    ModelParams p;
    p.add("a", {2}, {3.0, 4.0});
    p.add("b.x", {1}, {12.0});
    CHECK(p.norm() == doctest::Approx(13.0));
    CHECK(p.group_norm("a") == doctest::Approx(5.0));
    CHECK(p.total_size() == 3);
    ModelParams q = p;
    CHECK(q.checksum() == p.checksum());
    q.at("a").data[0] = std::nextafter(3.0, 4.0);
    CHECK(q.checksum() != p.checksum());
}

TEST_CASE("the tape is deterministic") {
    auto run = [] {
        std::mt19937_64 rng(9);
        Tape t;
        const Tensor x = t.variable({2, 4, 4, 4}, gradcheck::random_values(128, rng));
        const Tensor w = t.variable({2, 2, 3, 3, 3}, gradcheck::random_values(108, rng));
        const Tensor b = t.variable({2}, {0.1, -0.1});
        const Tensor l = nn::sum(nn::softplus(nn::conv3d(nn::leaky_relu(x, 0.2), w, b)));
        t.backward(l);
        return std::make_pair(l.item(), w.grad());
    };
    CHECK(run() == run());
}
