#pragma once

#include <cmath>

#include "qsm/volio.hpp"

// Fixed objects behind the committed files in tests/golden. Values come from
// closed-form expressions so they do not depend on any RNG implementation.
namespace golden {

inline qsm::Volume3D volume() {
    const qsm::Dims d{5, 4, 3};
    qsm::Volume3D v(d, {0.9, 1.1, 1.5});
    for (std::size_t n = 0; n < d.size(); ++n) v[n] = std::sin(0.7 * static_cast<double>(n)) / 3.0 + (n % 5 == 0 ? 1e-300 : 0.0);
    v[7] = -0.0;
    v[11] = 1.0 / 3.0;
    return v;
}

inline qsm::Mask3D mask() {
    const qsm::Dims d{4, 4, 4};
    qsm::Mask3D m(d, false);
    for (std::size_t n = 0; n < d.size(); ++n) m.set(n, (n * 7 + 3) % 5 < 2);
    return m;
}

inline qsm::Checkpoint checkpoint() {
    qsm::Checkpoint c;
    c.params.add("bgnet.out.b", {1}, {0.125});
    std::vector<double> w(2 * 1 * 3 * 3 * 3);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::cos(static_cast<double>(i)) * 0.1;
    c.params.add("bgnet.enc0.conv0.w", {2, 1, 3, 3, 3}, w);
    c.params.add("varnet.step0.lambda", {1}, {std::log(std::expm1(0.5))});
    c.adam.lr = 4e-4;
    c.adam.step = 17;
    c.adam.m["bgnet.out.b"] = {1e-3};
    c.adam.v["bgnet.out.b"] = {2.5e-7};
    c.metadata = R"({"stage":"end_to_end","epoch":3})";
    return c;
}

} // namespace golden
