#pragma once

#include <functional>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "qsm/autodiff.hpp"

namespace gradcheck {

using qsm::nn::Shape;
using qsm::nn::Tape;
using qsm::nn::Tensor;
using Builder = std::function<Tensor(Tape &, const std::vector<Tensor> &)>;

inline std::vector<double> random_values(std::size_t n, std::mt19937_64 &rng, double min_abs = 0.0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (auto &x : v) {
        do x = u(rng);
        while (std::abs(x) < min_abs);
    }
    return v;
}

// Scalarises an op output with a smooth, non-uniform weighting.
inline Tensor reduce(const Tensor &out) { return out.size() == 1 ? out : qsm::nn::sum(qsm::nn::softplus(out)); }

inline double evaluate(const Builder &f, const std::vector<Shape> &shapes, const std::vector<std::vector<double>> &vals) {
    Tape t;
    std::vector<Tensor> in;
    for (std::size_t i = 0; i < shapes.size(); ++i) in.push_back(t.constant(shapes[i], vals[i]));
    return reduce(f(t, in)).item();
}

// Largest relative error between tape gradients and central differences over
// all inputs.
inline double check(const Builder &f, const std::vector<Shape> &shapes, std::uint64_t seed, double min_abs = 0.0,
                    double h = 1e-6) {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<double>> vals;
    for (const auto &s : shapes) vals.push_back(random_values(qsm::nn::numel(s), rng, min_abs));

    Tape t;
    std::vector<Tensor> in;
    for (std::size_t i = 0; i < shapes.size(); ++i) in.push_back(t.variable(shapes[i], vals[i]));
    const Tensor loss = reduce(f(t, in));
    t.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        std::vector<double> analytic = in[i].grad();
        if (analytic.empty()) analytic.assign(vals[i].size(), 0.0);
        auto fi = [&](const std::vector<double> &p) {
            auto v = vals;
            v[i] = p;
            return evaluate(f, shapes, v);
        };
        worst = std::max(worst, oracle::max_rel_err(analytic, oracle::fd_gradient(fi, vals[i], h)));
    }
    return worst;
}

} // namespace gradcheck
