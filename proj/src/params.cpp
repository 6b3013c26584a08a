#include "qsm/params.hpp"

#include <cmath>
#include <cstring>

namespace qsm {

void ModelParams::add(const std::string &name, nn::Shape shape, std::vector<double> data) {
    if (nn::numel(shape) != data.size()) fail(ErrorCode::ShapeMismatch, "parameter " + name + ": data does not match shape");
    if (tensors_.count(name)) fail(ErrorCode::InvalidInput, "duplicate parameter " + name);
    tensors_.emplace(name, ParamTensor{std::move(shape), std::move(data)});
}

const ParamTensor &ModelParams::at(const std::string &name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) fail(ErrorCode::MissingEntry, "missing parameter " + name);
    return it->second;
}

ParamTensor &ModelParams::at(const std::string &name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) fail(ErrorCode::MissingEntry, "missing parameter " + name);
    return it->second;
}

std::vector<std::string> ModelParams::names() const {
    std::vector<std::string> out;
    for (const auto &[k, _] : tensors_) out.push_back(k);
    return out;
}

std::size_t ModelParams::total_size() const {
    std::size_t n = 0;
    for (const auto &[_, t] : tensors_) n += t.data.size();
    return n;
}

double ModelParams::norm() const { return group_norm(""); }

double ModelParams::group_norm(const std::string &prefix) const {
    double s = 0.0;
    for (const auto &[k, t] : tensors_)
        if (k.rfind(prefix, 0) == 0)
            for (double v : t.data) s += v * v;
    return std::sqrt(s);
}

std::uint64_t ModelParams::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void *p, std::size_t n) {
        const auto *b = static_cast<const unsigned char *>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto &[k, t] : tensors_) {
        mix(k.data(), k.size());
        for (auto d : t.shape) {
            const std::uint64_t d64 = d;
            mix(&d64, sizeof d64);
        }
        mix(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

double gradient_norm(const Gradients &g, const std::string &prefix) {
    double s = 0.0;
    for (const auto &[k, v] : g)
        if (k.rfind(prefix, 0) == 0)
            for (double x : v) s += x * x;
    return std::sqrt(s);
}

nn::Tensor ParamBinder::operator()(const std::string &name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const ParamTensor &p = params_.at(name);
    nn::Tensor t = tape_.variable(p.shape, p.data);
    bound_.emplace(name, t);
    return t;
}

Gradients ParamBinder::gradients() const {
    Gradients out;
    for (const auto &[name, p] : params_.tensors()) {
        auto it = bound_.find(name);
        if (it != bound_.end() && !it->second.grad().empty())
            out[name] = it->second.grad();
        else
            out[name] = std::vector<double>(p.data.size(), 0.0);
    }
    return out;
}

Gradients backward(nn::Tape &tape, const nn::Tensor &loss, const ParamBinder &binder) {
    tape.backward(loss);
    return binder.gradients();
}

void adam_step(ModelParams &params, const Gradients &grads, AdamState &state) {
    for (const auto &[name, g] : grads) {
        const ParamTensor &p = params.at(name);
        if (g.size() != p.data.size()) fail(ErrorCode::ShapeMismatch, "gradient for " + name + " has the wrong size");
        for (double x : g)
            if (!std::isfinite(x)) fail(ErrorCode::TrainingDiverged, "non-finite gradient in " + name);
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (const auto &[name, g] : grads) {
        ParamTensor &p = params.at(name);
        auto &m = state.m[name];
        auto &v = state.v[name];
        if (m.size() != g.size()) m.assign(g.size(), 0.0);
        if (v.size() != g.size()) v.assign(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

void accumulate(Gradients &dst, const Gradients &src, double scale) {
    for (const auto &[name, g] : src) {
        auto &d = dst[name];
        if (d.empty()) d.assign(g.size(), 0.0);
        if (d.size() != g.size()) fail(ErrorCode::ShapeMismatch, "gradient size mismatch for " + name);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += scale * g[i];
    }
}

} // namespace qsm
