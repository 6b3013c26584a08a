#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qsm/autodiff.hpp"

namespace qsm {

struct ParamTensor {
    nn::Shape shape;
    std::vector<double> data;

    bool operator==(const ParamTensor &) const = default;
};

// Named learnable tensors. Iteration order is lexicographic by name, which
// fixes the order of every reduction, update and serialisation.
class ModelParams {
public:
    void add(const std::string &name, nn::Shape shape, std::vector<double> data);
    bool contains(const std::string &name) const { return tensors_.count(name) != 0; }
    const ParamTensor &at(const std::string &name) const;
    ParamTensor &at(const std::string &name);
    const std::map<std::string, ParamTensor> &tensors() const noexcept { return tensors_; }
    std::vector<std::string> names() const;
    std::size_t total_size() const;

    double norm() const;
    // Norm restricted to names starting with `prefix`.
    double group_norm(const std::string &prefix) const;
    // FNV-1a over names, shapes and the raw bytes of every value.
    std::uint64_t checksum() const;

    bool operator==(const ModelParams &) const = default;

private:
    std::map<std::string, ParamTensor> tensors_;
};

using Gradients = std::map<std::string, std::vector<double>>;

double gradient_norm(const Gradients &g, const std::string &prefix = "");

// Binds parameters onto a tape lazily: the first lookup of a name creates a
// leaf variable, later lookups reuse it so gradients accumulate.
class ParamBinder {
public:
    ParamBinder(nn::Tape &tape, const ModelParams &params) : tape_(tape), params_(params) {}

    nn::Tensor operator()(const std::string &name);
    nn::Tape &tape() noexcept { return tape_; }
    const ModelParams &params() const noexcept { return params_; }

    // Gradient of every parameter; names never bound (or not reached by the
    // backward sweep) get zeros.
    Gradients gradients() const;

private:
    nn::Tape &tape_;
    const ModelParams &params_;
    std::map<std::string, nn::Tensor> bound_;
};

// Runs the reverse sweep from `loss` and collects parameter gradients.
Gradients backward(nn::Tape &tape, const nn::Tensor &loss, const ParamBinder &binder);

struct AdamState {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;

    bool operator==(const AdamState &) const = default;
};

// Bias-corrected Adam update. Throws TrainingDiverged on non-finite gradients
// before touching any parameter.
void adam_step(ModelParams &params, const Gradients &grads, AdamState &state);

// Accumulates `src` into `dst` (dst += scale * src), creating entries as needed.
void accumulate(Gradients &dst, const Gradients &src, double scale = 1.0);

} // namespace qsm
