#pragma once

#include <cstdint>

#include "qsm/bgnet.hpp"
#include "qsm/varnet.hpp"

namespace qsm {

// Background removal followed by unrolled dipole inversion.
struct ModelConfig {
    BgNetConfig bgnet{};
    VarNetConfig varnet{};
    Axis3 b0{0.0, 0.0, 1.0};
};

ModelParams init_model(const ModelConfig &cfg, std::uint64_t seed);

struct PipelineOutput {
    nn::Tensor lf_pred;
    nn::Tensor chi;
};

// Records the whole pipeline on the binder's tape: LF_pred = UNet(TF),
// x_0 = LF_pred, x_S after the unrolled steps.
PipelineOutput pipeline_forward(ParamBinder &bind, const ModelConfig &cfg, const DipoleOperator &op,
                                const Volume3D &tf, const Mask3D &mask);

struct InferResult {
    Volume3D chi;
    Volume3D lf_pred;
    // ||Phi x_S - LF_pred|| / ||LF_pred|| in-mask.
    double residual = 0.0;
    // Same for the initial iterate x_0 = LF_pred.
    double initial_residual = 0.0;
    double seconds = 0.0;
};

InferResult infer(const ModelParams &params, const ModelConfig &cfg, const Volume3D &tf, const Mask3D &mask);

} // namespace qsm
