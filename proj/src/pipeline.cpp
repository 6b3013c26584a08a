#include "qsm/pipeline.hpp"

#include <chrono>

namespace qsm {

ModelParams init_model(const ModelConfig &cfg, std::uint64_t seed) {
    ModelParams p;
    std::mt19937_64 rng(seed);
    init_bgnet(p, cfg.bgnet, rng);
    init_varnet(p, cfg.varnet, rng);
    return p;
}

PipelineOutput pipeline_forward(ParamBinder &bind, const ModelConfig &cfg, const DipoleOperator &op,
                                const Volume3D &tf, const Mask3D &mask) {
    PipelineOutput out;
    out.lf_pred = bgnet_forward(bind, cfg.bgnet, tf, mask);
    out.chi = varnet_reconstruct(bind, cfg.varnet, op, out.lf_pred, out.lf_pred, mask);
    return out;
}

InferResult infer(const ModelParams &params, const ModelConfig &cfg, const Volume3D &tf, const Mask3D &mask) {
    require_same_dims(tf.dims(), mask.dims(), "infer");
    if (mask.count() == 0) fail(ErrorCode::InvalidInput, "infer: empty brain mask");
    const auto t0 = std::chrono::steady_clock::now();
    const DipoleOperator op(KGrid(tf.dims(), tf.voxel_size()), cfg.b0);
    nn::Tape tape;
    ParamBinder bind(tape, params);
    const PipelineOutput o = pipeline_forward(bind, cfg, op, tf, mask);
    InferResult r;
    r.chi = nn::to_volume(o.chi, tf.voxel_size());
    r.lf_pred = nn::to_volume(o.lf_pred, tf.voxel_size());
    if (!r.chi.all_finite() || !r.lf_pred.all_finite())
        fail(ErrorCode::NumericalConsistency, "infer produced non-finite values");
    r.residual = data_consistency_residual(op, r.chi, r.lf_pred, mask);
    r.initial_residual = data_consistency_residual(op, r.lf_pred, r.lf_pred, mask);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

} // namespace qsm
