#include "qsm/varnet.hpp"

#include <cmath>
#include <numbers>

namespace qsm {

std::string lambda_name(std::size_t step) { return std::string(kVarNetPrefix) + ".step" + std::to_string(step) + ".lambda"; }

std::string regularizer_prefix(std::size_t step) {
    return std::string(kVarNetPrefix) + ".step" + std::to_string(step) + ".reg";
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double inverse_softplus(double y) {
    if (!(y > 0.0)) fail(ErrorCode::InvalidInput, "inverse_softplus needs a positive argument");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

std::vector<double> initial_lambdas(const VarNetConfig &cfg) {
    if (cfg.lambda_schedule == VarNetConfig::LambdaSchedule::Constant) return std::vector<double>(cfg.steps, cfg.lambda_init);
    // Per bin one step scales the error by (1 - 2 lambda D^2); put the roots
    // 1 / (2 lambda) at the Chebyshev nodes of [t^2, 4/9].
    const double lo = cfg.lambda_band_min * cfg.lambda_band_min, hi = 4.0 / 9.0;
    const double s = static_cast<double>(cfg.steps);
    std::vector<double> out;
    for (std::size_t k = 0; k < cfg.steps; ++k) {
        const double node = 0.5 * (lo + hi) + 0.5 * (hi - lo) * std::cos((2.0 * k + 1.0) * std::numbers::pi / (2.0 * s));
        out.push_back(0.5 / node);
    }
    return out;
}

void init_varnet(ModelParams &params, const VarNetConfig &cfg, std::mt19937_64 &rng) {
    if (cfg.steps == 0) fail(ErrorCode::Config, "variational network needs at least one step");
    if (!(cfg.lambda_band_min > 0.0 && cfg.lambda_band_min < 2.0 / 3.0))
        fail(ErrorCode::Config, "lambda_band_min must lie in (0, 2/3)");
    const auto lambdas = initial_lambdas(cfg);
    for (std::size_t i = 0; i < cfg.steps; ++i) {
        params.add(lambda_name(i), {1}, {inverse_softplus(lambdas[i])});
        init_unet(params, regularizer_prefix(i), cfg.regularizer, rng);
    }
}

double lambda_value(const ModelParams &params, std::size_t step) { return softplus(params.at(lambda_name(step)).data[0]); }

Volume3D data_term_grad(const DipoleOperator &op, const Volume3D &x, const Volume3D &lf_pred, double lambda,
                        const Mask3D *mask) {
    require_same_dims(x.dims(), lf_pred.dims(), "data_term_grad");
    require_same_dims(x.dims(), op.dims(), "data_term_grad");
    Volume3D r = op.forward(x);
    for (std::size_t n = 0; n < r.size(); ++n) {
        r[n] -= lf_pred[n];
        if (mask && !(*mask)[n]) r[n] = 0.0;
    }
    Volume3D g = op.adjoint(r);
    for (auto &v : g.values()) v *= 2.0 * lambda;
    return g;
}

nn::Tensor varnet_step(ParamBinder &bind, const VarNetConfig &cfg, std::size_t step, const DipoleOperator &op,
                       const nn::Tensor &x, const nn::Tensor &lf_pred, const Mask3D &mask) {
    if (step >= cfg.steps) fail(ErrorCode::InvalidInput, "varnet step index out of range");
    nn::Tensor resid = nn::sub(nn::dipole_forward(x, op), lf_pred);
    if (cfg.mask_data_term) resid = nn::mask_mul(resid, mask);
    nn::Tensor lam = nn::softplus(bind(lambda_name(step)));
    nn::Tensor data_grad = nn::scalar_mul(lam, nn::scale(nn::dipole_forward(resid, op), 2.0));
    nn::Tensor reg = unet_forward_padded(bind, regularizer_prefix(step), cfg.regularizer, x);
    nn::Tensor next = nn::sub(x, nn::add(data_grad, reg));
    return cfg.mask_iterates ? nn::mask_mul(next, mask) : next;
}

nn::Tensor varnet_reconstruct(ParamBinder &bind, const VarNetConfig &cfg, const DipoleOperator &op,
                              const nn::Tensor &lf_pred, const nn::Tensor &x0, const Mask3D &mask,
                              std::vector<nn::Tensor> *iterates) {
    nn::Tensor x = x0;
    if (iterates) iterates->push_back(x);
    for (std::size_t i = 0; i < cfg.steps; ++i) {
        x = varnet_step(bind, cfg, i, op, x, lf_pred, mask);
        if (iterates) iterates->push_back(x);
    }
    return x;
}

VarNetResult varnet_reconstruct(const ModelParams &params, const VarNetConfig &cfg, const DipoleOperator &op,
                                const Volume3D &lf_pred, const Volume3D &x0, const Mask3D &mask, bool keep_iterates) {
    require_same_dims(lf_pred.dims(), x0.dims(), "varnet_reconstruct");
    require_same_dims(lf_pred.dims(), mask.dims(), "varnet_reconstruct");
    nn::Tape tape;
    ParamBinder bind(tape, params);
    std::vector<nn::Tensor> its;
    nn::Tensor y = nn::from_volume(tape, lf_pred);
    nn::Tensor x = nn::from_volume(tape, x0);
    nn::Tensor out = varnet_reconstruct(bind, cfg, op, y, x, mask, keep_iterates ? &its : nullptr);
    VarNetResult res{nn::to_volume(out, lf_pred.voxel_size()), {}};
    for (const auto &t : its) res.iterates.push_back(nn::to_volume(t, lf_pred.voxel_size()));
    return res;
}

double data_consistency_residual(const DipoleOperator &op, const Volume3D &x, const Volume3D &y, const Mask3D &mask) {
    const Volume3D fx = op.forward(x);
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n < fx.size(); ++n)
        if (mask[n]) {
            num += (fx[n] - y[n]) * (fx[n] - y[n]);
            den += y[n] * y[n];
        }
    if (den == 0.0) return num == 0.0 ? 0.0 : INFINITY;
    return std::sqrt(num / den);
}

} // namespace qsm
