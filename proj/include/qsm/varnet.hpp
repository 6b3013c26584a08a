#pragma once

#include <string>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/unet.hpp"

namespace qsm {

inline constexpr const char *kVarNetPrefix = "varnet";

// Unrolled gradient scheme
//   x_{i+1} = M * (x_i - (2 lambda_i Phi^T M (Phi x_i - y) + Psi_i(x_i)))
// with lambda_i = softplus(raw_i) and Psi_i a per-step CNN whose output is
// read as the gradient of the learned regulariser. M is the brain mask.
struct VarNetConfig {
    std::size_t steps = 8;
    UNetConfig regularizer{1, 8, 3, 2, 0.1, 1, 1};
    // Initial lambda_i. Constant uses lambda_init for every step. Chebyshev
    // spreads the steps so that the S data-term updates alone approximate 1/D
    // on the band lambda_band_min <= |D| <= 2/3.
    enum class LambdaSchedule { Constant, Chebyshev };
    LambdaSchedule lambda_schedule = LambdaSchedule::Chebyshev;
    double lambda_init = 0.5;
    double lambda_band_min = 0.2;
    // Restrict the data residual to the brain mask.
    bool mask_data_term = true;
    // Zero iterates outside the brain mask after every step.
    bool mask_iterates = true;
};

std::string lambda_name(std::size_t step);
std::string regularizer_prefix(std::size_t step);

std::vector<double> initial_lambdas(const VarNetConfig &cfg);
void init_varnet(ModelParams &params, const VarNetConfig &cfg, std::mt19937_64 &rng);

double softplus(double x);
double inverse_softplus(double y);
double lambda_value(const ModelParams &params, std::size_t step);

// Gradient of lambda * ||M (y - Phi x)||^2, i.e. 2 lambda Phi^T M (Phi x - y).
// With mask == nullptr the residual is unmasked.
Volume3D data_term_grad(const DipoleOperator &op, const Volume3D &x, const Volume3D &lf_pred, double lambda,
                        const Mask3D *mask = nullptr);

// One unrolled step on the tape.
nn::Tensor varnet_step(ParamBinder &bind, const VarNetConfig &cfg, std::size_t step, const DipoleOperator &op,
                       const nn::Tensor &x, const nn::Tensor &lf_pred, const Mask3D &mask);

// Runs every configured step from x0. If `iterates` is given it receives
// x_0 .. x_S.
nn::Tensor varnet_reconstruct(ParamBinder &bind, const VarNetConfig &cfg, const DipoleOperator &op,
                              const nn::Tensor &lf_pred, const nn::Tensor &x0, const Mask3D &mask,
                              std::vector<nn::Tensor> *iterates = nullptr);

struct VarNetResult {
    Volume3D chi;
    std::vector<Volume3D> iterates; // filled only on request
};

VarNetResult varnet_reconstruct(const ModelParams &params, const VarNetConfig &cfg, const DipoleOperator &op,
                                const Volume3D &lf_pred, const Volume3D &x0, const Mask3D &mask,
                                bool keep_iterates = false);

// ||Phi x - y|| / ||y|| over the mask.
double data_consistency_residual(const DipoleOperator &op, const Volume3D &x, const Volume3D &y, const Mask3D &mask);

} // namespace qsm
