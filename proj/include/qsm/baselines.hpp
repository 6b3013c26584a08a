#pragma once

#include <vector>

#include "qsm/dipole.hpp"

namespace qsm {

struct TkdConfig {
    double threshold = 0.2; // on |D|
};

// Truncated k-space division: Y/D where |D| >= t, Y/(t sign D) elsewhere,
// with sign(0) = +1.
Volume3D tkd_invert(const DipoleOperator &op, const Volume3D &field, const TkdConfig &cfg = {});

// The per-bin multiplier tkd_invert applies, on the op's half spectrum.
std::vector<double> tkd_filter(const DipoleOperator &op, const TkdConfig &cfg = {});

struct CgConfig {
    double mu = 0.1;
    std::size_t max_iterations = 500;
    double tolerance = 1e-10; // on ||r|| / ||Phi^T y||
};

struct CgResult {
    Volume3D chi;
    std::size_t iterations = 0;
    bool converged = false;
    // ||r_k|| / ||b|| for k = 0..iterations.
    std::vector<double> residual_history;
    // 0.5 x^T A x - b^T x per iterate; CG keeps this non-increasing.
    std::vector<double> energy_history;
};

// Matrix-free conjugate gradient on (Phi^T Phi + mu I) x = Phi^T y from x = 0.
// If the iteration cap is hit the last iterate is returned with converged = false.
CgResult cg_tikhonov_invert(const DipoleOperator &op, const Volume3D &field, const CgConfig &cfg = {});

} // namespace qsm
