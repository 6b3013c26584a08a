#include "qsm/baselines.hpp"

#include <cmath>

namespace qsm {

std::vector<double> tkd_filter(const DipoleOperator &op, const TkdConfig &cfg) {
    if (!(cfg.threshold > 0.0)) fail(ErrorCode::InvalidInput, "TKD threshold must be positive");
    std::vector<double> f = op.half_kernel();
    for (auto &d : f) {
        if (std::abs(d) >= cfg.threshold)
            d = 1.0 / d;
        else
            d = (d < 0.0 ? -1.0 : 1.0) / cfg.threshold;
    }
    return f;
}

Volume3D tkd_invert(const DipoleOperator &op, const Volume3D &field, const TkdConfig &cfg) {
    require_same_dims(field.dims(), op.dims(), "tkd_invert");
    const std::vector<double> f = tkd_filter(op, cfg);
    Volume3D out(field.dims(), field.voxel_size());
    op.apply_filter(f, field.values().data(), out.values().data());
    return out;
}

namespace {

void axpy(double a, const std::vector<double> &x, std::vector<double> &y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

double vdot(const std::vector<double> &a, const std::vector<double> &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace

CgResult cg_tikhonov_invert(const DipoleOperator &op, const Volume3D &field, const CgConfig &cfg) {
    require_same_dims(field.dims(), op.dims(), "cg_tikhonov_invert");
    if (cfg.mu < 0.0) fail(ErrorCode::InvalidInput, "Tikhonov weight must be non-negative");
    if (!(cfg.tolerance > 0.0)) fail(ErrorCode::InvalidInput, "CG tolerance must be positive");

    const std::size_t n = field.size();
    auto apply_a = [&](const std::vector<double> &x, std::vector<double> &out) {
        std::vector<double> tmp(n);
        op.apply(x.data(), tmp.data());
        op.apply(tmp.data(), out.data());
        axpy(cfg.mu, x, out);
    };

    std::vector<double> b(n);
    op.apply(field.values().data(), b.data());
    const double bnorm = std::sqrt(vdot(b, b));

    CgResult res;
    res.chi = Volume3D(field.dims(), field.voxel_size(), 0.0);
    std::vector<double> &x = res.chi.values();
    res.residual_history.push_back(bnorm > 0.0 ? 1.0 : 0.0);
    res.energy_history.push_back(0.0);
    if (bnorm == 0.0) {
        res.converged = true;
        return res;
    }

    std::vector<double> r = b, p = b, ap(n);
    double rr = vdot(r, r);
    for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
        apply_a(p, ap);
        const double pap = vdot(p, ap);
        if (!(pap > 0.0)) break; // exact solution in the null space direction
        const double alpha = rr / pap;
        axpy(alpha, p, x);
        axpy(-alpha, ap, r);
        const double rr_new = vdot(r, r);
        res.iterations = it + 1;
        res.residual_history.push_back(std::sqrt(rr_new) / bnorm);
        // With r = b - Ax: 0.5 x^T A x - b^T x = -0.5 x^T (b + r)
        double e = 0.0;
        for (std::size_t i = 0; i < n; ++i) e -= 0.5 * x[i] * (b[i] + r[i]);
        res.energy_history.push_back(e);
        if (std::sqrt(rr_new) <= cfg.tolerance * bnorm) {
            res.converged = true;
            break;
        }
        const double beta = rr_new / rr;
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
        rr = rr_new;
    }
    if (!res.converged && res.residual_history.back() <= cfg.tolerance) res.converged = true;
    if (!res.chi.all_finite()) fail(ErrorCode::NumericalConsistency, "CG produced non-finite values");
    return res;
}

} // namespace qsm
