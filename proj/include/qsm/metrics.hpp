#pragma once

#include <string>
#include <vector>

#include "qsm/volume.hpp"

namespace qsm {

// All metrics read only voxels inside `mask`.

// 100 * ||x - gt|| / ||gt||, in percent.
double nrmse(const Volume3D &x, const Volume3D &gt, const Mask3D &mask);

// nrmse of the best affine map a*x + b onto gt (least squares, in-mask).
double ddnrmse(const Volume3D &x, const Volume3D &gt, const Mask3D &mask);

struct AffineFit {
    double a = 1.0;
    double b = 0.0;
};
AffineFit fit_affine(const Volume3D &x, const Volume3D &gt, const Mask3D &mask);

struct SsimOptions {
    double sigma = 1.5;
    std::size_t window = 11;
    double k1 = 0.01;
    double k2 = 0.03;
};

// Mean local SSIM over in-mask window centres. Local statistics use a
// truncated Gaussian window restricted to in-mask voxels and renormalised.
// The dynamic range is the in-mask range of gt.
double ssim(const Volume3D &x, const Volume3D &gt, const Mask3D &mask, const SsimOptions &opts = {});

struct MetricReport {
    std::string method;
    std::string label;
    double nrmse = 0.0;
    double ddnrmse = 0.0;
    double ssim = 0.0;
    std::size_t mask_voxels = 0;
};

MetricReport evaluate(const std::string &method, const Volume3D &x, const Volume3D &gt, const Mask3D &mask,
                      const std::string &label = "");

// Method,NRMSE,ddNRMSE,SSIM table (plus label and voxel count columns).
std::string metrics_csv(const std::vector<MetricReport> &rows);

} // namespace qsm
