#include "qsm/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace qsm {

namespace {

void check(const Volume3D &x, const Volume3D &gt, const Mask3D &mask, const char *what) {
    require_same_dims(x.dims(), gt.dims(), what);
    require_same_dims(x.dims(), mask.dims(), what);
    if (mask.count() == 0) fail(ErrorCode::InvalidInput, std::string(what) + ": empty mask");
}

// Zero-padded 1D correlation with `w` along one axis, in place.
void smooth_axis(std::vector<double> &v, const Dims &d, std::size_t axis, const std::vector<double> &w) {
    const std::size_t n = d[axis];
    const std::size_t stride = axis == 0 ? d.ny * d.nz : (axis == 1 ? d.nz : 1);
    const long half = static_cast<long>(w.size() / 2);
    std::vector<double> line(n), out(n);
    for (std::size_t i = 0; i < d.nx; ++i)
        for (std::size_t j = 0; j < d.ny; ++j)
            for (std::size_t k = 0; k < d.nz; ++k) {
                const std::size_t pos = axis == 0 ? i : (axis == 1 ? j : k);
                if (pos != 0) continue;
                const std::size_t base = d.index(i, j, k);
                for (std::size_t p = 0; p < n; ++p) line[p] = v[base + p * stride];
                for (std::size_t p = 0; p < n; ++p) {
                    double s = 0.0;
                    for (long t = -half; t <= half; ++t) {
                        const long q = static_cast<long>(p) + t;
                        if (q < 0 || q >= static_cast<long>(n)) continue;
                        s += w[static_cast<std::size_t>(t + half)] * line[static_cast<std::size_t>(q)];
                    }
                    out[p] = s;
                }
                for (std::size_t p = 0; p < n; ++p) v[base + p * stride] = out[p];
            }
}

std::vector<double> smooth(std::vector<double> v, const Dims &d, const std::vector<double> &w) {
    for (std::size_t a = 0; a < 3; ++a) smooth_axis(v, d, a, w);
    return v;
}

} // namespace

double nrmse(const Volume3D &x, const Volume3D &gt, const Mask3D &mask) {
    check(x, gt, mask, "nrmse");
    double num = 0.0, den = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n)
        if (mask[n]) {
            num += (x[n] - gt[n]) * (x[n] - gt[n]);
            den += gt[n] * gt[n];
        }
    if (den == 0.0) fail(ErrorCode::InvalidInput, "nrmse: ground truth is zero inside the mask");
    return 100.0 * std::sqrt(num / den);
}

AffineFit fit_affine(const Volume3D &x, const Volume3D &gt, const Mask3D &mask) {
    check(x, gt, mask, "ddnrmse");
    double mx = 0.0, mg = 0.0;
    std::size_t cnt = 0;
    for (std::size_t n = 0; n < x.size(); ++n)
        if (mask[n]) {
            mx += x[n];
            mg += gt[n];
            ++cnt;
        }
    mx /= static_cast<double>(cnt);
    mg /= static_cast<double>(cnt);
    double sxx = 0.0, sxg = 0.0, scale = 0.0;
    for (std::size_t n = 0; n < x.size(); ++n)
        if (mask[n]) {
            sxx += (x[n] - mx) * (x[n] - mx);
            sxg += (x[n] - mx) * (gt[n] - mg);
            scale = std::max(scale, std::abs(x[n]));
        }
    if (!(sxx > static_cast<double>(cnt) * 1e-28 * scale * scale) || sxx == 0.0)
        fail(ErrorCode::DegenerateDistribution, "ddnrmse: estimate is constant inside the mask");
    AffineFit f;
    f.a = sxg / sxx;
    f.b = mg - f.a * mx;
    return f;
}

double ddnrmse(const Volume3D &x, const Volume3D &gt, const Mask3D &mask) {
    const AffineFit f = fit_affine(x, gt, mask);
    Volume3D y = x;
    for (auto &v : y.values()) v = f.a * v + f.b;
    return nrmse(y, gt, mask);
}

double ssim(const Volume3D &x, const Volume3D &gt, const Mask3D &mask, const SsimOptions &opts) {
    check(x, gt, mask, "ssim");
    if (opts.window % 2 == 0 || !(opts.sigma > 0.0)) fail(ErrorCode::InvalidInput, "ssim: window must be odd");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t n = 0; n < gt.size(); ++n)
        if (mask[n]) {
            lo = std::min(lo, gt[n]);
            hi = std::max(hi, gt[n]);
        }
    const double range = hi - lo;
    if (!(range > 0.0)) fail(ErrorCode::InvalidInput, "ssim: ground truth has zero dynamic range");
    const double c1 = (opts.k1 * range) * (opts.k1 * range);
    const double c2 = (opts.k2 * range) * (opts.k2 * range);

    std::vector<double> w(opts.window);
    const long half = static_cast<long>(opts.window / 2);
    for (long t = -half; t <= half; ++t)
        w[static_cast<std::size_t>(t + half)] = std::exp(-0.5 * static_cast<double>(t * t) / (opts.sigma * opts.sigma));

    const Dims &d = x.dims();
    const std::size_t n = x.size();
    std::vector<double> m(n), mxv(n), mgv(n), mxx(n), mgg(n), mxg(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double k = mask[i] ? 1.0 : 0.0;
        const double a = mask[i] ? x[i] : 0.0, b = mask[i] ? gt[i] : 0.0;
        m[i] = k;
        mxv[i] = a;
        mgv[i] = b;
        mxx[i] = a * a;
        mgg[i] = b * b;
        mxg[i] = a * b;
    }
    m = smooth(std::move(m), d, w);
    mxv = smooth(std::move(mxv), d, w);
    mgv = smooth(std::move(mgv), d, w);
    mxx = smooth(std::move(mxx), d, w);
    mgg = smooth(std::move(mgg), d, w);
    mxg = smooth(std::move(mxg), d, w);

    double total = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double wsum = m[i];
        const double ux = mxv[i] / wsum, ug = mgv[i] / wsum;
        const double vx = mxx[i] / wsum - ux * ux;
        const double vg = mgg[i] / wsum - ug * ug;
        const double cxg = mxg[i] / wsum - ux * ug;
        const double num = (2.0 * ux * ug + c1) * (2.0 * cxg + c2);
        const double den = (ux * ux + ug * ug + c1) * (vx + vg + c2);
        total += num / den;
        ++cnt;
    }
    return total / static_cast<double>(cnt);
}

MetricReport evaluate(const std::string &method, const Volume3D &x, const Volume3D &gt, const Mask3D &mask,
                      const std::string &label) {
    MetricReport r;
    r.method = method;
    r.label = label;
    r.nrmse = nrmse(x, gt, mask);
    r.ddnrmse = ddnrmse(x, gt, mask);
    r.ssim = ssim(x, gt, mask);
    r.mask_voxels = mask.count();
    return r;
}

std::string metrics_csv(const std::vector<MetricReport> &rows) {
    std::ostringstream os;
    os << "Method,Label,NRMSE,ddNRMSE,SSIM,MaskVoxels\n";
    char buf[128];
    for (const auto &r : rows) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", r.nrmse, r.ddnrmse, r.ssim);
        os << r.method << ',' << r.label << ',' << buf << ',' << r.mask_voxels << '\n';
    }
    return os.str();
}

} // namespace qsm
