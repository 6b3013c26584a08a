#include "qsm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace qsm {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finaliser
    std::uint64_t z = seed ^ (salt * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Mask3D LabelVolume::mask() const {
    Mask3D m(dims, false);
    for (std::size_t n = 0; n < labels.size(); ++n) m.set(n, labels[n] != 0);
    return m;
}

std::vector<std::size_t> LabelVolume::histogram() const {
    std::vector<std::size_t> h(n_classes + 1, 0);
    for (auto l : labels) {
        if (l > n_classes) fail(ErrorCode::InvalidInput, "label id exceeds class count");
        ++h[l];
    }
    return h;
}

namespace {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 matmul(const Mat3 &a, const Mat3 &b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

Vec3 apply(const Mat3 &m, const Vec3 &v) {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2], m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

Mat3 inverse(const Mat3 &m) {
    const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                       m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                       m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if (std::abs(det) < 1e-12) fail(ErrorCode::InvalidInput, "affine matrix is singular");
    Mat3 r{};
    r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
    r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
    r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
    r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
    r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
    r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
    r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
    r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
    r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
    return r;
}

Mat3 rotation_xyz(const std::array<double, 3> &ang) {
    const double cx = std::cos(ang[0]), sx = std::sin(ang[0]);
    const double cy = std::cos(ang[1]), sy = std::sin(ang[1]);
    const double cz = std::cos(ang[2]), sz = std::sin(ang[2]);
    const Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
    const Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
    const Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
    return matmul(rz, matmul(ry, rx));
}

// Uniformly distributed rotation (Shoemake's quaternion method).
Mat3 random_rotation(std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double u1 = u(rng), u2 = u(rng), u3 = u(rng);
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    const double tp = 2.0 * std::numbers::pi;
    const double w = a * std::sin(tp * u2), x = a * std::cos(tp * u2), y = b * std::sin(tp * u3),
                 z = b * std::cos(tp * u3);
    return Mat3{{{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
                 {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
                 {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}}};
}

double uniform(std::mt19937_64 &rng, double lo, double hi) {
    if (hi <= lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vec3 grid_centre(const Dims &d, const VoxelSize &v) {
    return {0.5 * static_cast<double>(d.nx - 1) * v.dx, 0.5 * static_cast<double>(d.ny - 1) * v.dy,
            0.5 * static_cast<double>(d.nz - 1) * v.dz};
}

// Cube (26-neighbourhood) dilation by r voxels, separable along the axes.
std::vector<std::uint8_t> dilate_cube(const std::vector<std::uint8_t> &in, const Dims &d, std::size_t r) {
    std::vector<std::uint8_t> cur = in, next(in.size());
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const std::size_t n = d[axis];
        const std::size_t stride = axis == 0 ? d.ny * d.nz : (axis == 1 ? d.nz : 1);
        std::fill(next.begin(), next.end(), 0);
        for (std::size_t i = 0; i < d.nx; ++i)
            for (std::size_t j = 0; j < d.ny; ++j)
                for (std::size_t k = 0; k < d.nz; ++k) {
                    const std::size_t idx = d.index(i, j, k);
                    if (!cur[idx]) continue;
                    const std::size_t pos = axis == 0 ? i : (axis == 1 ? j : k);
                    const std::size_t lo = pos >= r ? pos - r : 0;
                    const std::size_t hi = std::min(n - 1, pos + r);
                    const std::size_t base = idx - pos * stride;
                    for (std::size_t p = lo; p <= hi; ++p) next[base + p * stride] = 1;
                }
        std::swap(cur, next);
    }
    return cur;
}

} // namespace

// ---------------------------------------------------------------------------

LabelVolume make_label_phantom(Dims dims, std::size_t n_classes, std::uint64_t seed, VoxelSize voxel) {
    if (n_classes < 2) fail(ErrorCode::InvalidInput, "label phantom needs at least 2 classes");
    if (n_classes > 65535) fail(ErrorCode::InvalidInput, "label phantom supports at most 65535 classes");
    if (n_classes > dims.size()) fail(ErrorCode::InvalidInput, "more classes than voxels");
    Mask3D probe(dims); // validates dims
    (void)probe;

    std::mt19937_64 rng(mix_seed(seed, 1));
    const Vec3 c = grid_centre(dims, voxel);
    const Vec3 frac{0.36, 0.32, 0.28};
    Vec3 semi{};
    for (std::size_t a = 0; a < 3; ++a)
        semi[a] = frac[a] * static_cast<double>(dims[a]) * voxel[a] * uniform(rng, 0.95, 1.05);

    const std::size_t n_layers = std::min<std::size_t>(3, n_classes);
    const std::vector<double> bounds = n_layers == 3 ? std::vector<double>{1.0, 0.7, 0.4}
                                       : n_layers == 2 ? std::vector<double>{1.0, 0.6}
                                                       : std::vector<double>{1.0};

    std::vector<int> layer_of(dims.size(), -1);
    std::vector<std::vector<std::size_t>> layer_voxels(n_layers);
    for (std::size_t i = 0; i < dims.nx; ++i)
        for (std::size_t j = 0; j < dims.ny; ++j)
            for (std::size_t k = 0; k < dims.nz; ++k) {
                const Vec3 p{static_cast<double>(i) * voxel.dx - c[0], static_cast<double>(j) * voxel.dy - c[1],
                             static_cast<double>(k) * voxel.dz - c[2]};
                const double r = std::sqrt((p[0] / semi[0]) * (p[0] / semi[0]) + (p[1] / semi[1]) * (p[1] / semi[1]) +
                                           (p[2] / semi[2]) * (p[2] / semi[2]));
                if (r > 1.0) continue;
                std::size_t l = 0;
                while (l + 1 < n_layers && r <= bounds[l + 1]) ++l;
                layer_of[dims.index(i, j, k)] = static_cast<int>(l);
                layer_voxels[l].push_back(dims.index(i, j, k));
            }

    std::vector<std::size_t> active;
    std::size_t brain = 0;
    for (std::size_t l = 0; l < n_layers; ++l)
        if (!layer_voxels[l].empty()) {
            active.push_back(l);
            brain += layer_voxels[l].size();
        }
    if (brain < n_classes)
        fail(ErrorCode::InvalidInput, "brain envelope has " + std::to_string(brain) + " voxels, fewer than " +
                                          std::to_string(n_classes) + " classes");

    // One class per active layer, the rest handed out proportionally to size.
    std::vector<std::size_t> per_layer(n_layers, 0);
    for (auto l : active) per_layer[l] = 1;
    for (std::size_t assigned = active.size(); assigned < n_classes; ++assigned) {
        std::size_t best = active.front();
        double best_score = -1.0;
        for (auto l : active) {
            if (per_layer[l] >= layer_voxels[l].size()) continue;
            const double score = static_cast<double>(layer_voxels[l].size()) / static_cast<double>(per_layer[l] + 1);
            if (score > best_score) {
                best_score = score;
                best = l;
            }
        }
        ++per_layer[best];
    }

    LabelVolume lv{dims, voxel, n_classes, std::vector<std::uint16_t>(dims.size(), 0)};
    std::size_t label_base = 0;
    for (auto l : active) {
        auto &vox = layer_voxels[l];
        const std::size_t k = per_layer[l];
        // Partial Fisher-Yates: the first k entries become distinct seeds.
        std::vector<std::size_t> pool = vox;
        for (std::size_t s = 0; s < k; ++s) {
            std::uniform_int_distribution<std::size_t> pick(s, pool.size() - 1);
            std::swap(pool[s], pool[pick(rng)]);
        }
        std::vector<Vec3> seeds(k);
        for (std::size_t s = 0; s < k; ++s) {
            const std::size_t idx = pool[s];
            const std::size_t i = idx / (dims.ny * dims.nz), j = (idx / dims.nz) % dims.ny, kk = idx % dims.nz;
            seeds[s] = {static_cast<double>(i) * voxel.dx, static_cast<double>(j) * voxel.dy,
                        static_cast<double>(kk) * voxel.dz};
        }
        for (auto idx : vox) {
            const std::size_t i = idx / (dims.ny * dims.nz), j = (idx / dims.nz) % dims.ny, kk = idx % dims.nz;
            const Vec3 p{static_cast<double>(i) * voxel.dx, static_cast<double>(j) * voxel.dy,
                         static_cast<double>(kk) * voxel.dz};
            std::size_t best = 0;
            double best_d = INFINITY;
            for (std::size_t s = 0; s < k; ++s) {
                const double dx = p[0] - seeds[s][0], dy = p[1] - seeds[s][1], dz = p[2] - seeds[s][2];
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 < best_d) {
                    best_d = d2;
                    best = s;
                }
            }
            lv.labels[idx] = static_cast<std::uint16_t>(label_base + best + 1);
        }
        label_base += k;
    }
    return lv;
}

AffineParams sample_affine(const Dims &dims, const VoxelSize &voxel, std::uint64_t seed, const AffineRanges &r) {
    std::mt19937_64 rng(mix_seed(seed, 2));
    AffineParams p;
    const double rot = r.max_rotation_deg * std::numbers::pi / 180.0;
    for (auto &a : p.rotation) a = uniform(rng, -rot, rot);
    for (auto &s : p.scale) s = uniform(rng, r.min_scale, r.max_scale);
    for (auto &s : p.shear) s = uniform(rng, -r.max_shear, r.max_shear);
    for (std::size_t a = 0; a < 3; ++a) {
        const double fov = static_cast<double>(dims[a]) * voxel[a];
        p.translation[a] = uniform(rng, -r.max_translation_fraction * fov, r.max_translation_fraction * fov);
    }
    return p;
}

LabelVolume apply_affine(const LabelVolume &lv, const AffineParams &p) {
    const Mat3 shear{{{1.0, p.shear[0], p.shear[1]}, {0.0, 1.0, p.shear[2]}, {0.0, 0.0, 1.0}}};
    const Mat3 scale{{{p.scale[0], 0.0, 0.0}, {0.0, p.scale[1], 0.0}, {0.0, 0.0, p.scale[2]}}};
    const Mat3 fwd = matmul(rotation_xyz(p.rotation), matmul(shear, scale));
    const Mat3 inv = inverse(fwd);
    const Dims &d = lv.dims;
    const VoxelSize &v = lv.voxel;
    const Vec3 c = grid_centre(d, v);

    LabelVolume out{d, v, lv.n_classes, std::vector<std::uint16_t>(d.size(), 0)};
    for (std::size_t i = 0; i < d.nx; ++i)
        for (std::size_t j = 0; j < d.ny; ++j)
            for (std::size_t k = 0; k < d.nz; ++k) {
                const Vec3 q{static_cast<double>(i) * v.dx - c[0] - p.translation[0],
                             static_cast<double>(j) * v.dy - c[1] - p.translation[1],
                             static_cast<double>(k) * v.dz - c[2] - p.translation[2]};
                const Vec3 s = apply(inv, q);
                const double si = std::floor((s[0] + c[0]) / v.dx + 0.5);
                const double sj = std::floor((s[1] + c[1]) / v.dy + 0.5);
                const double sk = std::floor((s[2] + c[2]) / v.dz + 0.5);
                if (si < 0 || sj < 0 || sk < 0 || si >= static_cast<double>(d.nx) || sj >= static_cast<double>(d.ny) ||
                    sk >= static_cast<double>(d.nz))
                    continue;
                out.labels[d.index(i, j, k)] = lv.labels[d.index(static_cast<std::size_t>(si), static_cast<std::size_t>(sj),
                                                                 static_cast<std::size_t>(sk))];
            }
    return out;
}

LabelVolume random_affine_deform(const LabelVolume &lv, std::uint64_t seed, const AffineRanges &r) {
    return apply_affine(lv, sample_affine(lv.dims, lv.voxel, seed, r));
}

Volume3D gmm_sample_intensities(const LabelVolume &lv, std::uint64_t seed, const GmmPrior &prior) {
    if (prior.sigma_min < 0.0 || prior.sigma_max < prior.sigma_min || prior.mean_max < prior.mean_min)
        fail(ErrorCode::InvalidInput, "invalid GMM prior ranges");
    std::mt19937_64 rng(mix_seed(seed, 3));
    std::vector<double> mu(lv.n_classes + 1, 0.0), sigma(lv.n_classes + 1, 0.0);
    for (std::size_t c = 1; c <= lv.n_classes; ++c) {
        mu[c] = uniform(rng, prior.mean_min, prior.mean_max);
        sigma[c] = uniform(rng, prior.sigma_min, prior.sigma_max);
    }
    std::normal_distribution<double> z(0.0, 1.0);
    Volume3D out(lv.dims, lv.voxel, 0.0);
    for (std::size_t n = 0; n < lv.labels.size(); ++n) {
        const auto c = lv.labels[n];
        if (c == 0) continue;
        if (c > lv.n_classes) fail(ErrorCode::InvalidInput, "label id exceeds class count");
        out[n] = mu[c] + sigma[c] * z(rng);
    }
    return out;
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) fail(ErrorCode::InvalidInput, "quantile of an empty set");
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Volume3D scale_quartiles(const Volume3D &chi, const Mask3D &mask) {
    require_same_dims(chi.dims(), mask.dims(), "scale_quartiles");
    std::vector<double> vals;
    for (std::size_t n = 0; n < chi.size(); ++n)
        if (mask[n]) vals.push_back(chi[n]);
    if (vals.empty()) fail(ErrorCode::InvalidInput, "scale_quartiles: empty mask");
    double mean = 0.0;
    for (double x : vals) mean += x;
    mean /= static_cast<double>(vals.size());
    for (auto &x : vals) x -= mean;
    const double q1 = quantile(vals, 0.25), q3 = quantile(vals, 0.75);
    const double iqr = q3 - q1;
    if (!(iqr > 1e-12 * (std::abs(q1) + std::abs(q3) + 1e-300)) || !(iqr > 0.0))
        fail(ErrorCode::DegenerateDistribution, "scale_quartiles: in-mask interquartile range is zero");
    Volume3D out = chi;
    for (std::size_t n = 0; n < chi.size(); ++n)
        if (mask[n]) out[n] = (chi[n] - mean) / iqr;
    return out;
}

// ---------------------------------------------------------------------------

BackgroundResult simulate_background(const Volume3D &chi, const Mask3D &mask, const BackgroundSourceSpec &spec,
                                     std::uint64_t seed, Axis3 b0) {
    require_same_dims(chi.dims(), mask.dims(), "simulate_background");
    if (mask.count() == 0) fail(ErrorCode::InvalidInput, "simulate_background: empty brain mask");
    if (!(spec.count_mean > 0.0) || !(spec.volume_fraction > 0.0) || spec.padding_fraction < 0.0 ||
        spec.max_distance_factor < spec.min_distance_factor || spec.smoothing_voxels < 0.0)
        fail(ErrorCode::InvalidInput, "simulate_background: invalid source specification");

    const Dims d = chi.dims();
    const VoxelSize v = chi.voxel_size();
    const DipoleOperator local_op(KGrid(d, v), b0);

    BackgroundResult res;
    res.local_field = local_op.forward(chi);

    std::array<std::size_t, 3> pad{};
    for (std::size_t a = 0; a < 3; ++a)
        pad[a] = static_cast<std::size_t>(std::lround(spec.padding_fraction * static_cast<double>(d[a])));
    const Dims pd{d.nx + 2 * pad[0], d.ny + 2 * pad[1], d.nz + 2 * pad[2]};

    std::vector<std::uint8_t> brain(pd.size(), 0);
    Vec3 centroid{};
    std::size_t nb = 0;
    for (std::size_t i = 0; i < d.nx; ++i)
        for (std::size_t j = 0; j < d.ny; ++j)
            for (std::size_t k = 0; k < d.nz; ++k)
                if (mask(i, j, k)) {
                    brain[pd.index(i + pad[0], j + pad[1], k + pad[2])] = 1;
                    centroid[0] += static_cast<double>(i + pad[0]) * v.dx;
                    centroid[1] += static_cast<double>(j + pad[1]) * v.dy;
                    centroid[2] += static_cast<double>(k + pad[2]) * v.dz;
                    ++nb;
                }
    for (auto &cc : centroid) cc /= static_cast<double>(nb);
    double envelope = 0.0;
    for (std::size_t i = 0; i < pd.nx; ++i)
        for (std::size_t j = 0; j < pd.ny; ++j)
            for (std::size_t k = 0; k < pd.nz; ++k)
                if (brain[pd.index(i, j, k)]) {
                    const double dx = static_cast<double>(i) * v.dx - centroid[0];
                    const double dy = static_cast<double>(j) * v.dy - centroid[1];
                    const double dz = static_cast<double>(k) * v.dz - centroid[2];
                    envelope = std::max(envelope, std::sqrt(dx * dx + dy * dy + dz * dz));
                }
    const std::vector<std::uint8_t> forbidden = dilate_cube(brain, pd, spec.gap_voxels);
    const double gap_mm = static_cast<double>(spec.gap_voxels) * std::max({v.dx, v.dy, v.dz});

    std::mt19937_64 rng(mix_seed(seed, 4));
    std::size_t count = static_cast<std::size_t>(std::lround(spec.count_mean));
    if (!spec.fixed_count) count = static_cast<std::size_t>(std::poisson_distribution<long>(spec.count_mean)(rng));
    count = std::max<std::size_t>(count, 1);

    const double brain_volume = static_cast<double>(nb) * v.dx * v.dy * v.dz;
    const double r0 = std::cbrt(brain_volume * spec.volume_fraction * 3.0 / (4.0 * std::numbers::pi));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<double> chi_ext(pd.size(), 0.0);
    std::vector<std::size_t> voxels;
    const std::size_t max_attempts = count * std::max<std::size_t>(spec.max_attempts_per_source, 1);
    std::size_t attempts = 0;
    while (res.n_sources < count && attempts < max_attempts) {
        ++attempts;
        const Vec3 semi{r0 * std::exp(spec.axis_log_sd * gauss(rng)), r0 * std::exp(spec.axis_log_sd * gauss(rng)),
                        r0 * std::exp(spec.axis_log_sd * gauss(rng))};
        const Mat3 rot = random_rotation(rng);
        Vec3 dir{gauss(rng), gauss(rng), gauss(rng)};
        const double dn = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        const double rmax = std::max({semi[0], semi[1], semi[2]});
        const double dist = envelope + gap_mm +
                            rmax * (spec.min_distance_factor +
                                    (spec.max_distance_factor - spec.min_distance_factor) * unit(rng));
        const double amp = spec.amplitude_mean + spec.amplitude_sd * gauss(rng);
        if (dn == 0.0) continue;
        const Vec3 centre{centroid[0] + dist * dir[0] / dn, centroid[1] + dist * dir[1] / dn,
                          centroid[2] + dist * dir[2] / dn};

        voxels.clear();
        bool overlaps = false;
        std::array<long, 3> lo{}, hi{};
        for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::max(0L, static_cast<long>(std::floor((centre[a] - rmax) / v[a])));
            hi[a] = std::min(static_cast<long>(pd[a]) - 1, static_cast<long>(std::ceil((centre[a] + rmax) / v[a])));
        }
        for (long i = lo[0]; i <= hi[0] && !overlaps; ++i)
            for (long j = lo[1]; j <= hi[1] && !overlaps; ++j)
                for (long k = lo[2]; k <= hi[2]; ++k) {
                    const Vec3 q{static_cast<double>(i) * v.dx - centre[0], static_cast<double>(j) * v.dy - centre[1],
                                 static_cast<double>(k) * v.dz - centre[2]};
                    // body frame: rot^T q
                    const double bx = rot[0][0] * q[0] + rot[1][0] * q[1] + rot[2][0] * q[2];
                    const double by = rot[0][1] * q[0] + rot[1][1] * q[1] + rot[2][1] * q[2];
                    const double bz = rot[0][2] * q[0] + rot[1][2] * q[1] + rot[2][2] * q[2];
                    const double r = (bx / semi[0]) * (bx / semi[0]) + (by / semi[1]) * (by / semi[1]) +
                                     (bz / semi[2]) * (bz / semi[2]);
                    if (r > 1.0) continue;
                    const std::size_t idx = pd.index(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
                                                     static_cast<std::size_t>(k));
                    if (forbidden[idx]) {
                        overlaps = true;
                        break;
                    }
                    voxels.push_back(idx);
                }
        if (overlaps || voxels.empty()) continue;
        for (auto idx : voxels) chi_ext[idx] += amp;
        ++res.n_sources;
    }
    if (res.n_sources < count)
        fail(ErrorCode::PlacementFailed, "placed " + std::to_string(res.n_sources) + " of " + std::to_string(count) +
                                             " background sources after " + std::to_string(attempts) + " attempts");

    // Dipole kernel times a Gaussian edge-smoothing filter on the padded grid.
    const DipoleOperator padded_op(KGrid(pd, v), b0);
    const KGrid kg(pd, v);
    const std::size_t hz = pd.nz / 2 + 1;
    std::vector<double> filter = padded_op.half_kernel();
    const double two_pi2 = 2.0 * std::numbers::pi * std::numbers::pi;
    const Vec3 sig{spec.smoothing_voxels * v.dx, spec.smoothing_voxels * v.dy, spec.smoothing_voxels * v.dz};
    for (std::size_t i = 0; i < pd.nx; ++i)
        for (std::size_t j = 0; j < pd.ny; ++j)
            for (std::size_t k = 0; k < hz; ++k) {
                const double e = sig[0] * sig[0] * kg.kx[i] * kg.kx[i] + sig[1] * sig[1] * kg.ky[j] * kg.ky[j] +
                                 sig[2] * sig[2] * kg.kz[k] * kg.kz[k];
                filter[(i * pd.ny + j) * hz + k] *= std::exp(-two_pi2 * e);
            }
    std::vector<double> bg(pd.size());
    padded_op.apply_filter(filter, chi_ext.data(), bg.data());

    res.total_field = Volume3D(d, v, 0.0);
    for (std::size_t i = 0; i < d.nx; ++i)
        for (std::size_t j = 0; j < d.ny; ++j)
            for (std::size_t k = 0; k < d.nz; ++k) {
                const std::size_t n = d.index(i, j, k);
                if (mask[n]) res.total_field[n] = res.local_field[n] + bg[pd.index(i + pad[0], j + pad[1], k + pad[2])];
            }
    return res;
}

// ---------------------------------------------------------------------------

namespace {
constexpr std::uint64_t kSubjectSalt = 0x5B1EC7ULL;
constexpr std::uint64_t kSampleSalt = 0x5A3B1EULL;
} // namespace

DatasetGenerator::DatasetGenerator(SynthConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.n_subjects == 0 || cfg_.n_deformations == 0)
        fail(ErrorCode::InvalidInput, "dataset needs at least one subject and one deformation");
    Mask3D probe(cfg_.dims);
    (void)probe;
}

LabelVolume DatasetGenerator::subject_phantom(std::size_t subject) const {
    return make_label_phantom(cfg_.dims, cfg_.n_classes, mix_seed(mix_seed(cfg_.seed, kSubjectSalt), subject),
                              cfg_.voxel);
}

TrainingSample DatasetGenerator::make_sample(std::size_t index, const LabelVolume &subject) const {
    const std::uint64_t ss = mix_seed(mix_seed(cfg_.seed, kSampleSalt), index);
    const LabelVolume deformed = random_affine_deform(subject, mix_seed(ss, 1), cfg_.affine);
    const Mask3D mask = deformed.mask();
    if (mask.count() == 0) fail(ErrorCode::InvalidInput, "deformation pushed the brain outside the grid");
    const Volume3D raw = gmm_sample_intensities(deformed, mix_seed(ss, 2), cfg_.gmm);
    Volume3D chi = scale_quartiles(raw, mask);
    BackgroundResult bg = simulate_background(chi, mask, cfg_.background, mix_seed(ss, 3), cfg_.b0);
    return TrainingSample{std::move(chi), std::move(bg.local_field), std::move(bg.total_field), mask, ss};
}

TrainingSample DatasetGenerator::sample(std::size_t index) const {
    if (index >= size()) fail(ErrorCode::InvalidInput, "sample index out of range");
    return make_sample(index, subject_phantom(index / cfg_.n_deformations));
}

std::optional<TrainingSample> DatasetGenerator::next() {
    if (cursor_ >= size()) return std::nullopt;
    const std::size_t subject = cursor_ / cfg_.n_deformations;
    if (!subject_cache_ || subject_cache_->first != subject) subject_cache_.emplace(subject, subject_phantom(subject));
    return make_sample(cursor_++, subject_cache_->second);
}

std::vector<TrainingSample> generate_dataset(const SynthConfig &cfg) {
    DatasetGenerator gen(cfg);
    std::vector<TrainingSample> out;
    out.reserve(gen.size());
    while (auto s = gen.next()) out.push_back(std::move(*s));
    return out;
}

} // namespace qsm
