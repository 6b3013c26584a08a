#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "qsm/dipole.hpp"
#include "qsm/volume.hpp"

namespace qsm {

// Per-voxel class ids; 0 is outside the brain, 1..n_classes inside.
struct LabelVolume {
    Dims dims;
    VoxelSize voxel;
    std::size_t n_classes = 0;
    std::vector<std::uint16_t> labels;

    Mask3D mask() const;
    // Number of voxels per label id, index 0..n_classes.
    std::vector<std::size_t> histogram() const;
    bool operator==(const LabelVolume &) const = default;
};

// Brain envelope (ellipsoid) split into nested shells, each shell partitioned
// into Voronoi cells around distinct random seed voxels. Every class is
// nonempty because each seed voxel lies in its own cell.
LabelVolume make_label_phantom(Dims dims, std::size_t n_classes, std::uint64_t seed, VoxelSize voxel = {});

struct AffineParams {
    std::array<double, 3> rotation{};              // radians about x, y, z (applied x, then y, then z)
    std::array<double, 3> scale{1.0, 1.0, 1.0};
    std::array<double, 3> shear{};                 // xy, xz, yz
    std::array<double, 3> translation{};           // mm
};

struct AffineRanges {
    double max_rotation_deg = 15.0;
    double min_scale = 0.85;
    double max_scale = 1.15;
    double max_shear = 0.1;
    double max_translation_fraction = 0.05; // of the field of view per axis
};

AffineParams sample_affine(const Dims &dims, const VoxelSize &voxel, std::uint64_t seed, const AffineRanges &r = {});
// Nearest-neighbour resampling about the grid centre; samples falling
// outside the source grid become background.
LabelVolume apply_affine(const LabelVolume &lv, const AffineParams &p);
LabelVolume random_affine_deform(const LabelVolume &lv, std::uint64_t seed, const AffineRanges &r = {});

struct GmmPrior {
    double mean_min = -1.0;
    double mean_max = 1.0;
    double sigma_min = 0.005;
    double sigma_max = 0.05;
};

// Per class c: mu_c ~ U(mean_min, mean_max), sigma_c ~ U(sigma_min, sigma_max),
// then an independent N(mu_c, sigma_c^2) draw per voxel. Background stays 0.
Volume3D gmm_sample_intensities(const LabelVolume &lv, std::uint64_t seed, const GmmPrior &prior = {});

// Linear-interpolated sample quantile (the "type 7" rule), q in [0, 1].
double quantile(std::vector<double> values, double q);

// In-mask: subtract the mean, divide by the interquartile range. Out-of-mask
// voxels are left as they are. Throws DegenerateDistribution when Q3 <= Q1.
Volume3D scale_quartiles(const Volume3D &chi, const Mask3D &mask);

struct BackgroundSourceSpec {
    double count_mean = 100.0;
    bool fixed_count = false;           // otherwise Poisson(count_mean), at least 1
    double amplitude_mean = 9.2;        // ppm, same unit as chi
    double amplitude_sd = 1.0;
    double volume_fraction = 0.1;       // mean source volume / brain volume
    double axis_log_sd = 0.2;           // log-normal spread of each semi-axis
    double min_distance_factor = 0.3;   // centre distance beyond envelope + gap, in units of the source radius
    double max_distance_factor = 2.0;
    std::size_t gap_voxels = 4;         // keep-out margin around the brain
    double smoothing_voxels = 1.2;      // Gaussian edge smoothing of the sources
    double padding_fraction = 0.5;      // of each axis, added on both sides
    std::size_t max_attempts_per_source = 50;
};

struct BackgroundResult {
    Volume3D total_field;
    Volume3D local_field;
    std::size_t n_sources = 0;
};

// local_field = Phi chi on the sample grid. total_field = mask * (local_field + b),
// where b is the field of the external sources computed on the padded grid and
// cropped back.
BackgroundResult simulate_background(const Volume3D &chi, const Mask3D &mask, const BackgroundSourceSpec &spec,
                                     std::uint64_t seed, Axis3 b0 = {0.0, 0.0, 1.0});

struct TrainingSample {
    Volume3D chi;
    Volume3D local_field;
    Volume3D total_field;
    Mask3D mask;
    std::uint64_t seed = 0;
};

struct SynthConfig {
    Dims dims{32, 32, 32};
    VoxelSize voxel{};
    std::size_t n_classes = 184;
    std::size_t n_subjects = 1;
    std::size_t n_deformations = 1;
    std::uint64_t seed = 0;
    Axis3 b0{0.0, 0.0, 1.0};
    GmmPrior gmm{};
    AffineRanges affine{};
    BackgroundSourceSpec background{};
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// Streams n_subjects * n_deformations samples. Sample k belongs to subject
// k / n_deformations; all randomness derives from config.seed and k, so any
// sample can be regenerated on its own.
class DatasetGenerator {
public:
    explicit DatasetGenerator(SynthConfig cfg);

    std::size_t size() const noexcept { return cfg_.n_subjects * cfg_.n_deformations; }
    TrainingSample sample(std::size_t index) const;
    // Sequential access; returns std::nullopt past the end.
    std::optional<TrainingSample> next();
    const SynthConfig &config() const noexcept { return cfg_; }

private:
    TrainingSample make_sample(std::size_t index, const LabelVolume &subject) const;
    LabelVolume subject_phantom(std::size_t subject) const;

    SynthConfig cfg_;
    std::size_t cursor_ = 0;
    std::optional<std::pair<std::size_t, LabelVolume>> subject_cache_;
};

std::vector<TrainingSample> generate_dataset(const SynthConfig &cfg);

} // namespace qsm
