#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qsm/params.hpp"
#include "qsm/volume.hpp"

namespace qsm {

// Volume file layout, all little-endian:
//   "NXQV"  u16 version  u32 nx ny nz  f32 dx dy dz  u8 dtype  payload (z fastest)
inline constexpr std::uint16_t kVolumeVersion = 1;

enum class VolumeDtype : std::uint8_t { F32 = 1, F64 = 2, U8Mask = 3 };

std::vector<std::uint8_t> encode_volume(const Volume3D &v, VolumeDtype dtype = VolumeDtype::F64);
std::vector<std::uint8_t> encode_mask(const Mask3D &m, VoxelSize voxel = {});

struct DecodedVolume {
    VolumeDtype dtype = VolumeDtype::F64;
    Volume3D volume; // mask files decode to 0/1 values
};
DecodedVolume decode_volume(const std::vector<std::uint8_t> &bytes);

void write_volume(const std::filesystem::path &path, const Volume3D &v, VolumeDtype dtype = VolumeDtype::F64);
Volume3D read_volume(const std::filesystem::path &path);
void write_mask(const std::filesystem::path &path, const Mask3D &m, VoxelSize voxel = {});
// Accepts any dtype; nonzero voxels are true.
Mask3D read_mask(const std::filesystem::path &path);

// Checkpoint layout, little-endian:
//   "NXQC"  u16 version  u32 len + metadata JSON
//   u32 tensor count, per tensor: u16 name len, name, u8 rank, u32 dims[rank], f64 data
//   u64 adam step, f64 lr beta1 beta2 eps
//   u32 moment count, per entry: u16 name len, name, u64 n, f64 m[n], f64 v[n]
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelParams params;
    AdamState adam;
    std::string metadata = "{}"; // JSON text
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint &c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t> &bytes);

void write_checkpoint(const std::filesystem::path &path, const Checkpoint &c);
Checkpoint read_checkpoint(const std::filesystem::path &path);

// Copies the stored tensors into `expected`, whose names and shapes define
// the topology. Missing names raise MissingEntry, shape disagreements and
// unexpected names raise ShapeMismatch; both list the offending tensors.
void load_params_into(const Checkpoint &c, ModelParams &expected);

std::vector<std::uint8_t> read_file(const std::filesystem::path &path);
void write_file(const std::filesystem::path &path, const std::vector<std::uint8_t> &bytes);

inline constexpr int kManifestVersion = 1;

struct ManifestEntry {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    std::string chi, local_field, total_field, mask; // relative to the manifest directory
};

struct Manifest {
    int format_version = kManifestVersion;
    std::uint64_t seed = 0;
    std::string config = "{}"; // generator config as JSON text
    std::vector<ManifestEntry> samples;
};

void write_manifest(const std::filesystem::path &path, const Manifest &m);
// Checks the version and that every referenced file exists.
Manifest read_manifest(const std::filesystem::path &path);

} // namespace qsm
