#pragma once

#include "qsm/unet.hpp"
#include "qsm/volume.hpp"

namespace qsm {

inline constexpr const char *kBgNetPrefix = "bgnet";

// Background-field removal: total field in, local field out, both masked.
struct BgNetConfig {
    UNetConfig unet{};
};

void init_bgnet(ModelParams &params, const BgNetConfig &cfg, std::mt19937_64 &rng);

// Input is divided by its in-mask standard deviation before the U-Net and
// the output is scaled back, then masked.
nn::Tensor bgnet_forward(ParamBinder &bind, const BgNetConfig &cfg, const Volume3D &tf, const Mask3D &mask);

Volume3D bgnet_predict(const ModelParams &params, const BgNetConfig &cfg, const Volume3D &tf, const Mask3D &mask);

} // namespace qsm
