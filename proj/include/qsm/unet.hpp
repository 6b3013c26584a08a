#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "qsm/params.hpp"

namespace qsm {

// Fully convolutional U-Net. depth = number of 2x downsamplings; depth 0
// degenerates to a plain stack of convolutions at full resolution.
// Channels double per level; skips are joined by channel concatenation.
// Every conv except the last is followed by a leaky ReLU.
struct UNetConfig {
    std::size_t depth = 3;
    std::size_t base_channels = 8;
    std::size_t kernel = 3;
    std::size_t convs_per_level = 2;
    double alpha = 0.1;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
};

// He-normal weights, zero biases, and an all-zero output conv so the
// untrained network maps every input to zero.
void init_unet(ModelParams &params, const std::string &prefix, const UNetConfig &cfg, std::mt19937_64 &rng);

// x must have spatial dims divisible by 2^depth.
nn::Tensor unet_forward(ParamBinder &bind, const std::string &prefix, const UNetConfig &cfg, const nn::Tensor &x);

// Symmetric zero padding to the next multiple of 2^depth, forward, crop back.
nn::Tensor unet_forward_padded(ParamBinder &bind, const std::string &prefix, const UNetConfig &cfg,
                               const nn::Tensor &x);

} // namespace qsm
