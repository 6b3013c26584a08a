#include "qsm/bgnet.hpp"

#include <cmath>

namespace qsm {

namespace {

double in_mask_std(const Volume3D &v, const Mask3D &m) {
    double s = 0.0, s2 = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (m[i]) {
            s += v[i];
            s2 += v[i] * v[i];
            ++n;
        }
    if (n == 0) fail(ErrorCode::InvalidInput, "bgnet: empty brain mask");
    const double mu = s / static_cast<double>(n);
    const double var = s2 / static_cast<double>(n) - mu * mu;
    return var > 1e-24 ? std::sqrt(var) : 1.0;
}

} // namespace

void init_bgnet(ModelParams &params, const BgNetConfig &cfg, std::mt19937_64 &rng) {
    init_unet(params, kBgNetPrefix, cfg.unet, rng);
}

nn::Tensor bgnet_forward(ParamBinder &bind, const BgNetConfig &cfg, const Volume3D &tf, const Mask3D &mask) {
    require_same_dims(tf.dims(), mask.dims(), "bgnet");
    const double sd = in_mask_std(tf, mask);
    Volume3D input = apply_mask(tf, mask);
    for (auto &v : input.values()) v /= sd;
    nn::Tensor x = nn::from_volume(bind.tape(), input);
    nn::Tensor y = unet_forward_padded(bind, kBgNetPrefix, cfg.unet, x);
    return nn::mask_mul(nn::scale(y, sd), mask);
}

Volume3D bgnet_predict(const ModelParams &params, const BgNetConfig &cfg, const Volume3D &tf, const Mask3D &mask) {
    nn::Tape tape;
    ParamBinder bind(tape, params);
    return nn::to_volume(bgnet_forward(bind, cfg, tf, mask), tf.voxel_size());
}

} // namespace qsm
